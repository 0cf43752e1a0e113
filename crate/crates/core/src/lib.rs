//! Semantic-concentration domain adaptation on a from-scratch autodiff tape.
//!
//! The crate trains a small convolutional classifier on a labelled source
//! domain and an unlabelled target domain. Same-class pairs of predictions
//! are aligned adversarially through gradient reversal, with a
//! mutual-information regularizer and an optional domain discriminator.
//! Class activation maps measure where the classifier looks.
//!
//! ```
//! use scda::autodiff::Tape;
//! use scda::tensor::Tensor;
//!
//! let mut tape = Tape::new();
//! let x = tape.param(Tensor::from_rows(&[vec![1.0, 2.0]]).unwrap());
//! let y = tape.mul(x, x).unwrap();
//! let loss = tape.sum(y);
//! let grads = tape.backward(loss).unwrap();
//! assert_eq!(grads.get(x).unwrap().data(), &[2.0, 4.0]);
//! ```

pub mod autodiff;
pub mod cam;
pub mod checkpoint;
pub mod cli;
pub mod error;
pub mod gradcheck;
pub mod model;
pub mod objectives;
pub mod pairing;
pub mod rng;
pub mod synth;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use model::{init_params, ArchConfig, ScdaModel};
pub use tensor::Tensor;
pub use trainer::{run, RunReport, TrainConfig};
