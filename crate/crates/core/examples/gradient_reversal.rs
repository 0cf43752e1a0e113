//! The gradient reversal layer: identity on the way forward, `−λ` times the
//! incoming gradient on the way back.
//!
//! ```text
//! cargo run --example gradient_reversal
//! ```

use scda::autodiff::Tape;
use scda::tensor::Tensor;

fn main() -> scda::Result<()> {
    let x0 = Tensor::from_rows(&[vec![1.0, -2.0, 0.5]])?;
    for lambda in [0.0, 0.5, 1.0] {
        let mut tape = Tape::new();
        let x = tape.param(x0.clone());
        let r = tape.grl(x, lambda);
        let sq = tape.mul(r, r)?;
        let l = tape.sum(sq);
        let g = tape.backward(l)?;
        println!(
            "λ={lambda}: forward {:?}, dL/dx {:?} (plain gradient is 2x)",
            tape.value(r).data(),
            g.get(x).map(|t| t.data().to_vec()).unwrap_or_default()
        );
    }
    Ok(())
}
