//! Pseudo-labels and the intra-/inter-domain pairs built from them.
//!
//! ```text
//! cargo run --example pseudo_label_pairs
//! ```

use scda::pairing::{build_pairs, pseudo_labels, DEFAULT_EPSILON};
use scda::tensor::Tensor;

fn main() -> scda::Result<()> {
    let source_labels = [0, 1, 0, 2];
    let target_probs = Tensor::from_rows(&[
        vec![0.90, 0.05, 0.05],
        vec![0.10, 0.80, 0.10],
        vec![0.40, 0.35, 0.25],
        vec![0.05, 0.05, 0.90],
    ])?;
    let pseudo = pseudo_labels(&target_probs)?;
    for (j, p) in pseudo.iter().enumerate() {
        let kept = if p.confidence >= DEFAULT_EPSILON { "confident" } else { "ignored" };
        println!("target {j}: label {} confidence {:.2} ({kept})", p.label, p.confidence);
    }
    let pairs = build_pairs(&source_labels, &pseudo, DEFAULT_EPSILON);
    println!("intra-domain pairs (source, source): {:?}", pairs.intra);
    println!("inter-domain pairs (source, target): {:?}", pairs.inter);
    Ok(())
}
