//! Reverse-mode differentiation of a small softmax regression, checked
//! against a central finite difference.
//!
//! ```text
//! cargo run --example autodiff_basics
//! ```

use scda::autodiff::Tape;
use scda::tensor::Tensor;

fn loss(x: &Tensor, w: &Tensor, labels: &[usize]) -> scda::Result<(f64, Tensor)> {
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let wv = tape.param(w.clone());
    let logits = tape.matmul(xv, wv)?;
    let logp = tape.log_softmax_rows(logits)?;
    let picked: Vec<usize> = labels.iter().enumerate().map(|(r, &y)| r * 3 + y).collect();
    let flat = tape.reshape(logp, vec![labels.len() * 3, 1])?;
    let nll = tape.gather_rows(flat, &picked)?;
    let mean = tape.mean(nll);
    let l = tape.neg(mean);
    let grads = tape.backward(l)?;
    Ok((tape.value(l).item(), grads.get(wv).expect("w is a parameter").clone()))
}

fn main() -> scda::Result<()> {
    let x = Tensor::from_rows(&[vec![1.0, 0.5], vec![-0.3, 2.0], vec![0.7, -1.2]])?;
    let w = Tensor::from_rows(&[vec![0.1, -0.2, 0.3], vec![0.0, 0.4, -0.1]])?;
    let labels = [2, 1, 0];

    let (l, g) = loss(&x, &w, &labels)?;
    println!("loss = {l:.6}");
    let h = 1e-6;
    for i in 0..w.len() {
        let mut plus = w.clone();
        plus.data_mut()[i] += h;
        let mut minus = w.clone();
        minus.data_mut()[i] -= h;
        let fd = (loss(&x, &plus, &labels)?.0 - loss(&x, &minus, &labels)?.0) / (2.0 * h);
        println!("dL/dw[{i}]  analytic {:+.8}  finite difference {fd:+.8}", g.data()[i]);
    }
    Ok(())
}
