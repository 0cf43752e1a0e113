//! SCDA alone versus SCDA plus a domain discriminator trained through
//! gradient reversal (`gamma = 1`).
//!
//! ```text
//! cargo run --release --example dann_regularizer -- [seed] [steps]
//! ```

use scda::synth::{generate, Domain, Split, SynthConfig};
use scda::trainer::{run, RunData, TrainConfig};

fn main() -> scda::Result<()> {
    let mut args = std::env::args().skip(1);
    let seed: u64 = args.next().map_or(0, |s| s.parse().expect("seed"));
    let steps: usize = args.next().map_or(1600, |s| s.parse().expect("steps"));

    let synth = SynthConfig { seed, ..Default::default() };
    let source = generate(&synth, Split::Train, Domain::Source)?;
    let target = generate(&synth, Split::Train, Domain::Target)?;
    let eval = generate(&synth, Split::Eval, Domain::Target)?;
    let data = RunData { source_train: &source, target_train: &target, target_eval: &eval };

    for gamma in [0.0, 1.0] {
        let cfg = TrainConfig { seed, total_steps: steps, gamma, ..Default::default() };
        let out = run(&cfg, data)?;
        let adv: Vec<f64> = out.steps.iter().map(|(_, b)| b.adv).collect();
        let tail = &adv[adv.len().saturating_sub(100)..];
        println!(
            "gamma={gamma}: target_acc={:.3} concentration={:.3} mean adv loss over last {} steps={:.4}",
            out.report.target_acc,
            out.report.mean_concentration,
            tail.len(),
            tail.iter().sum::<f64>() / tail.len().max(1) as f64
        );
    }
    Ok(())
}
