//! Trains full SCDA and the source-only baseline on the synthetic benchmark
//! and compares target accuracy and CAM concentration.
//!
//! ```text
//! cargo run --release --example train_scda -- [seed] [steps]
//! ```

use std::time::Instant;

use scda::objectives::Ablation;
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

    for ablation in [Ablation::source_only(), Ablation::default()] {
        let cfg = TrainConfig { seed, total_steps: steps, ablation, ..Default::default() };
        let t = Instant::now();
        let out = run(&cfg, data)?;
        let r = &out.report;
        println!(
            "{:<14} target_acc={:.3} concentration={:.3} ({:.1?})",
            r.variant, r.target_acc, r.mean_concentration, t.elapsed()
        );
        for i in &r.intervals {
            println!(
                "  step {:>4} ce={:.3} pdd_ss={:.4} pdd_st={:.4} mi={:.3} acc={:.3} conc={:.3}",
                i.step, i.ce, i.pdd_ss, i.pdd_st, i.mi, i.target_acc, i.mean_concentration
            );
        }
    }
    Ok(())
}
