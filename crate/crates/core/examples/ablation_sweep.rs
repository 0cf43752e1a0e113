//! Ablation table over several seeds: full SCDA, each single ablation,
//! source-only, and SCDA with the domain discriminator.
//!
//! ```text
//! cargo run --release --example ablation_sweep -- [steps] [seeds] [jobs]
//! ```

use scda::objectives::Ablation;
use scda::synth::{generate, Domain, Split, SynthConfig};
use scda::trainer::{run_many, RunData, TrainConfig};

fn main() -> scda::Result<()> {
    let mut args = std::env::args().skip(1);
    let steps: usize = args.next().map_or(1600, |s| s.parse().expect("steps"));
    let seeds: u64 = args.next().map_or(3, |s| s.parse().expect("seeds"));
    let jobs: usize = args.next().map_or(1, |s| s.parse().expect("jobs"));

    let variants: Vec<(&str, Ablation, f64)> = vec![
        ("scda", Ablation::default(), 0.0),
        ("w/o mi", Ablation { no_mi: true, ..Default::default() }, 0.0),
        ("w/o pdd_ss", Ablation { no_pdd_ss: true, ..Default::default() }, 0.0),
        ("w/o pdd_st", Ablation { no_pdd_st: true, ..Default::default() }, 0.0),
        ("w/o pdd", Ablation { no_pdd: true, ..Default::default() }, 0.0),
        ("source-only", Ablation::source_only(), 0.0),
        ("scda+dann", Ablation::default(), 1.0),
    ];
    let mut acc = vec![Vec::new(); variants.len()];
    let mut conc = vec![Vec::new(); variants.len()];
    for seed in 0..seeds {
        let synth = SynthConfig { seed, ..Default::default() };
        let source = generate(&synth, Split::Train, Domain::Source)?;
        let target = generate(&synth, Split::Train, Domain::Target)?;
        let eval = generate(&synth, Split::Eval, Domain::Target)?;
        let data = RunData { source_train: &source, target_train: &target, target_eval: &eval };
        let configs: Vec<TrainConfig> = variants
            .iter()
            .map(|(_, ablation, gamma)| TrainConfig {
                seed,
                total_steps: steps,
                ablation: *ablation,
                gamma: *gamma,
                ..Default::default()
            })
            .collect();
        for (i, out) in run_many(&configs, data, jobs).into_iter().enumerate() {
            let r = out?.report;
            println!("seed {seed} {:<12} acc={:.3} conc={:.3}", variants[i].0, r.target_acc, r.mean_concentration);
            acc[i].push(r.target_acc);
            conc[i].push(r.mean_concentration);
        }
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    println!("\n{:<12} {:>8} {:>8}", "variant", "acc", "conc");
    for (i, (name, _, _)) in variants.iter().enumerate() {
        println!("{:<12} {:>8.3} {:>8.3}", name, mean(&acc[i]), mean(&conc[i]));
    }
    Ok(())
}
