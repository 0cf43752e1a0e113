//! Generates the two-domain benchmark, prints how often the nuisance level
//! matches the label, and dumps a few images per domain as PGM files.
//!
//! ```text
//! cargo run --release --example synth_benchmark -- [out_dir] [seed]
//! ```

use std::path::PathBuf;

use scda::cam::{upsample_nearest, write_pgm};
use scda::synth::{generate, Domain, Split, SynthConfig};
use scda::tensor::Tensor;

fn main() -> scda::Result<()> {
    let mut args = std::env::args().skip(1);
    let out = PathBuf::from(args.next().unwrap_or_else(|| "synth_benchmark".into()));
    let seed: u64 = args.next().map_or(0, |s| s.parse().expect("seed"));
    std::fs::create_dir_all(&out).map_err(|e| scda::Error::io(&out, e))?;

    let cfg = SynthConfig { seed, ..Default::default() };
    for domain in [Domain::Source, Domain::Target] {
        let data = generate(&cfg, Split::Eval, domain)?;
        // Mean nuisance-pixel intensity per class.
        let mut sums = vec![(0.0, 0usize); cfg.classes];
        for s in &data.samples {
            let label = s.label.expect("eval split is labelled");
            let (tot, n) = s.image.iter().zip(&s.mask).filter(|(_, m)| !**m).fold((0.0, 0), |(t, n), (p, _)| (t + p, n + 1));
            sums[label].0 += tot / n as f64;
            sums[label].1 += 1;
        }
        let means: Vec<String> = sums.iter().map(|(t, n)| format!("{:.3}", t / *n as f64)).collect();
        println!("{:<6} {} samples, mean background intensity per class: {}", domain.name(), data.len(), means.join(" "));
        for (k, s) in data.samples.iter().take(8).enumerate() {
            let img = Tensor::new(vec![cfg.height, cfg.width], s.image.clone())?;
            let big = upsample_nearest(&img, cfg.height * 4, cfg.width * 4)?;
            write_pgm(&big, &out.join(format!("{}_{k}_class{}.pgm", domain.name(), s.label.unwrap_or(0))))?;
        }
    }
    println!("images written to {}", out.display());
    Ok(())
}
