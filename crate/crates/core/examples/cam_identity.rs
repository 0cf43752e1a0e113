//! Class activation maps of an untrained model: each logit equals the
//! spatial mean of its map. Writes the maps of one image as PGM files.
//!
//! ```text
//! cargo run --example cam_identity -- [out_dir]
//! ```

use std::path::PathBuf;

use scda::cam::{compute_cam, concentration, pgm_name, upsample_nearest, write_pgm};
use scda::model::{init_params, ArchConfig};
use scda::synth::{generate, Domain, Split, SynthConfig};
use scda::tensor::Tensor;

fn main() -> scda::Result<()> {
    let out = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "cam_identity".into()));
    std::fs::create_dir_all(&out).map_err(|e| scda::Error::io(&out, e))?;

    let model = init_params(7, &ArchConfig::default());
    let data = generate(&SynthConfig { eval_per_domain: 4, ..Default::default() }, Split::Eval, Domain::Source)?;
    let (acts, logits) = model.activations_and_logits(&data.images(&[0, 1, 2, 3]))?;
    let per: usize = acts.shape()[1..].iter().product();
    for k in 0..data.len() {
        let a = Tensor::new(acts.shape()[1..].to_vec(), acts.data()[k * per..(k + 1) * per].to_vec())?;
        let cam = compute_cam(&a, &model.classifier.weight)?;
        let gap = (0..cam.classes()).map(|c| (cam.logits[c] - logits.row(k)[c]).abs()).fold(0.0, f64::max);
        let label = data.samples[k].label.expect("eval split is labelled");
        let score = concentration(&cam, label, &data.samples[k].mask)?;
        println!("sample {k}: max |cam logit - logit| = {gap:.1e}, concentration = {:.3}", score.ratio);
        if k == 0 {
            for c in 0..cam.classes() {
                let big = upsample_nearest(&cam.map(c), 64, 64)?;
                write_pgm(&big, &out.join(pgm_name(k, c)))?;
            }
        }
    }
    println!("maps of sample 0 written to {}", out.display());
    Ok(())
}
