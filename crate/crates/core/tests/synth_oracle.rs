//! Confound strength of the synthetic benchmark, measured by a linear probe
//! that sees only nuisance pixels (the object quadrant is zeroed).

use scda::synth::{generate, glyph, Dataset, Domain, Split, SynthConfig};

/// Linear discriminant analysis: class means, a shared within-class
/// covariance with Ledoit–Wolf shrinkage toward a scaled identity, and scores
/// `xᵀΣ⁻¹μ_c − ½ μ_cᵀΣ⁻¹μ_c` (classes are balanced).
const PROBE_TRAIN: usize = 8192;
const PROBE_EVAL: usize = 2000;

struct LinearProbe {
    /// `Σ⁻¹μ_c` per class.
    directions: Vec<Vec<f64>>,
    offsets: Vec<f64>,
}

fn nuisance_pixels(data: &Dataset) -> Vec<Vec<f64>> {
    data.samples
        .iter()
        .map(|s| {
            s.image
                .iter()
                .zip(&s.mask)
                .map(|(&p, &m)| if m { 0.0 } else { p })
                .collect()
        })
        .collect()
}

/// Solves `A x = b` for symmetric positive definite `A` (row-major `d × d`).
fn cholesky_solve(a: &[f64], b: &[f64], d: usize) -> Vec<f64> {
    let mut l = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..=i {
            let mut s = a[i * d + j];
            for k in 0..j {
                s -= l[i * d + k] * l[j * d + k];
            }
            l[i * d + j] = if i == j { s.sqrt() } else { s / l[j * d + j] };
        }
    }
    let mut y = vec![0.0; d];
    for i in 0..d {
        let mut s = b[i];
        for k in 0..i {
            s -= l[i * d + k] * y[k];
        }
        y[i] = s / l[i * d + i];
    }
    let mut x = vec![0.0; d];
    for i in (0..d).rev() {
        let mut s = y[i];
        for k in i + 1..d {
            s -= l[k * d + i] * x[k];
        }
        x[i] = s / l[i * d + i];
    }
    x
}

/// Replaces the sample covariance `s` with `(1−δ)s + δ·m·I`, where `m` is the
/// mean eigenvalue and `δ` the Ledoit–Wolf estimate of the optimal intensity.
fn ledoit_wolf(s: &mut [f64], residuals: &[Vec<f64>], d: usize) {
    let n = residuals.len() as f64;
    let m = (0..d).map(|i| s[i * d + i]).sum::<f64>() / d as f64;
    let s_frob2: f64 = s.iter().map(|v| v * v).sum();
    let dist2 = (s_frob2 - 2.0 * m * m * d as f64 + m * m * d as f64) / d as f64;
    let mut spread = 0.0;
    for r in residuals {
        let norm2: f64 = r.iter().map(|v| v * v).sum();
        let mut quad = 0.0;
        for i in 0..d {
            quad += r[i] * s[i * d..(i + 1) * d].iter().zip(r).map(|(a, b)| a * b).sum::<f64>();
        }
        spread += norm2 * norm2 - 2.0 * quad + s_frob2;
    }
    let b2 = (spread / (n * n) / d as f64).min(dist2);
    let delta = if dist2 > 0.0 { b2 / dist2 } else { 1.0 };
    s.iter_mut().for_each(|v| *v *= 1.0 - delta);
    for i in 0..d {
        s[i * d + i] += delta * m;
    }
}

impl LinearProbe {
    fn fit(xs: &[Vec<f64>], ys: &[usize], classes: usize) -> Self {
        let d = xs[0].len();
        let mut means = vec![vec![0.0; d]; classes];
        let mut counts = vec![0usize; classes];
        for (x, &y) in xs.iter().zip(ys) {
            counts[y] += 1;
            for (m, v) in means[y].iter_mut().zip(x) {
                *m += v;
            }
        }
        for (m, &n) in means.iter_mut().zip(&counts) {
            m.iter_mut().for_each(|v| *v /= n as f64);
        }
        let mut cov = vec![0.0; d * d];
        let residuals: Vec<Vec<f64>> = xs
            .iter()
            .zip(ys)
            .map(|(x, &y)| x.iter().zip(&means[y]).map(|(a, m)| a - m).collect())
            .collect();
        for r in &residuals {
            for i in 0..d {
                for j in 0..d {
                    cov[i * d + j] += r[i] * r[j];
                }
            }
        }
        let n = xs.len() as f64;
        cov.iter_mut().for_each(|v| *v /= n);
        ledoit_wolf(&mut cov, &residuals, d);
        let directions: Vec<Vec<f64>> = means.iter().map(|m| cholesky_solve(&cov, m, d)).collect();
        let offsets = directions
            .iter()
            .zip(&means)
            .map(|(w, m)| -0.5 * w.iter().zip(m).map(|(a, b)| a * b).sum::<f64>())
            .collect();
        LinearProbe { directions, offsets }
    }

    fn predict(&self, x: &[f64]) -> usize {
        let scores: Vec<f64> = self
            .directions
            .iter()
            .zip(&self.offsets)
            .map(|(w, b)| b + w.iter().zip(x).map(|(a, v)| a * v).sum::<f64>())
            .collect();
        (0..scores.len()).fold(0, |best, c| if scores[c] > scores[best] { c } else { best })
    }

    fn accuracy(&self, xs: &[Vec<f64>], ys: &[usize]) -> f64 {
        let hits = xs.iter().zip(ys).filter(|(x, &y)| self.predict(x) == y).count();
        hits as f64 / ys.len() as f64
    }
}

fn labels(d: &Dataset) -> Vec<usize> {
    d.samples.iter().map(|s| s.label.unwrap()).collect()
}

#[test]
fn nuisance_probe_learns_source_but_not_target() {
    let cfg = SynthConfig {
        train_per_domain: PROBE_TRAIN,
        eval_per_domain: PROBE_EVAL,
        ..Default::default()
    };
    let train = generate(&cfg, Split::Train, Domain::Source).unwrap();
    let source_eval = generate(&cfg, Split::Eval, Domain::Source).unwrap();
    let target_eval = generate(&cfg, Split::Eval, Domain::Target).unwrap();

    let probe = LinearProbe::fit(&nuisance_pixels(&train), &labels(&train), cfg.classes);
    let src = probe.accuracy(&nuisance_pixels(&source_eval), &labels(&source_eval));
    let tgt = probe.accuracy(&nuisance_pixels(&target_eval), &labels(&target_eval));
    eprintln!("nuisance probe accuracy: source {src:.3}, target {tgt:.3}");
    assert!(src >= 0.8, "source accuracy {src}");
    let chance = 1.0 / cfg.classes as f64;
    assert!((tgt - chance).abs() < 0.1, "target accuracy {tgt}");
}

#[test]
fn glyph_alone_determines_the_label() {
    // Exact template matching inside the object quadrant on noiseless images.
    let cfg = SynthConfig { noise_std: 0.0, ..Default::default() };
    let data = generate(&cfg, Split::Eval, Domain::Target).unwrap();
    let glyphs: Vec<_> = (0..cfg.classes).map(glyph).collect();
    let (h, w) = (data.height, data.width);
    for s in &data.samples {
        let mut found = Vec::new();
        for (c, g) in glyphs.iter().enumerate() {
            let n = g.len();
            for u in 0..=h - n {
                for v in 0..=w - n {
                    let inside = (0..n).all(|a| (0..n).all(|b| s.mask[(u + a) * w + v + b]));
                    let matches = (0..n).all(|a| {
                        (0..n).all(|b| (s.image[(u + a) * w + v + b] == 1.0) == g[a][b])
                    });
                    if inside && matches {
                        found.push(c);
                    }
                }
            }
        }
        assert_eq!(found, vec![s.label.unwrap()]);
    }
}
