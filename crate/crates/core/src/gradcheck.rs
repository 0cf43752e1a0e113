//! Finite-difference verification of every loss gradient.
//!
//! A tiny model (4×4 images, 3 features) is evaluated at a fixed point.
//! Pairs are frozen at that point so the finite differences see a smooth
//! function. Terms routed through gradient reversal (`pdd_ss`, `pdd_st`,
//! `adv`) contribute `−λ·∂L/∂θ` to extractor parameters and the plain
//! derivative everywhere else; the expected gradient is assembled from
//! central differences accordingly.

use serde::Serialize;

use crate::autodiff::Tape;
use crate::error::Result;
use crate::model::{init_params, ArchConfig, ParamGroup, ScdaModel};
use crate::objectives::{Ablation, Components, TradeOffs};
use crate::pairing::PairSet;
use crate::rng::{derive_seed, SplitMix64};
use crate::tensor::Tensor;
use crate::trainer::{build_objective, StepBatch, TrainConfig};

pub const FD_STEP: f64 = 1e-4;
pub const TERM_TOLERANCE: f64 = 1e-5;
pub const TOTAL_TOLERANCE: f64 = 1e-4;

const TERMS: [&str; 6] = ["ce", "pdd_ss", "pdd_st", "mi", "adv", "total"];

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LossCheck {
    pub loss: String,
    pub max_rel_error: f64,
    /// Parameter tensor with the largest error.
    pub worst_param: String,
    pub tolerance: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradcheckReport {
    pub seed: u64,
    pub m_ss: usize,
    pub m_st: usize,
    pub checks: Vec<LossCheck>,
    pub passed: bool,
}

/// Knobs for [`gradcheck`].
#[derive(Debug, Clone, Copy, Default)]
pub struct GradcheckOptions {
    /// Flip the sign of gradient reversal in the analytic pass.
    pub inject_grl_fault: bool,
}

struct Problem {
    model: ScdaModel,
    source_images: Tensor,
    source_labels: Vec<usize>,
    target_images: Tensor,
    config: TrainConfig,
    weights: TradeOffs,
}

fn problem(seed: u64) -> Problem {
    let arch = ArchConfig {
        in_channels: 1,
        hidden: 3,
        features: 3,
        classes: 3,
        local_mixing: true,
        discriminator: true,
        discriminator_hidden: 3,
    };
    let mut model = init_params(seed, &arch);
    let mut rng = SplitMix64::new(derive_seed(seed, &[0x4743]));
    // Nonzero biases keep every ReLU input away from its kink.
    for s in &mut model.extractor.stages {
        for b in s.bias.data_mut() {
            *b = rng.uniform_range(-0.5, 0.5);
        }
    }
    let mut image = |n: usize| {
        let data = (0..n * 16).map(|_| rng.uniform_range(-1.0, 1.0)).collect();
        Tensor::new(vec![n, 1, 4, 4], data).expect("4×4 batch")
    };
    let source_images = image(4);
    let target_images = image(4);
    let config = TrainConfig {
        temperature: 10.0,
        epsilon: 0.0,
        gamma: 0.5,
        grl_lambda: 0.7,
        arch,
        ..TrainConfig::default()
    };
    Problem {
        model,
        source_images,
        source_labels: vec![0, 1, 2, 0],
        target_images,
        config,
        weights: TradeOffs {
            alpha: 0.9,
            beta: 0.3,
            gamma: 0.5,
        },
    }
}

fn batch(p: &Problem) -> StepBatch<'_> {
    StepBatch {
        source_images: &p.source_images,
        source_labels: &p.source_labels,
        target_images: &p.target_images,
    }
}

fn values(p: &Problem, model: &ScdaModel, pairs: &PairSet) -> Result<Components<f64>> {
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape);
    let obj = build_objective(&mut tape, &bound, batch(p), &p.config, p.weights, Some(pairs))?;
    let v = |x| tape.value(x).item();
    Ok(Components {
        ce: v(obj.components.ce),
        pdd_ss: v(obj.components.pdd_ss),
        pdd_st: v(obj.components.pdd_st),
        mi: v(obj.components.mi),
        adv: obj.components.adv.map(v),
    })
}

/// `[ce, pdd_ss, pdd_st, mi, adv]`
fn as_array(c: &Components<f64>) -> [f64; 5] {
    [c.ce, c.pdd_ss, c.pdd_st, c.mi, c.adv.unwrap_or(0.0)]
}

const REVERSED: [bool; 5] = [false, true, true, false, true];

fn rel_error(analytic: &[f64], expected: &[f64]) -> f64 {
    let (mut diff, mut a, mut e) = (0.0f64, 0.0f64, 0.0f64);
    for (x, y) in analytic.iter().zip(expected) {
        diff += (x - y) * (x - y);
        a += x * x;
        e += y * y;
    }
    let denom = a.sqrt().max(e.sqrt());
    if denom < 1e-10 {
        diff.sqrt()
    } else {
        diff.sqrt() / denom
    }
}

/// Runs the check for `seed`.
pub fn gradcheck(seed: u64, options: GradcheckOptions) -> Result<GradcheckReport> {
    let p = problem(seed);
    let lambda = p.config.grl_lambda;

    // Analytic gradients, one backward per loss.
    let mut tape = Tape::new();
    if options.inject_grl_fault {
        tape.inject_grl_sign_fault();
    }
    let bound = p.model.bind(&mut tape);
    let obj = build_objective(&mut tape, &bound, batch(&p), &p.config, p.weights, None)?;
    let pairs = obj.pairs.clone();
    let c = &obj.components;
    let roots = [
        c.ce,
        c.pdd_ss,
        c.pdd_st,
        c.mi,
        c.adv.expect("discriminator enabled"),
        obj.total,
    ];
    let named = p.model.named_params();
    let mut analytic: Vec<Vec<Vec<f64>>> = Vec::new();
    for root in roots {
        let g = tape.backward(root)?;
        analytic.push(
            bound
                .vars
                .iter()
                .zip(&named)
                .map(|(v, (_, _, t))| match g.get(*v) {
                    Some(gt) => gt.data().to_vec(),
                    None => vec![0.0; t.len()],
                })
                .collect(),
        );
    }

    // Fourth-order central differences of each component, per parameter entry.
    let mut fd: Vec<Vec<[f64; 5]>> = Vec::new();
    let mut probe = p.model.clone();
    for (k, (_, _, t)) in named.iter().enumerate() {
        let mut per = Vec::with_capacity(t.len());
        for i in 0..t.len() {
            let orig = probe.params_mut()[k].data()[i];
            let mut at = |offset: f64| -> Result<[f64; 5]> {
                probe.params_mut()[k].data_mut()[i] = orig + offset;
                Ok(as_array(&values(&p, &probe, &pairs)?))
            };
            let (m2, m1) = (at(-2.0 * FD_STEP)?, at(-FD_STEP)?);
            let (p1, p2) = (at(FD_STEP)?, at(2.0 * FD_STEP)?);
            probe.params_mut()[k].data_mut()[i] = orig;
            let mut d = [0.0; 5];
            for j in 0..5 {
                d[j] = (m2[j] - 8.0 * m1[j] + 8.0 * p1[j] - p2[j]) / (12.0 * FD_STEP);
            }
            per.push(d);
        }
        fd.push(per);
    }

    let w = p.weights;
    let total_coef = [1.0, -w.alpha, -w.alpha, -w.beta, w.gamma];
    let ablation = Ablation::default();
    debug_assert!(ablation.uses_mi() && ablation.uses_pdd_ss() && ablation.uses_pdd_st());

    let mut checks = Vec::new();
    for (li, name) in TERMS.iter().enumerate() {
        let tol = if li == 5 { TOTAL_TOLERANCE } else { TERM_TOLERANCE };
        let mut worst = (0.0f64, String::new());
        for (k, (pname, group, _)) in named.iter().enumerate() {
            let expected: Vec<f64> = fd[k]
                .iter()
                .map(|d| {
                    let reversal = |j: usize| {
                        if REVERSED[j] && *group == ParamGroup::Extractor {
                            -lambda
                        } else {
                            1.0
                        }
                    };
                    if li < 5 {
                        reversal(li) * d[li]
                    } else {
                        (0..5).map(|j| total_coef[j] * reversal(j) * d[j]).sum()
                    }
                })
                .collect();
            let err = rel_error(&analytic[li][k], &expected);
            if err > worst.0 || worst.1.is_empty() {
                worst = (err, pname.clone());
            }
        }
        checks.push(LossCheck {
            loss: name.to_string(),
            max_rel_error: worst.0,
            worst_param: worst.1,
            tolerance: tol,
            passed: worst.0 < tol,
        });
    }
    let passed = checks.iter().all(|c| c.passed);
    Ok(GradcheckReport {
        seed,
        m_ss: pairs.m_ss(),
        m_st: pairs.m_st(),
        checks,
        passed,
    })
}

impl GradcheckReport {
    /// One line per loss: `name max_rel_error tolerance PASS|FAIL`.
    pub fn to_text(&self) -> String {
        let mut out = format!("seed {} (m_ss={}, m_st={})\n", self.seed, self.m_ss, self.m_st);
        for c in &self.checks {
            out.push_str(&format!(
                "{:<7} max_rel_error={:.3e} tol={:.0e} worst={} {}\n",
                c.loss,
                c.max_rel_error,
                c.tolerance,
                c.worst_param,
                if c.passed { "PASS" } else { "FAIL" }
            ));
        }
        out
    }
}
