//! Loss terms.
//!
//! Each loss has a tape form (`*_on`) used for training and gradient checks,
//! and a value form that evaluates the same expression without recording.
//!
//! The combined objective is
//!
//! ```text
//! total = ce − α·(pdd_ss + pdd_st) − β·mi + γ·adv
//! ```
//!
//! where the PDD terms are computed on logits that passed through gradient
//! reversal, so one descent step on `total` pushes the classifier to enlarge
//! the pair discrepancy and the extractor to shrink it.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var, LOG_CLAMP};
use crate::error::{Error, Result};
use crate::pairing::PairSet;
use crate::tensor::{dims2, Tensor};

/// Probability-vector tolerance for value-level checks.
const SIMPLEX_TOL: f64 = 1e-6;

fn check_simplex(row: usize, p: &[f64]) -> Result<()> {
    let sum: f64 = p.iter().sum();
    if (sum - 1.0).abs() > SIMPLEX_TOL || p.iter().any(|x| !(0.0..=1.0).contains(x)) {
        return Err(Error::InvalidProbabilities { row, sum });
    }
    Ok(())
}

fn clamped_ln(x: f64) -> f64 {
    x.max(LOG_CLAMP).ln()
}

fn kl_to_mid(p: &[f64], m: &[f64]) -> f64 {
    let mut s = 0.0;
    for (pi, mi) in p.iter().zip(m) {
        s += pi * (clamped_ln(*pi) - clamped_ln(*mi));
    }
    s
}

/// Jensen–Shannon divergence with natural log; symmetric and in `[0, ln 2]`.
pub fn js_divergence(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::ShapeMismatch {
            op: "js_divergence",
            left: vec![p.len()],
            right: vec![q.len()],
        });
    }
    check_simplex(0, p)?;
    check_simplex(1, q)?;
    let m: Vec<f64> = p.iter().zip(q).map(|(a, b)| 0.5 * (a + b)).collect();
    Ok(0.5 * kl_to_mid(p, &m) + 0.5 * kl_to_mid(q, &m))
}

/// Per-row JS divergence of two `[n × C]` probability tensors, shape `[n]`.
pub fn js_rows_on(tape: &mut Tape, p: Var, q: Var) -> Result<Var> {
    let pq = tape.add(p, q)?;
    let m = tape.scale(pq, 0.5);
    let lm = tape.log(m);
    let lp = tape.log(p);
    let lq = tape.log(q);
    let dp = tape.sub(lp, lm)?;
    let dq = tape.sub(lq, lm)?;
    let tp = tape.mul(p, dp)?;
    let tq = tape.mul(q, dq)?;
    let kp = tape.sum_axis(tp, 1)?;
    let kq = tape.sum_axis(tq, 1)?;
    let s = tape.add(kp, kq)?;
    Ok(tape.scale(s, 0.5))
}

/// `(pdd_ss, pdd_st)`: `T²` times the mean pair JS divergence of the
/// temperature-softened predictions, intra- and inter-domain. A term with
/// no pairs is zero.
pub fn loss_pdd_on(
    tape: &mut Tape,
    source_logits: Var,
    target_logits: Var,
    pairs: &PairSet,
    temperature: f64,
) -> Result<(Var, Var)> {
    let qs = tape.softmax_rows(source_logits, temperature)?;
    let qt = tape.softmax_rows(target_logits, temperature)?;
    let t2 = temperature * temperature;

    let pdd_ss = if pairs.intra.is_empty() {
        tape.constant(Tensor::scalar(0.0))
    } else {
        let (a, b): (Vec<usize>, Vec<usize>) = pairs.intra.iter().copied().unzip();
        let qa = tape.gather_rows(qs, &a)?;
        let qb = tape.gather_rows(qs, &b)?;
        let js = js_rows_on(tape, qa, qb)?;
        let s = tape.sum(js);
        tape.scale(s, t2 / pairs.m_ss() as f64)
    };
    let pdd_st = if pairs.inter.is_empty() {
        tape.constant(Tensor::scalar(0.0))
    } else {
        let (a, b): (Vec<usize>, Vec<usize>) = pairs.inter.iter().copied().unzip();
        let qa = tape.gather_rows(qs, &a)?;
        let qb = tape.gather_rows(qt, &b)?;
        let js = js_rows_on(tape, qa, qb)?;
        let s = tape.sum(js);
        tape.scale(s, t2 / pairs.m_st() as f64)
    };
    Ok((pdd_ss, pdd_st))
}

fn one_hot(labels: &[usize], classes: usize) -> Result<Tensor> {
    let mut t = Tensor::zeros(&[labels.len(), classes]);
    for (r, &y) in labels.iter().enumerate() {
        if y >= classes {
            return Err(Error::LabelOutOfRange { label: y, classes });
        }
        t.data_mut()[r * classes + y] = 1.0;
    }
    Ok(t)
}

/// Mean cross-entropy of `logits [n × C]` against hard labels, at `T = 1`.
pub fn loss_ce_on(tape: &mut Tape, logits: Var, labels: &[usize]) -> Result<Var> {
    let (n, c) = dims2("loss_ce", tape.shape(logits))?;
    if n != labels.len() {
        return Err(Error::ShapeMismatch {
            op: "loss_ce",
            left: vec![n, c],
            right: vec![labels.len()],
        });
    }
    let onehot = tape.constant(one_hot(labels, c)?);
    let ls = tape.log_softmax_rows(logits)?;
    let picked = tape.mul(ls, onehot)?;
    let s = tape.sum(picked);
    Ok(tape.scale(s, -1.0 / n.max(1) as f64))
}

/// `H(p̂) − mean_j H(p_j)` for target probabilities `[n × C]`, where `p̂`
/// is the batch-mean prediction.
pub fn loss_mi_on(tape: &mut Tape, probs: Var) -> Result<Var> {
    let (n, _) = dims2("loss_mi", tape.shape(probs))?;
    let mean = tape.mean_axis(probs, 0)?;
    let lmean = tape.log(mean);
    let pm = tape.mul(mean, lmean)?;
    let neg_marginal = tape.sum(pm);
    let lp = tape.log(probs);
    let plp = tape.mul(probs, lp)?;
    let s = tape.sum(plp);
    let cond = tape.scale(s, 1.0 / n.max(1) as f64);
    // −Σ p̂ log p̂ + (1/n) Σ ⟨p, log p⟩
    tape.sub(cond, neg_marginal)
}

/// Binary cross-entropy with source labelled 1 and target 0, averaged over
/// all `n_s + n_t` discriminator outputs.
pub fn loss_adv_on(tape: &mut Tape, source_out: Var, target_out: Var) -> Result<Var> {
    let n = tape.value(source_out).len() + tape.value(target_out).len();
    let ls = tape.log(source_out);
    let ls = tape.sum(ls);
    let ones = tape.constant(Tensor::ones(tape.shape(target_out)));
    let one_minus = tape.sub(ones, target_out)?;
    let lt = tape.log(one_minus);
    let lt = tape.sum(lt);
    let s = tape.add(ls, lt)?;
    Ok(tape.scale(s, -1.0 / n.max(1) as f64))
}

/// Value form of [`loss_pdd_on`].
pub fn loss_pdd(
    source_logits: &Tensor,
    target_logits: &Tensor,
    pairs: &PairSet,
    temperature: f64,
) -> Result<(f64, f64)> {
    let mut tape = Tape::new();
    let s = tape.constant(source_logits.clone());
    let t = tape.constant(target_logits.clone());
    let (a, b) = loss_pdd_on(&mut tape, s, t, pairs, temperature)?;
    Ok((tape.value(a).item(), tape.value(b).item()))
}

pub fn loss_ce(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    let mut tape = Tape::new();
    let z = tape.constant(logits.clone());
    let l = loss_ce_on(&mut tape, z, labels)?;
    Ok(tape.value(l).item())
}

pub fn loss_mi(probs: &Tensor) -> Result<f64> {
    let (rows, _) = dims2("loss_mi", probs.shape())?;
    for r in 0..rows {
        check_simplex(r, probs.row(r))?;
    }
    let mut tape = Tape::new();
    let p = tape.constant(probs.clone());
    let l = loss_mi_on(&mut tape, p)?;
    Ok(tape.value(l).item())
}

pub fn loss_adv(source_out: &[f64], target_out: &[f64]) -> f64 {
    let mut tape = Tape::new();
    let s = tape.constant(Tensor::new(vec![source_out.len()], source_out.to_vec()).expect("1-d"));
    let t = tape.constant(Tensor::new(vec![target_out.len()], target_out.to_vec()).expect("1-d"));
    let l = loss_adv_on(&mut tape, s, t).expect("1-d tensors");
    tape.value(l).item()
}

/// Loss-term switches matching the ablation variants.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Ablation {
    pub no_mi: bool,
    pub no_pdd_ss: bool,
    pub no_pdd_st: bool,
    pub no_pdd: bool,
}

impl Ablation {
    /// Source-only supervised training.
    pub fn source_only() -> Self {
        Ablation {
            no_mi: true,
            no_pdd: true,
            ..Default::default()
        }
    }

    pub fn uses_pdd_ss(&self) -> bool {
        !(self.no_pdd || self.no_pdd_ss)
    }

    pub fn uses_pdd_st(&self) -> bool {
        !(self.no_pdd || self.no_pdd_st)
    }

    pub fn uses_mi(&self) -> bool {
        !self.no_mi
    }

    /// Parses a comma-separated flag list such as `no_mi,no_pdd_st`.
    pub fn parse_list(s: &str) -> Result<Self> {
        let mut a = Ablation::default();
        for flag in s.split(',').map(str::trim).filter(|f| !f.is_empty()) {
            match flag {
                "no_mi" => a.no_mi = true,
                "no_pdd_ss" => a.no_pdd_ss = true,
                "no_pdd_st" => a.no_pdd_st = true,
                "no_pdd" => a.no_pdd = true,
                other => return Err(Error::Config(format!("unknown ablation flag {other:?}"))),
            }
        }
        Ok(a)
    }

    /// Short label for reports.
    pub fn label(&self) -> String {
        let mut parts = Vec::new();
        if self.no_pdd {
            parts.push("no_pdd");
        }
        if self.no_pdd_ss {
            parts.push("no_pdd_ss");
        }
        if self.no_pdd_st {
            parts.push("no_pdd_st");
        }
        if self.no_mi {
            parts.push("no_mi");
        }
        if parts.is_empty() {
            "scda".to_string()
        } else {
            parts.join("+")
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TradeOffs {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub ce: f64,
    pub pdd_ss: f64,
    pub pdd_st: f64,
    pub mi: f64,
    pub adv: f64,
    pub total: f64,
}

/// Raw loss components before weighting.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Components<T> {
    pub ce: T,
    pub pdd_ss: T,
    pub pdd_st: T,
    pub mi: T,
    pub adv: Option<T>,
}

/// Combines components into a breakdown; ablated terms are reported as 0.
pub fn total_loss(c: &Components<f64>, w: TradeOffs, ablation: Ablation) -> LossBreakdown {
    let pdd_ss = if ablation.uses_pdd_ss() { c.pdd_ss } else { 0.0 };
    let pdd_st = if ablation.uses_pdd_st() { c.pdd_st } else { 0.0 };
    let mi = if ablation.uses_mi() { c.mi } else { 0.0 };
    let adv = c.adv.unwrap_or(0.0);
    LossBreakdown {
        ce: c.ce,
        pdd_ss,
        pdd_st,
        mi,
        adv,
        total: c.ce - w.alpha * (pdd_ss + pdd_st) - w.beta * mi + w.gamma * adv,
    }
}

/// Tape form of [`total_loss`]; ablated terms are left off the graph.
pub fn total_on(
    tape: &mut Tape,
    c: &Components<Var>,
    w: TradeOffs,
    ablation: Ablation,
) -> Result<Var> {
    let mut total = c.ce;
    let mut pdd: Option<Var> = None;
    for (on, term) in [(ablation.uses_pdd_ss(), c.pdd_ss), (ablation.uses_pdd_st(), c.pdd_st)] {
        if on {
            pdd = Some(match pdd {
                Some(p) => tape.add(p, term)?,
                None => term,
            });
        }
    }
    if let Some(p) = pdd {
        let scaled = tape.scale(p, w.alpha);
        total = tape.sub(total, scaled)?;
    }
    if ablation.uses_mi() {
        let scaled = tape.scale(c.mi, w.beta);
        total = tape.sub(total, scaled)?;
    }
    if let Some(adv) = c.adv {
        let scaled = tape.scale(adv, w.gamma);
        total = tape.add(total, scaled)?;
    }
    Ok(total)
}
