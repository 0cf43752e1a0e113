//! Within-batch sample pairs for prediction alignment.
//!
//! Intra-domain pairs join two source samples with the same label. Inter-
//! domain pairs join a source sample with a target sample whose pseudo-label
//! matches and whose confidence clears the threshold. Target–target pairs
//! are never formed.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::tensor::{dims2, Tensor};

/// Confidence threshold used for inter-domain pairing by default.
pub const DEFAULT_EPSILON: f64 = 0.8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PseudoLabel {
    pub label: usize,
    pub confidence: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PairSet {
    /// `(i, k)` into the source batch, `i < k`.
    pub intra: Vec<(usize, usize)>,
    /// `(i, j)`: source index, target index.
    pub inter: Vec<(usize, usize)>,
}

impl PairSet {
    pub fn m_ss(&self) -> usize {
        self.intra.len()
    }

    pub fn m_st(&self) -> usize {
        self.inter.len()
    }

    pub fn is_empty(&self) -> bool {
        self.intra.is_empty() && self.inter.is_empty()
    }
}

/// Row-wise argmax and max of target probabilities; ties go to the lowest
/// class index.
pub fn pseudo_labels(target_probs: &Tensor) -> Result<Vec<PseudoLabel>> {
    let (rows, cols) = dims2("pseudo_labels", target_probs.shape())?;
    (0..rows)
        .map(|r| {
            let row = target_probs.row(r);
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > 1e-6 || row.iter().any(|p| !(0.0..=1.0).contains(p)) {
                return Err(Error::InvalidProbabilities { row: r, sum });
            }
            let mut best = 0;
            for c in 1..cols {
                if row[c] > row[best] {
                    best = c;
                }
            }
            Ok(PseudoLabel {
                label: best,
                confidence: row[best],
            })
        })
        .collect()
}

pub fn build_pairs(source_labels: &[usize], pseudo: &[PseudoLabel], epsilon: f64) -> PairSet {
    let mut intra = Vec::new();
    for (i, yi) in source_labels.iter().enumerate() {
        for (k, yk) in source_labels.iter().enumerate().skip(i + 1) {
            if yi == yk {
                intra.push((i, k));
            }
        }
    }
    let mut inter = Vec::new();
    for (i, &yi) in source_labels.iter().enumerate() {
        for (j, pl) in pseudo.iter().enumerate() {
            if pl.label == yi && pl.confidence >= epsilon {
                inter.push((i, j));
            }
        }
    }
    PairSet { intra, inter }
}
