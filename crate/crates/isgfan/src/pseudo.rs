//! Pseudo-label assignment for unlabeled target samples.
//!
//! Classifier logits are converted to probabilities; a sample receives a
//! pseudo-label only when its top probability clears a confidence threshold
//! AND its predictive entropy stays below a coupled bound derived from the
//! maximum entropy attainable at that confidence level.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Thresholds of the confidence/entropy gate.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct PseudoLabelConfig {
    /// Confidence threshold, strictly inside (0, 1).
    pub xi: f64,
    /// Entropy coupling factor, strictly inside (0, 1). The entropy gate is
    /// `H(p) < kappa * H_max(xi, C)`.
    pub kappa: f64,
    /// Stabilizer added inside the entropy logarithm.
    pub epsilon: f64,
}

impl Default for PseudoLabelConfig {
    fn default() -> Self {
        Self {
            xi: 0.90,
            kappa: 0.50,
            epsilon: 1e-12,
        }
    }
}

impl PseudoLabelConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.xi > 0.0 && self.xi < 1.0) {
            return Err(Error::InvalidConfig(format!("xi {} outside (0,1)", self.xi)));
        }
        if !(self.kappa > 0.0 && self.kappa < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "kappa {} outside (0,1)",
                self.kappa
            )));
        }
        Ok(())
    }
}

/// Per-sample gate decision.
#[derive(Debug, Clone, Copy)]
pub struct PseudoLabel {
    pub accepted: bool,
    /// Argmax class (smallest index on exact ties); meaningful when accepted.
    pub class: u16,
    pub confidence: f64,
    pub entropy: f64,
}

/// Gate decisions for one batch of logits.
#[derive(Debug, Clone)]
pub struct PseudoLabelResult {
    pub per_sample: Vec<PseudoLabel>,
    /// Entropy bound `kappa * H_max(xi, C)` used for every sample.
    pub entropy_threshold: f64,
}

impl PseudoLabelResult {
    pub fn accepted_count(&self) -> usize {
        self.per_sample.iter().filter(|p| p.accepted).count()
    }

    /// Indices of accepted samples labeled `class`.
    pub fn accepted_of_class(&self, class: u16) -> Vec<usize> {
        self.per_sample
            .iter()
            .enumerate()
            .filter(|(_, p)| p.accepted && p.class == class)
            .map(|(i, _)| i)
            .collect()
    }
}

/// Row-wise softmax, stabilized by max subtraction.
pub fn softmax_probs(logits: &Array2<f64>) -> Array2<f64> {
    let mut out = Array2::zeros(logits.dim());
    for (mut orow, lrow) in out.rows_mut().into_iter().zip(logits.rows()) {
        let max = lrow.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for (o, &l) in orow.iter_mut().zip(lrow.iter()) {
            *o = (l - max).exp();
            sum += *o;
        }
        orow.mapv_inplace(|v| v / sum);
    }
    out
}

/// Backward map of the softmax: given `dL/dp`, returns `dL/dz`.
pub fn softmax_backward(probs: &Array2<f64>, grad_probs: &Array2<f64>) -> Array2<f64> {
    let mut out = Array2::zeros(probs.dim());
    for i in 0..probs.nrows() {
        let p = probs.row(i);
        let g = grad_probs.row(i);
        let dot: f64 = p.iter().zip(g.iter()).map(|(a, b)| a * b).sum();
        for (j, o) in out.row_mut(i).iter_mut().enumerate() {
            *o = p[j] * (g[j] - dot);
        }
    }
    out
}

/// Predictive entropy `-sum_k p_k log(p_k + eps)` in nats.
pub fn predictive_entropy(p: &[f64], epsilon: f64) -> f64 {
    -p.iter().map(|&v| v * (v + epsilon).ln()).sum::<f64>()
}

/// Maximum entropy of a probability vector whose largest component is `m`,
/// attained when the remaining mass spreads uniformly over `C - 1` classes:
/// `-m log m - (1-m) log((1-m)/(C-1))`.
pub fn entropy_upper_bound(m: f64, num_classes: usize) -> Result<f64> {
    if m <= 0.0 || m > 1.0 {
        return Err(Error::InvalidConfig(format!(
            "top probability {m} outside (0, 1]"
        )));
    }
    if num_classes < 2 {
        return Err(Error::InvalidConfig("need at least 2 classes".into()));
    }
    if m == 1.0 {
        return Ok(0.0);
    }
    let rest = 1.0 - m;
    Ok(-m * m.ln() - rest * (rest / (num_classes - 1) as f64).ln())
}

/// Applies the coupled confidence/entropy gate to a batch of logits.
///
/// A sample is accepted iff `max_k p_k > xi` and
/// `H(p) < kappa * H_max(xi, C)`.
pub fn assign_pseudo_labels(
    logits: &Array2<f64>,
    config: &PseudoLabelConfig,
) -> Result<PseudoLabelResult> {
    config.validate()?;
    let num_classes = logits.ncols();
    let threshold = config.kappa * entropy_upper_bound(config.xi, num_classes)?;
    let probs = softmax_probs(logits);
    let per_sample = probs
        .rows()
        .into_iter()
        .map(|row| {
            let (mut best, mut best_p) = (0usize, f64::NEG_INFINITY);
            for (k, &p) in row.iter().enumerate() {
                if p > best_p {
                    best = k;
                    best_p = p;
                }
            }
            let entropy = predictive_entropy(row.as_slice().expect("contiguous row"), config.epsilon);
            PseudoLabel {
                accepted: best_p > config.xi && entropy < threshold,
                class: best as u16,
                confidence: best_p,
                entropy,
            }
        })
        .collect();
    Ok(PseudoLabelResult {
        per_sample,
        entropy_threshold: threshold,
    })
}
