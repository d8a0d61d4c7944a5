//! Subdomain attention: per-class weights for the focal domain-adversarial
//! loss.
//!
//! Per-class discriminator losses are smoothed across batches with an
//! exponential moving average, compared against the random-guess anchor
//! `ln 2`, amplified through a temperature softmax over the under-aligned
//! classes, blended with a uniform prior, scaled by batch sample counts, and
//! normalized to a weight vector. Classes absent from a batch keep a frozen
//! EMA entry.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Hyperparameters of the attention mechanism.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct AttentionConfig {
    /// Uniform-prior smoothing coefficient.
    pub alpha: f64,
    /// Softmax temperature over alignment-difficulty scores.
    pub tau: f64,
    /// EMA momentum (weight kept on history).
    pub momentum: f64,
    /// Sample-count sensitivity exponent; negative favors rare classes.
    pub beta: f64,
    /// Guard added to counts and to the normalizing sum.
    pub eps: f64,
}

impl Default for AttentionConfig {
    fn default() -> Self {
        Self {
            alpha: 0.05,
            tau: 0.02,
            momentum: 0.3,
            beta: -0.1,
            eps: 1e-8,
        }
    }
}

/// Cross-batch state: EMA loss per class plus the anchor value.
#[derive(Debug, Clone)]
pub struct AttentionState {
    pub config: AttentionConfig,
    /// EMA of per-class losses, initialized to all-ones.
    pub l_ema: Vec<f64>,
    /// Binary cross-entropy of a random-guess discriminator.
    pub theta: f64,
}

/// The anchor: binary cross-entropy of the constant-0.5 predictor.
pub fn anchor_value() -> f64 {
    std::f64::consts::LN_2
}

impl AttentionState {
    pub fn new(num_classes: usize, config: AttentionConfig) -> Self {
        Self {
            config,
            l_ema: vec![1.0; num_classes],
            theta: anchor_value(),
        }
    }

    pub fn num_classes(&self) -> usize {
        self.l_ema.len()
    }

    /// Computes attention weights for the current batch and updates the EMA.
    ///
    /// `per_class_loss[c]` is the subdomain loss of class `c` in this batch
    /// (ignored when `per_class_count[c] == 0`); `per_class_count[c]` is the
    /// number of samples routed to that class's discriminator.
    ///
    /// Degenerate batches with no counted class return uniform weights and
    /// leave the state untouched.
    pub fn compute_weights_and_update(
        &mut self,
        per_class_loss: &[f64],
        per_class_count: &[usize],
    ) -> Result<Vec<f64>> {
        let c = self.num_classes();
        if per_class_loss.len() != c || per_class_count.len() != c {
            return Err(Error::ShapeMismatch(format!(
                "expected {c} classes, got {} losses / {} counts",
                per_class_loss.len(),
                per_class_count.len()
            )));
        }
        if per_class_loss.iter().any(|l| !l.is_finite()) {
            return Err(Error::NonFinite("per-class subdomain loss".into()));
        }
        if per_class_count.iter().all(|&n| n == 0) {
            return Ok(vec![1.0 / c as f64; c]);
        }
        let cfg = self.config;
        let m = cfg.momentum;

        // Blend current losses with history; empty classes fall back to EMA.
        let blended: Vec<f64> = (0..c)
            .map(|i| {
                if per_class_count[i] > 0 {
                    (1.0 - m) * per_class_loss[i] + m * self.l_ema[i]
                } else {
                    self.l_ema[i]
                }
            })
            .collect();

        // Alignment difficulty: shortfall of the blended loss below the
        // random-guess anchor.
        let difficulty: Vec<f64> = blended.iter().map(|&l| (self.theta - l).max(0.0)).collect();
        let under: Vec<usize> = (0..c).filter(|&i| difficulty[i] > 0.0).collect();

        let uniform = 1.0 / c as f64;
        let mut weights = vec![cfg.alpha * uniform; c];
        if !under.is_empty() {
            let scores: Vec<f64> = under.iter().map(|&i| difficulty[i] / cfg.tau).collect();
            let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = scores.iter().map(|&s| (s - max).exp()).collect();
            let sum: f64 = exps.iter().sum();
            for (&i, e) in under.iter().zip(&exps) {
                weights[i] = (1.0 - cfg.alpha) * (e / sum) + cfg.alpha * uniform;
            }
        }

        // Sample-size scaling applies only to classes seen in this batch.
        for i in 0..c {
            if per_class_count[i] > 0 {
                weights[i] *= (per_class_count[i] as f64 + cfg.eps).powf(cfg.beta);
            }
        }

        let total: f64 = weights.iter().sum();
        for w in &mut weights {
            *w /= total + cfg.eps;
        }

        // EMA update; classes without samples stay frozen.
        for i in 0..c {
            if per_class_count[i] > 0 {
                self.l_ema[i] = m * self.l_ema[i] + (1.0 - m) * per_class_loss[i];
            }
        }
        Ok(weights)
    }
}
