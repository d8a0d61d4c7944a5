//! Dynamic loss weighting: auxiliary losses that dominate the primary
//! classification objective have their weights scaled down so no single term
//! captures the gradient flow.

use serde::{Deserialize, Serialize};

use crate::objectives::LossBundle;

/// Base weights and the dominance threshold ratio.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct BalancerConfig {
    /// Base weight of the global domain loss.
    pub delta: f64,
    /// Base weight of the focal domain loss.
    pub zeta: f64,
    /// Base weight of the orthogonality loss.
    pub gamma: f64,
    /// Base weight of the reconstruction loss.
    pub mu: f64,
    /// Base weight of the label-discriminator loss.
    pub omega: f64,
    /// Loss threshold ratio: weights shrink once `loss > rho * ref`.
    pub rho: f64,
    /// Division guard in the reduction formula.
    pub guard: f64,
}

impl Default for BalancerConfig {
    fn default() -> Self {
        Self {
            delta: 0.5,
            zeta: 0.1,
            gamma: 0.01,
            mu: 0.01,
            omega: 0.01,
            rho: 10.0,
            guard: 1e-18,
        }
    }
}

/// Effective weights applied to the auxiliary losses of one step.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct EffectiveWeights {
    pub delta: f64,
    pub zeta: f64,
    pub gamma: f64,
    pub mu: f64,
    pub omega: f64,
}

/// Reduces `base` when `loss` exceeds `rho` times the reference loss:
/// `base * (rho * ref) / (loss + guard)`, otherwise passes `base` through.
pub fn dynamic_weight(loss: f64, ref_loss: f64, base: f64, rho: f64, guard: f64) -> f64 {
    if loss > rho * ref_loss {
        base * (rho * ref_loss) / (loss + guard)
    } else {
        base
    }
}

/// Applies [`dynamic_weight`] to every auxiliary loss against the
/// classification reference and assembles the weighted total. The
/// classification loss always carries weight 1.
pub fn assemble_total_loss(bundle: &LossBundle, cfg: &BalancerConfig) -> (f64, EffectiveWeights) {
    let r = bundle.l_lc;
    let w = EffectiveWeights {
        delta: dynamic_weight(bundle.l_gd, r, cfg.delta, cfg.rho, cfg.guard),
        zeta: dynamic_weight(bundle.l_fd, r, cfg.zeta, cfg.rho, cfg.guard),
        gamma: dynamic_weight(bundle.l_orth, r, cfg.gamma, cfg.rho, cfg.guard),
        mu: dynamic_weight(bundle.l_recon, r, cfg.mu, cfg.rho, cfg.guard),
        omega: dynamic_weight(bundle.l_ld, r, cfg.omega, cfg.rho, cfg.guard),
    };
    let total = bundle.l_lc
        + w.delta * bundle.l_gd
        + w.zeta * bundle.l_fd
        + w.gamma * bundle.l_orth
        + w.mu * bundle.l_recon
        + w.omega * bundle.l_ld;
    (total, w)
}
