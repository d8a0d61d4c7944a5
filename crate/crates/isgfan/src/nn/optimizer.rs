//! Adaptive-moment optimizer with decoupled weight decay.

use std::collections::BTreeMap;

use super::model::{IsgfanModel, ParamGroup};
use super::params::ParamEntry;

struct Slot {
    m: Vec<f64>,
    v: Vec<f64>,
}

/// AdamW. Moment buffers are keyed by parameter name so the update is
/// independent of visit order.
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    slots: BTreeMap<String, Slot>,
}

impl AdamW {
    pub fn new(weight_decay: f64) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            slots: BTreeMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One update over every present parameter using the supplied learning
    /// rate. Gradients are left untouched; callers zero them per step.
    pub fn step(&mut self, model: &mut IsgfanModel, lr: f64) {
        self.step_scaled(model, lr, &[]);
    }

    /// Like [`Self::step`], with per-group multipliers on the shared rate.
    pub fn step_scaled(&mut self, model: &mut IsgfanModel, lr: f64, scales: &[(ParamGroup, f64)]) {
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2, eps, wd) = (self.beta1, self.beta2, self.eps, self.weight_decay);
        let bc1 = 1.0 - b1.powi(t);
        let bc2 = 1.0 - b2.powi(t);
        for group in model.present_groups() {
            let group_lr = lr
                * scales
                    .iter()
                    .find(|(g, _)| *g == group)
                    .map_or(1.0, |(_, s)| *s);
            let slots = &mut self.slots;
            model.visit_group(group, &mut |entry: ParamEntry<'_>| {
                let n = entry.value.len();
                let slot = slots.entry(entry.name.clone()).or_insert_with(|| Slot {
                    m: vec![0.0; n],
                    v: vec![0.0; n],
                });
                for i in 0..n {
                    let g = entry.grad[i];
                    slot.m[i] = b1 * slot.m[i] + (1.0 - b1) * g;
                    slot.v[i] = b2 * slot.v[i] + (1.0 - b2) * g * g;
                    let m_hat = slot.m[i] / bc1;
                    let v_hat = slot.v[i] / bc2;
                    entry.value[i] -= group_lr * (m_hat / (v_hat.sqrt() + eps) + wd * entry.value[i]);
                }
            });
        }
    }
}
