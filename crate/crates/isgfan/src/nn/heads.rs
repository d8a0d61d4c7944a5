//! Classifier and discriminator heads.
//!
//! The label classifier, label discriminator, and global domain classifier
//! share one MLP architecture and differ only in output dimension. Subdomain
//! classifiers are a single affine map.

use ndarray::Array2;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::layers::{gelu_flat, gelu_flat_backward, Dense, DenseCache};
use super::params::ParamFn;
use crate::error::{Error, Result};

/// MLP head layout.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct HeadConfig {
    pub in_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub out_dim: usize,
}

impl HeadConfig {
    /// Default monotone-compression layout `in -> in/2 -> in/4 -> out`.
    pub fn compressing(in_dim: usize, out_dim: usize) -> Self {
        Self {
            in_dim,
            hidden_dims: vec![(in_dim / 2).max(1), (in_dim / 4).max(1)],
            out_dim,
        }
    }
}

/// MLP with GELU between affine layers; outputs raw logits.
pub struct MlpHead {
    pub config: HeadConfig,
    layers: Vec<Dense>,
}

pub struct MlpTrace {
    caches: Vec<DenseCache>,
    pre_activations: Vec<Array2<f64>>,
}

impl MlpHead {
    pub fn new(config: HeadConfig, rng: &mut ChaCha8Rng) -> Self {
        let mut dims = vec![config.in_dim];
        dims.extend(&config.hidden_dims);
        dims.push(config.out_dim);
        let layers = dims
            .windows(2)
            .map(|w| Dense::new(rng, w[0], w[1]))
            .collect();
        Self { config, layers }
    }

    pub fn forward(&self, x: &Array2<f64>) -> Result<(Array2<f64>, MlpTrace)> {
        if x.ncols() != self.config.in_dim {
            return Err(Error::ShapeMismatch(format!(
                "head expects {} features, got {}",
                self.config.in_dim,
                x.ncols()
            )));
        }
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut pre_activations = Vec::new();
        let mut cur = x.clone();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let (z, cache) = layer.forward(&cur);
            caches.push(cache);
            if i < last {
                pre_activations.push(z.clone());
                cur = gelu_flat(&z);
            } else {
                cur = z;
            }
        }
        Ok((
            cur,
            MlpTrace {
                caches,
                pre_activations,
            },
        ))
    }

    pub fn backward(&mut self, trace: &MlpTrace, grad_logits: &Array2<f64>) -> Array2<f64> {
        let last = self.layers.len() - 1;
        let mut grad = grad_logits.clone();
        for i in (0..self.layers.len()).rev() {
            if i < last {
                grad = gelu_flat_backward(&trace.pre_activations[i], &grad);
            }
            grad = self.layers[i].backward(&trace.caches[i], &grad);
        }
        grad
    }

    pub fn visit(&mut self, prefix: &str, f: &mut ParamFn<'_>) {
        for (i, layer) in self.layers.iter_mut().enumerate() {
            layer.visit(&format!("{prefix}.linear{i}"), f);
        }
    }
}

/// Single-layer subdomain classifier producing one logit per sample.
pub struct SdcHead {
    pub linear: Dense,
}

impl SdcHead {
    pub fn new(in_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            linear: Dense::new(rng, in_dim, 1),
        }
    }

    pub fn forward(&self, x: &Array2<f64>) -> Result<(Array2<f64>, DenseCache)> {
        if x.ncols() != self.linear.in_dim() {
            return Err(Error::ShapeMismatch(format!(
                "sdc expects {} features, got {}",
                self.linear.in_dim(),
                x.ncols()
            )));
        }
        Ok(self.linear.forward(x))
    }

    pub fn backward(&mut self, cache: &DenseCache, grad: &Array2<f64>) -> Array2<f64> {
        self.linear.backward(cache, grad)
    }

    pub fn visit(&mut self, prefix: &str, f: &mut ParamFn<'_>) {
        self.linear.visit(prefix, f);
    }
}
