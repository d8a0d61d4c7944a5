//! Gradient reversal.
//!
//! Identity in the forward direction; during reverse-mode propagation the
//! upstream gradient is multiplied by `-lambda`. Placing this between a
//! feature extractor and a discriminator turns the discriminator's
//! minimization into adversarial maximization for the extractor.

use ndarray::Array2;

/// Reversal strength; the adversarial magnitudes in this crate are governed
/// by the dynamic loss weights, so training uses `lambda = 1`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GrlCoefficient {
    pub lambda: f64,
}

impl Default for GrlCoefficient {
    fn default() -> Self {
        Self { lambda: 1.0 }
    }
}

impl GrlCoefficient {
    pub fn new(lambda: f64) -> Self {
        assert!(lambda >= 0.0, "lambda must be nonnegative");
        Self { lambda }
    }
}

/// Forward pass: exact identity.
pub fn grl_forward(x: &Array2<f64>) -> Array2<f64> {
    x.clone()
}

/// Backward pass: maps an upstream gradient `g` to `-lambda * g`.
pub fn grl_backward(grad: &Array2<f64>, coeff: GrlCoefficient) -> Array2<f64> {
    grad.mapv(|g| -coeff.lambda * g)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn forward_is_identity() {
        let x = array![[1.0, 2.0]];
        assert_eq!(grl_forward(&x), x);
    }

    #[test]
    fn backward_negates_and_scales() {
        let g = array![[0.5, -0.25]];
        let out = grl_backward(&g, GrlCoefficient::new(1.0));
        assert_eq!(out, array![[-0.5, 0.25]]);

        let out = grl_backward(&g, GrlCoefficient::new(0.0));
        assert!(out.iter().all(|&v| v == 0.0));

        let out = grl_backward(&g, GrlCoefficient::new(2.5));
        assert_eq!(out, array![[-1.25, 0.625]]);
    }
}
