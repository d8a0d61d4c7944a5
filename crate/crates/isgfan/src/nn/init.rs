//! Weight initialization: truncated normal for weights, zeros for biases.

use ndarray::{Array1, Array2, Array3};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

/// Standard deviation used for all weight tensors.
pub const WEIGHT_STD: f64 = 0.02;

/// Draws from N(0, std^2) truncated to two standard deviations.
pub fn truncated_normal(rng: &mut ChaCha8Rng, std: f64) -> f64 {
    let normal = Normal::new(0.0, std).expect("valid std");
    loop {
        let v = normal.sample(rng);
        if v.abs() <= 2.0 * std {
            return v;
        }
    }
}

pub fn weights_1d(rng: &mut ChaCha8Rng, n: usize) -> Array1<f64> {
    Array1::from_iter((0..n).map(|_| truncated_normal(rng, WEIGHT_STD)))
}

pub fn weights_2d(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    let data: Vec<f64> = (0..rows * cols)
        .map(|_| truncated_normal(rng, WEIGHT_STD))
        .collect();
    Array2::from_shape_vec((rows, cols), data).expect("shape matches data")
}

pub fn weights_3d(rng: &mut ChaCha8Rng, d0: usize, d1: usize, d2: usize) -> Array3<f64> {
    let data: Vec<f64> = (0..d0 * d1 * d2)
        .map(|_| truncated_normal(rng, WEIGHT_STD))
        .collect();
    Array3::from_shape_vec((d0, d1, d2), data).expect("shape matches data")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed;

    #[test]
    fn truncation_and_determinism() {
        let mut a = seed::rng(3);
        let mut b = seed::rng(3);
        for _ in 0..1000 {
            let x = truncated_normal(&mut a, WEIGHT_STD);
            let y = truncated_normal(&mut b, WEIGHT_STD);
            assert_eq!(x, y);
            assert!(x.abs() <= 2.0 * WEIGHT_STD);
        }
    }
}
