//! Shared test support: brute-force loss oracles (independent of the library
//! implementations) and finite-difference helpers.

#![allow(dead_code)]

use ndarray::{Array1, Array2, Array3};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;

/// Central difference of a scalar function of one slot.
pub fn central_diff(mut eval: impl FnMut(f64) -> f64, orig: f64) -> f64 {
    (eval(orig + FD_STEP) - eval(orig - FD_STEP)) / (2.0 * FD_STEP)
}

/// Relative agreement between an analytic and a numeric derivative.
pub fn grads_agree(analytic: f64, numeric: f64, tol: f64) -> bool {
    let scale = analytic.abs().max(numeric.abs());
    if scale < 1e-7 {
        return (analytic - numeric).abs() < 1e-7;
    }
    (analytic - numeric).abs() / scale < tol
}

pub fn assert_grad(analytic: f64, numeric: f64, tol: f64, what: &str) {
    assert!(
        grads_agree(analytic, numeric, tol),
        "{what}: analytic {analytic} vs numeric {numeric}"
    );
}

pub fn rand_array1(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Array1<f64> {
    Array1::from_iter((0..n).map(|_| scale * (2.0 * rng.random::<f64>() - 1.0)))
}

pub fn rand_array2(rng: &mut ChaCha8Rng, r: usize, c: usize, scale: f64) -> Array2<f64> {
    Array2::from_shape_fn((r, c), |_| scale * (2.0 * rng.random::<f64>() - 1.0))
}

pub fn rand_array3(rng: &mut ChaCha8Rng, b: usize, c: usize, l: usize, scale: f64) -> Array3<f64> {
    Array3::from_shape_fn((b, c, l), |_| scale * (2.0 * rng.random::<f64>() - 1.0))
}

/// Random point on the probability simplex (Dirichlet(1,..,1) draw).
pub fn rand_simplex(rng: &mut ChaCha8Rng, c: usize) -> Vec<f64> {
    let e: Vec<f64> = (0..c)
        .map(|_| -(rng.random::<f64>().max(1e-12)).ln())
        .collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

// ── Brute-force oracles ────────────────────────────────────────────────────

/// Elementwise cross-entropy: `-(1/N) Σ_i Σ_j y_ij ln(p_ij + 1e-12)`.
pub fn oracle_cross_entropy(probs: &Array2<f64>, onehot: &Array2<f64>) -> f64 {
    let (n, c) = probs.dim();
    let mut total = 0.0;
    for i in 0..n {
        for j in 0..c {
            total -= onehot[(i, j)] * (probs[(i, j)] + 1e-12).ln();
        }
    }
    total / n as f64
}

fn oracle_frobenius_product(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    // ||A B^T||_F by explicit loops.
    let (ra, cols) = a.dim();
    let rb = b.dim().0;
    let mut total = 0.0;
    for i in 0..ra {
        for j in 0..rb {
            let mut dot = 0.0;
            for k in 0..cols {
                dot += a[(i, k)] * b[(j, k)];
            }
            total += dot * dot;
        }
    }
    total.sqrt()
}

fn oracle_gram_minus_identity(a: &Array2<f64>) -> f64 {
    let (r, cols) = a.dim();
    let mut total = 0.0;
    for i in 0..r {
        for j in 0..r {
            let mut dot = 0.0;
            for k in 0..cols {
                dot += a[(i, k)] * a[(j, k)];
            }
            let target = if i == j { 1.0 } else { 0.0 };
            total += (dot - target) * (dot - target);
        }
    }
    total.sqrt()
}

/// `(l_co, l_so, l_orth)` computed with explicit loops.
pub fn oracle_orthogonality(f_fr: &Array2<f64>, f_fi: &Array2<f64>) -> (f64, f64, f64) {
    let l_co = oracle_frobenius_product(f_fr, f_fi);
    let l_so = 0.5 * (oracle_gram_minus_identity(f_fr) + oracle_gram_minus_identity(f_fi));
    (l_co, l_so, l_co + l_so)
}

/// Per-sample mean squared error summed over the batch.
pub fn oracle_reconstruction(x: &Array2<f64>, x_hat: &Array2<f64>) -> f64 {
    let (n, l) = x.dim();
    let mut total = 0.0;
    for i in 0..n {
        let mut sq = 0.0;
        for t in 0..l {
            let d = x[(i, t)] - x_hat[(i, t)];
            sq += d * d;
        }
        total += sq / l as f64;
    }
    total
}

/// Domain binary cross-entropy with clamped probabilities.
pub fn oracle_domain_bce(d_s: &[f64], d_t: &[f64]) -> f64 {
    let n = (d_s.len() + d_t.len()) as f64;
    let clamp = |p: f64| p.clamp(1e-12, 1.0 - 1e-12);
    let mut total = 0.0;
    for &d in d_s {
        total -= (1.0 - clamp(d)).ln();
    }
    for &d in d_t {
        total -= clamp(d).ln();
    }
    total / n
}

/// Normalizes rows to unit Euclidean norm (explicit loops).
pub fn oracle_normalize_rows(m: &Array2<f64>) -> Array2<f64> {
    let mut out = m.clone();
    for mut row in out.rows_mut() {
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            row.mapv_inplace(|v| v / norm);
        }
    }
    out
}

/// One-hot rows for integer labels.
pub fn oracle_one_hot(labels: &[u16], c: usize) -> Array2<f64> {
    let mut out = Array2::zeros((labels.len(), c));
    for (i, &l) in labels.iter().enumerate() {
        out[(i, usize::from(l))] = 1.0;
    }
    out
}
