//! Loss functions: multiclass cross-entropy, cross/self orthogonality,
//! reconstruction MSE, domain binary cross-entropy, and the attention-weighted
//! focal sum. Each loss ships with its analytic gradient so the trainer can
//! run exact reverse-mode updates.

use ndarray::{Array1, Array2};

use crate::error::{Error, Result};

/// Additive stabilizer used inside every logarithm.
pub const LOG_EPS: f64 = 1e-12;

/// Feature matrix oriented channels-by-samples; rows are channels, the batch
/// is flattened into columns. `normalized` marks rows as unit Euclidean norm.
#[derive(Debug, Clone)]
pub struct FeatureMatrix {
    pub values: Array2<f64>,
    pub normalized: bool,
}

impl FeatureMatrix {
    /// Builds a channels-by-samples matrix from pooled per-sample feature
    /// vectors shaped `(batch, channels)`.
    pub fn from_batch(features: &Array2<f64>) -> Self {
        Self {
            values: features.t().to_owned(),
            normalized: false,
        }
    }

    /// Builds a channels-by-samples matrix from a feature map shaped
    /// `(batch, channels, length)`; batch and length flatten into columns,
    /// so each row collects one channel's response over the whole batch.
    pub fn from_map(map: &ndarray::Array3<f64>) -> Self {
        let (b, c, l) = map.dim();
        let mut values = Array2::zeros((c, b * l));
        for bi in 0..b {
            for ci in 0..c {
                for t in 0..l {
                    values[(ci, bi * l + t)] = map[(bi, ci, t)];
                }
            }
        }
        Self {
            values,
            normalized: false,
        }
    }

    /// L2-normalizes every row. Rows with zero norm are left untouched (they
    /// fail validation downstream rather than producing NaNs).
    pub fn normalize_rows(&self) -> (FeatureMatrix, Array1<f64>) {
        let mut out = self.values.clone();
        let mut norms = Array1::zeros(self.values.nrows());
        for (i, mut row) in out.rows_mut().into_iter().enumerate() {
            let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            norms[i] = norm;
            if norm > 0.0 {
                row.mapv_inplace(|x| x / norm);
            }
        }
        (
            FeatureMatrix {
                values: out,
                normalized: true,
            },
            norms,
        )
    }

    fn check_normalized(&self) -> Result<()> {
        for (i, row) in self.values.rows().into_iter().enumerate() {
            let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            if (norm - 1.0).abs() > 1e-6 {
                return Err(Error::UnnormalizedRows { row: i, norm });
            }
        }
        Ok(())
    }
}

/// Scatters a channels-by-samples gradient back onto the feature map layout
/// that [`FeatureMatrix::from_map`] flattened.
pub fn map_grad_from_matrix(grad: &Array2<f64>, dims: (usize, usize, usize)) -> ndarray::Array3<f64> {
    let (b, c, l) = dims;
    let mut out = ndarray::Array3::zeros((b, c, l));
    for bi in 0..b {
        for ci in 0..c {
            for t in 0..l {
                out[(bi, ci, t)] = grad[(ci, bi * l + t)];
            }
        }
    }
    out
}

/// Backward map of [`FeatureMatrix::normalize_rows`]: given the gradient with
/// respect to the normalized rows, returns the gradient with respect to the
/// raw rows.
pub fn normalize_rows_backward(
    raw: &Array2<f64>,
    norms: &Array1<f64>,
    grad_normalized: &Array2<f64>,
) -> Array2<f64> {
    let mut grad = Array2::zeros(raw.dim());
    for i in 0..raw.nrows() {
        let n = norms[i];
        if n <= 0.0 {
            continue;
        }
        let x = raw.row(i);
        let g = grad_normalized.row(i);
        let y: Vec<f64> = x.iter().map(|v| v / n).collect();
        let dot: f64 = y.iter().zip(g.iter()).map(|(a, b)| a * b).sum();
        for (j, out) in grad.row_mut(i).iter_mut().enumerate() {
            *out = (g[j] - y[j] * dot) / n;
        }
    }
    grad
}

/// The six named loss scalars of one training step.
#[derive(Debug, Clone, Copy, Default, serde::Serialize)]
pub struct LossBundle {
    pub l_lc: f64,
    pub l_gd: f64,
    pub l_fd: f64,
    pub l_orth: f64,
    pub l_recon: f64,
    pub l_ld: f64,
}

impl LossBundle {
    pub fn is_finite(&self) -> bool {
        [
            self.l_lc, self.l_gd, self.l_fd, self.l_orth, self.l_recon, self.l_ld,
        ]
        .iter()
        .all(|v| v.is_finite())
    }
}

/// Mean multiclass cross-entropy `-(1/N) sum_i sum_j y_ij log(p_ij + eps)`.
///
/// `probs` rows must lie on the simplex; `onehot` rows must be valid one-hot.
pub fn cross_entropy(probs: &Array2<f64>, onehot: &Array2<f64>) -> Result<f64> {
    let n = probs.nrows();
    if n == 0 {
        return Err(Error::EmptyBatch);
    }
    if probs.dim() != onehot.dim() {
        return Err(Error::ShapeMismatch(format!(
            "probs {:?} vs onehot {:?}",
            probs.dim(),
            onehot.dim()
        )));
    }
    for (i, row) in probs.rows().into_iter().enumerate() {
        let s: f64 = row.sum();
        if (s - 1.0).abs() > 1e-6 {
            return Err(Error::InvalidConfig(format!(
                "probability row {i} sums to {s}"
            )));
        }
    }
    let mut total = 0.0;
    for (p, y) in probs.iter().zip(onehot.iter()) {
        if *y != 0.0 {
            total -= y * (p + LOG_EPS).ln();
        }
    }
    Ok(total / n as f64)
}

/// Gradient of [`cross_entropy`] with respect to `probs`.
pub fn cross_entropy_grad(probs: &Array2<f64>, onehot: &Array2<f64>) -> Array2<f64> {
    let n = probs.nrows() as f64;
    let mut grad = Array2::zeros(probs.dim());
    for ((g, p), y) in grad.iter_mut().zip(probs.iter()).zip(onehot.iter()) {
        if *y != 0.0 {
            *g = -y / ((p + LOG_EPS) * n);
        }
    }
    grad
}

/// Cross- and self-orthogonality penalties over two row-normalized feature
/// matrices:
///
/// - `l_co = ||F_fr . F_fi^T||_F`
/// - `l_so = (||F_fr . F_fr^T - I||_F + ||F_fi . F_fi^T - I||_F) / 2`
/// - `l_orth = l_co + l_so`
pub fn orthogonality_loss(f_fr: &FeatureMatrix, f_fi: &FeatureMatrix) -> Result<(f64, f64, f64)> {
    if !f_fr.normalized || !f_fi.normalized {
        return Err(Error::InvalidConfig(
            "orthogonality_loss expects normalized feature matrices".into(),
        ));
    }
    f_fr.check_normalized()?;
    f_fi.check_normalized()?;
    if f_fr.values.ncols() != f_fi.values.ncols() {
        return Err(Error::ShapeMismatch(format!(
            "column counts differ: {} vs {}",
            f_fr.values.ncols(),
            f_fi.values.ncols()
        )));
    }
    let cross = f_fr.values.dot(&f_fi.values.t());
    let l_co = frobenius(&cross);
    let l_so = 0.5 * (gram_identity_residual(&f_fr.values) + gram_identity_residual(&f_fi.values));
    Ok((l_co, l_so, l_co + l_so))
}

/// Gradients of `l_orth` with respect to the two normalized matrices.
pub fn orthogonality_grad(
    f_fr: &FeatureMatrix,
    f_fi: &FeatureMatrix,
) -> (Array2<f64>, Array2<f64>) {
    let a = &f_fr.values;
    let b = &f_fi.values;
    let cross = a.dot(&b.t());
    let l_co = frobenius(&cross);

    let mut grad_a = Array2::zeros(a.dim());
    let mut grad_b = Array2::zeros(b.dim());
    if l_co > 0.0 {
        let scaled = cross.mapv(|v| v / l_co);
        grad_a = grad_a + scaled.dot(b);
        grad_b = grad_b + scaled.t().dot(a);
    }

    // d/dA ||A A^T - I||_F = 2 (M / ||M||_F) A with M symmetric; the 1/2 in
    // l_so cancels the factor 2.
    for (m, grad) in [(a, &mut grad_a), (b, &mut grad_b)] {
        let gram = m.dot(&m.t());
        let mut residual = gram;
        for i in 0..residual.nrows() {
            residual[(i, i)] -= 1.0;
        }
        let norm = frobenius(&residual);
        if norm > 0.0 {
            let scaled = residual.mapv(|v| v / norm);
            *grad = &*grad + &scaled.dot(m);
        }
    }
    (grad_a, grad_b)
}

fn frobenius(m: &Array2<f64>) -> f64 {
    m.iter().map(|v| v * v).sum::<f64>().sqrt()
}

fn gram_identity_residual(m: &Array2<f64>) -> f64 {
    let gram = m.dot(&m.t());
    let mut total = 0.0;
    for i in 0..gram.nrows() {
        for j in 0..gram.ncols() {
            let r = gram[(i, j)] - if i == j { 1.0 } else { 0.0 };
            total += r * r;
        }
    }
    total.sqrt()
}

/// Reconstruction loss: per-sample mean squared error over the signal length,
/// summed over the batch.
pub fn reconstruction_loss(x: &Array2<f64>, x_hat: &Array2<f64>) -> Result<f64> {
    if x.dim() != x_hat.dim() {
        return Err(Error::ShapeMismatch(format!(
            "x {:?} vs x_hat {:?}",
            x.dim(),
            x_hat.dim()
        )));
    }
    let len = x.ncols() as f64;
    let mut total = 0.0;
    for (xi, hi) in x.rows().into_iter().zip(x_hat.rows()) {
        let sq: f64 = xi.iter().zip(hi.iter()).map(|(a, b)| (a - b) * (a - b)).sum();
        total += sq / len;
    }
    Ok(total)
}

/// Gradient of [`reconstruction_loss`] with respect to `x_hat`.
pub fn reconstruction_grad(x: &Array2<f64>, x_hat: &Array2<f64>) -> Array2<f64> {
    let len = x.ncols() as f64;
    let mut grad = Array2::zeros(x.dim());
    for ((g, a), b) in grad.iter_mut().zip(x.iter()).zip(x_hat.iter()) {
        *g = 2.0 * (b - a) / len;
    }
    grad
}

/// Binary cross-entropy over domain probabilities, source labeled 0 and
/// target labeled 1:
///
/// `-(1/(n_s+n_t)) (sum log(1 - d_s) + sum log(d_t))`
///
/// Probabilities are clamped to `[eps, 1-eps]` before the logarithm.
pub fn domain_bce(d_source: &[f64], d_target: &[f64]) -> Result<f64> {
    let n = d_source.len() + d_target.len();
    if n == 0 {
        return Err(Error::EmptyBatch);
    }
    let mut total = 0.0;
    for &d in d_source {
        total -= (1.0 - clamp_prob(d)).ln();
    }
    for &d in d_target {
        total -= clamp_prob(d).ln();
    }
    Ok(total / n as f64)
}

/// Gradients of [`domain_bce`] with respect to the two probability vectors.
pub fn domain_bce_grad(d_source: &[f64], d_target: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let n = (d_source.len() + d_target.len()) as f64;
    let gs = d_source
        .iter()
        .map(|&d| {
            let c = clamp_prob(d);
            if d == c { 1.0 / ((1.0 - c) * n) } else { 0.0 }
        })
        .collect();
    let gt = d_target
        .iter()
        .map(|&d| {
            let c = clamp_prob(d);
            if d == c { -1.0 / (c * n) } else { 0.0 }
        })
        .collect();
    (gs, gt)
}

fn clamp_prob(p: f64) -> f64 {
    p.clamp(LOG_EPS, 1.0 - LOG_EPS)
}

/// Weighted focal sum `sum_c w_c * L_c` over per-class subdomain losses.
///
/// Weights must be nonnegative and sum to 1 (tolerance 1e-6); classes with no
/// samples contribute a zero loss entry.
pub fn focal_domain_loss(per_class: &[f64], weights: &[f64]) -> Result<f64> {
    if per_class.len() != weights.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} losses vs {} weights",
            per_class.len(),
            weights.len()
        )));
    }
    if let Some(w) = weights.iter().find(|&&w| w < 0.0) {
        return Err(Error::InvalidConfig(format!("negative weight {w}")));
    }
    let sum: f64 = weights.iter().sum();
    if (sum - 1.0).abs() > 1e-6 {
        return Err(Error::InvalidConfig(format!("weights sum to {sum}")));
    }
    if let Some(l) = per_class.iter().find(|&&l| l < 0.0) {
        return Err(Error::InvalidConfig(format!("negative per-class loss {l}")));
    }
    Ok(per_class.iter().zip(weights).map(|(l, w)| l * w).sum())
}

/// One-hot encodes integer labels.
pub fn one_hot(labels: &[u16], num_classes: usize) -> Array2<f64> {
    let mut out = Array2::zeros((labels.len(), num_classes));
    for (i, &c) in labels.iter().enumerate() {
        out[(i, usize::from(c))] = 1.0;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn cross_entropy_matches_hand_values() {
        let perfect = array![[1.0, 0.0]];
        let y = array![[1.0, 0.0]];
        assert!(cross_entropy(&perfect, &y).unwrap().abs() < 1e-9);

        let uniform = array![[0.5, 0.5]];
        let ce = cross_entropy(&uniform, &y).unwrap();
        assert!((ce - std::f64::consts::LN_2).abs() < 1e-9);

        let p = array![[0.7, 0.3]];
        let ce = cross_entropy(&p, &y).unwrap();
        assert!((ce - (-(0.7f64.ln()))).abs() < 1e-9);
        assert!((ce - 0.356675).abs() < 1e-6);
    }

    #[test]
    fn cross_entropy_rejects_empty_and_offsimplex() {
        let empty = Array2::<f64>::zeros((0, 2));
        assert!(cross_entropy(&empty, &empty).is_err());
        let bad = array![[0.9, 0.3]];
        let y = array![[1.0, 0.0]];
        assert!(cross_entropy(&bad, &y).is_err());
    }

    fn fm(values: Array2<f64>) -> FeatureMatrix {
        FeatureMatrix {
            values,
            normalized: true,
        }
    }

    #[test]
    fn orthogonality_of_disjoint_basis_rows_is_zero() {
        let f_fr = fm(array![[1.0, 0.0, 0.0, 0.0], [0.0, 1.0, 0.0, 0.0]]);
        let f_fi = fm(array![[0.0, 0.0, 1.0, 0.0], [0.0, 0.0, 0.0, 1.0]]);
        let (co, so, orth) = orthogonality_loss(&f_fr, &f_fi).unwrap();
        assert!(co.abs() < 1e-12 && so.abs() < 1e-12 && orth.abs() < 1e-12);
    }

    #[test]
    fn orthogonality_of_identical_unit_row_is_one() {
        let row = fm(array![[0.6, 0.8]]);
        let (co, so, orth) = orthogonality_loss(&row, &row).unwrap();
        assert!((co - 1.0).abs() < 1e-12);
        assert!(so.abs() < 1e-12);
        assert!((orth - 1.0).abs() < 1e-12);
    }

    #[test]
    fn orthogonality_of_shared_orthonormal_pair_is_sqrt_two() {
        let m = fm(array![[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]);
        let (co, so, _) = orthogonality_loss(&m, &m).unwrap();
        assert!((co - 2f64.sqrt()).abs() < 1e-12);
        assert!(so.abs() < 1e-12);
    }

    #[test]
    fn orthogonality_rejects_unnormalized_rows() {
        let bad = fm(array![[2.0, 0.0]]);
        let ok = fm(array![[1.0, 0.0]]);
        assert!(matches!(
            orthogonality_loss(&bad, &ok),
            Err(Error::UnnormalizedRows { .. })
        ));
    }

    #[test]
    fn orthogonality_is_symmetric() {
        let a = fm(array![[0.6, 0.8, 0.0], [0.0, 0.6, 0.8]]);
        let b = fm(array![[1.0, 0.0, 0.0], [0.0, 0.0, 1.0]]);
        let (co1, so1, _) = orthogonality_loss(&a, &b).unwrap();
        let (co2, so2, _) = orthogonality_loss(&b, &a).unwrap();
        assert!((co1 - co2).abs() < 1e-12);
        assert!((so1 - so2).abs() < 1e-12);
    }

    #[test]
    fn reconstruction_matches_hand_values() {
        let x = array![[0.0, 0.0, 0.0, 0.0]];
        assert_eq!(reconstruction_loss(&x, &x).unwrap(), 0.0);
        let ones = array![[1.0, 1.0, 1.0, 1.0]];
        assert!((reconstruction_loss(&x, &ones).unwrap() - 1.0).abs() < 1e-12);

        // Two samples with per-sample MSEs 0.5 and 0.25 sum to 0.75.
        let x = array![[0.0, 0.0], [0.0, 0.0]];
        let h = array![[0.5f64.sqrt(), 0.5f64.sqrt()], [0.5, 0.5]];
        assert!((reconstruction_loss(&x, &h).unwrap() - 0.75).abs() < 1e-12);
    }

    #[test]
    fn domain_bce_matches_hand_values() {
        // Perfect discrimination after clamping.
        let l = domain_bce(&[0.0], &[1.0]).unwrap();
        assert!(l.abs() < 1e-9);
        // Constant 0.5 predictor gives ln 2.
        let l = domain_bce(&[0.5, 0.5], &[0.5, 0.5]).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-12);
        // Hand value.
        let l = domain_bce(&[0.2], &[0.9]).unwrap();
        let expect = -0.5 * (0.8f64.ln() + 0.9f64.ln());
        assert!((l - expect).abs() < 1e-12);
        assert!((l - 0.164252).abs() < 1e-6);
        assert!(domain_bce(&[], &[]).is_err());
    }

    #[test]
    fn focal_loss_matches_hand_values() {
        assert!((focal_domain_loss(&[0.4, 0.8], &[0.5, 0.5]).unwrap() - 0.6).abs() < 1e-12);
        assert!((focal_domain_loss(&[0.3, 0.9], &[0.0, 1.0]).unwrap() - 0.9).abs() < 1e-12);
        assert!((focal_domain_loss(&[1.0, 0.2], &[0.25, 0.75]).unwrap() - 0.4).abs() < 1e-12);
        assert!(focal_domain_loss(&[1.0], &[-0.1]).is_err());
    }

    #[test]
    fn cross_term_invariant_under_column_permutation() {
        let a = fm(array![[0.6, 0.8, 0.0], [0.0, 0.6, 0.8]]);
        let b = fm(array![[1.0, 0.0, 0.0], [0.0, 0.0, 1.0]]);
        let (co, _, _) = orthogonality_loss(&a, &b).unwrap();
        // Permute the sample columns of both matrices identically.
        let perm = [2usize, 0, 1];
        let permute = |m: &FeatureMatrix| {
            let mut out = m.values.clone();
            for (new_col, &old_col) in perm.iter().enumerate() {
                out.column_mut(new_col).assign(&m.values.column(old_col));
            }
            FeatureMatrix {
                values: out,
                normalized: true,
            }
        };
        let (co_p, _, _) = orthogonality_loss(&permute(&a), &permute(&b)).unwrap();
        assert!((co - co_p).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_zero_iff_perfect() {
        let y = array![[0.0, 1.0]];
        let perfect = array![[0.0, 1.0]];
        assert!(cross_entropy(&perfect, &y).unwrap().abs() < 1e-9);
        let near = array![[0.05, 0.95]];
        assert!(cross_entropy(&near, &y).unwrap() > 1e-3);
    }

    #[test]
    fn normalize_rows_produces_unit_rows() {
        let m = FeatureMatrix {
            values: array![[3.0, 4.0], [0.5, 0.0]],
            normalized: false,
        };
        let (n, norms) = m.normalize_rows();
        assert!(n.check_normalized().is_ok());
        assert!((norms[0] - 5.0).abs() < 1e-12);
        assert!((norms[1] - 0.5).abs() < 1e-12);
    }
}
