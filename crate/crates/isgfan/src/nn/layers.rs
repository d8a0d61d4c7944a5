//! Primitive layers with hand-written forward and backward passes.
//!
//! Maps are shaped `(batch, channels, length)`; flat features are
//! `(batch, features)`. `forward` returns the output together with a cache;
//! `backward` consumes the cache and an upstream gradient, accumulates the
//! layer's parameter gradients, and returns the gradient with respect to the
//! layer input.

use ndarray::{Array1, Array2, Array3, Axis};
use rand_chacha::ChaCha8Rng;

use super::init;
use super::params::{ParamEntry, ParamFn};

const SQRT_2: f64 = std::f64::consts::SQRT_2;
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Exact GELU `0.5 x (1 + erf(x / sqrt(2)))`.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / SQRT_2))
}

/// Derivative of [`gelu`].
pub fn gelu_prime(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / SQRT_2)) + x * INV_SQRT_2PI * (-0.5 * x * x).exp()
}

macro_rules! visit_params {
    ($f:expr, $prefix:expr, $( ($tag:literal, $value:expr, $grad:expr) ),+ $(,)?) => {
        $(
            {
                let shape = $value.shape().to_vec();
                $f(ParamEntry {
                    name: format!("{}.{}", $prefix, $tag),
                    shape,
                    value: $value.as_slice_mut().expect("standard layout"),
                    grad: $grad.as_slice_mut().expect("standard layout"),
                });
            }
        )+
    };
}

// ── Dense linear on (B, In) ────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct Dense {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
    pub weight_grad: Array2<f64>,
    pub bias_grad: Array1<f64>,
}

pub struct DenseCache {
    input: Array2<f64>,
}

impl Dense {
    pub fn new(rng: &mut ChaCha8Rng, in_dim: usize, out_dim: usize) -> Self {
        Self {
            weight: init::weights_2d(rng, out_dim, in_dim),
            bias: Array1::zeros(out_dim),
            weight_grad: Array2::zeros((out_dim, in_dim)),
            bias_grad: Array1::zeros(out_dim),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.ncols()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.nrows()
    }

    pub fn forward(&self, x: &Array2<f64>) -> (Array2<f64>, DenseCache) {
        let mut y = x.dot(&self.weight.t());
        y += &self.bias;
        (y, DenseCache { input: x.clone() })
    }

    pub fn backward(&mut self, cache: &DenseCache, grad_out: &Array2<f64>) -> Array2<f64> {
        self.weight_grad = &self.weight_grad + &grad_out.t().dot(&cache.input);
        self.bias_grad = &self.bias_grad + &grad_out.sum_axis(Axis(0));
        grad_out.dot(&self.weight)
    }

    pub fn visit(&mut self, prefix: &str, f: &mut ParamFn<'_>) {
        visit_params!(
            f,
            prefix,
            ("weight", self.weight, self.weight_grad),
            ("bias", self.bias, self.bias_grad),
        );
    }
}

// ── Position-wise linear on maps (B, C, L) ─────────────────────────────────

/// Linear map across channels applied independently at every position;
/// equivalent to a pointwise convolution.
#[derive(Debug, Clone)]
pub struct ChannelLinear {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
    pub weight_grad: Array2<f64>,
    pub bias_grad: Array1<f64>,
}

pub struct ChannelLinearCache {
    input: Array3<f64>,
}

impl ChannelLinear {
    pub fn new(rng: &mut ChaCha8Rng, in_channels: usize, out_channels: usize) -> Self {
        Self {
            weight: init::weights_2d(rng, out_channels, in_channels),
            bias: Array1::zeros(out_channels),
            weight_grad: Array2::zeros((out_channels, in_channels)),
            bias_grad: Array1::zeros(out_channels),
        }
    }

    pub fn forward(&self, x: &Array3<f64>) -> (Array3<f64>, ChannelLinearCache) {
        use ndarray::linalg::general_mat_mul;
        let (b, _c, l) = x.dim();
        let out_c = self.weight.nrows();
        let mut y = Array3::zeros((b, out_c, l));
        for bi in 0..b {
            let xb = x.index_axis(Axis(0), bi);
            let mut yb = y.index_axis_mut(Axis(0), bi);
            general_mat_mul(1.0, &self.weight, &xb, 0.0, &mut yb);
            for (o, mut row) in yb.rows_mut().into_iter().enumerate() {
                row += self.bias[o];
            }
        }
        (y, ChannelLinearCache { input: x.clone() })
    }

    pub fn backward(&mut self, cache: &ChannelLinearCache, grad_out: &Array3<f64>) -> Array3<f64> {
        use ndarray::linalg::general_mat_mul;
        let (b, _c, _l) = cache.input.dim();
        let mut grad_in = Array3::zeros(cache.input.dim());
        for bi in 0..b {
            let xb = cache.input.index_axis(Axis(0), bi);
            let gb = grad_out.index_axis(Axis(0), bi);
            general_mat_mul(1.0, &gb, &xb.t(), 1.0, &mut self.weight_grad);
            let mut gib = grad_in.index_axis_mut(Axis(0), bi);
            general_mat_mul(1.0, &self.weight.t(), &gb, 0.0, &mut gib);
        }
        self.bias_grad = &self.bias_grad + &grad_out.sum_axis(Axis(2)).sum_axis(Axis(0));
        grad_in
    }

    pub fn visit(&mut self, prefix: &str, f: &mut ParamFn<'_>) {
        visit_params!(
            f,
            prefix,
            ("weight", self.weight, self.weight_grad),
            ("bias", self.bias, self.bias_grad),
        );
    }
}

// ── Depthwise convolution (same padding) ───────────────────────────────────

#[derive(Debug, Clone)]
pub struct DepthwiseConv1d {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
    pub weight_grad: Array2<f64>,
    pub bias_grad: Array1<f64>,
    pub pad: usize,
}

pub struct DepthwiseCache {
    input: Array3<f64>,
}

impl DepthwiseConv1d {
    pub fn new(rng: &mut ChaCha8Rng, channels: usize, kernel: usize) -> Self {
        assert!(kernel % 2 == 1, "same padding needs an odd kernel");
        Self {
            weight: init::weights_2d(rng, channels, kernel),
            bias: Array1::zeros(channels),
            weight_grad: Array2::zeros((channels, kernel)),
            bias_grad: Array1::zeros(channels),
            pad: (kernel - 1) / 2,
        }
    }

    pub fn forward(&self, x: &Array3<f64>) -> (Array3<f64>, DepthwiseCache) {
        let (b, c, l) = x.dim();
        let mut y = Array3::zeros((b, c, l));
        for bi in 0..b {
            for ci in 0..c {
                let xv = x.index_axis(Axis(0), bi);
                let xrow = xv.row(ci);
                let xs = xrow.as_slice().expect("contiguous");
                let wrow = self.weight.row(ci);
                let w = wrow.as_slice().expect("contiguous");
                let bias = self.bias[ci];
                let mut yv = y.index_axis_mut(Axis(0), bi);
                let mut yrow = yv.row_mut(ci);
                let ys = yrow.as_slice_mut().expect("contiguous");
                ys.fill(bias);
                for (ki, &wk) in w.iter().enumerate() {
                    // y[t] += w[ki] * x[t + ki - pad] over the valid window.
                    let (y_lo, x_lo) = if ki >= self.pad {
                        (0, ki - self.pad)
                    } else {
                        (self.pad - ki, 0)
                    };
                    let span = l.saturating_sub(x_lo).min(l.saturating_sub(y_lo));
                    for i in 0..span {
                        ys[y_lo + i] += wk * xs[x_lo + i];
                    }
                }
            }
        }
        (y, DepthwiseCache { input: x.clone() })
    }

    pub fn backward(&mut self, cache: &DepthwiseCache, grad_out: &Array3<f64>) -> Array3<f64> {
        let (b, c, l) = cache.input.dim();
        let k = self.weight.ncols();
        let mut grad_in = Array3::zeros((b, c, l));
        for bi in 0..b {
            for ci in 0..c {
                let xv = cache.input.index_axis(Axis(0), bi);
                let xrow = xv.row(ci);
                let xs = xrow.as_slice().expect("contiguous");
                let gv = grad_out.index_axis(Axis(0), bi);
                let grow = gv.row(ci);
                let gs = grow.as_slice().expect("contiguous");
                let wrow = self.weight.row(ci);
                let w = wrow.as_slice().expect("contiguous");
                let mut giv = grad_in.index_axis_mut(Axis(0), bi);
                let mut girow = giv.row_mut(ci);
                let gis = girow.as_slice_mut().expect("contiguous");
                self.bias_grad[ci] += gs.iter().sum::<f64>();
                for ki in 0..k {
                    let (y_lo, x_lo) = if ki >= self.pad {
                        (0, ki - self.pad)
                    } else {
                        (self.pad - ki, 0)
                    };
                    let span = l.saturating_sub(x_lo).min(l.saturating_sub(y_lo));
                    let wk = w[ki];
                    let mut wg = 0.0;
                    for i in 0..span {
                        let g = gs[y_lo + i];
                        gis[x_lo + i] += wk * g;
                        wg += xs[x_lo + i] * g;
                    }
                    self.weight_grad[(ci, ki)] += wg;
                }
            }
        }
        grad_in
    }

    pub fn visit(&mut self, prefix: &str, f: &mut ParamFn<'_>) {
        visit_params!(
            f,
            prefix,
            ("weight", self.weight, self.weight_grad),
            ("bias", self.bias, self.bias_grad),
        );
    }
}

// ── Strided convolution (kernel == stride, no padding) ─────────────────────

/// Downsampling convolution; kernel equals stride so positions tile the input
/// exactly and the output length is `L / stride`.
#[derive(Debug, Clone)]
pub struct StridedConv1d {
    pub weight: Array3<f64>,
    pub bias: Array1<f64>,
    pub weight_grad: Array3<f64>,
    pub bias_grad: Array1<f64>,
    pub stride: usize,
}

pub struct StridedCache {
    input: Array3<f64>,
}

impl StridedConv1d {
    pub fn new(rng: &mut ChaCha8Rng, in_channels: usize, out_channels: usize, stride: usize) -> Self {
        Self {
            weight: init::weights_3d(rng, out_channels, in_channels, stride),
            bias: Array1::zeros(out_channels),
            weight_grad: Array3::zeros((out_channels, in_channels, stride)),
            bias_grad: Array1::zeros(out_channels),
            stride,
        }
    }

    pub fn forward(&self, x: &Array3<f64>) -> (Array3<f64>, StridedCache) {
        let (b, c_in, l) = x.dim();
        let s = self.stride;
        debug_assert_eq!(l % s, 0, "length must divide by the stride");
        let l_out = l / s;
        let c_out = self.weight.dim().0;
        let mut y = Array3::zeros((b, c_out, l_out));
        for bi in 0..b {
            let xb = x.index_axis(Axis(0), bi);
            let mut yv = y.index_axis_mut(Axis(0), bi);
            for o in 0..c_out {
                let mut yrow = yv.row_mut(o);
                let ys = yrow.as_slice_mut().expect("contiguous");
                ys.fill(self.bias[o]);
                for i in 0..c_in {
                    let xrow = xb.row(i);
                    let xs = xrow.as_slice().expect("contiguous");
                    let wv = self.weight.index_axis(Axis(0), o);
                    let wrow = wv.row(i);
                    let w = wrow.as_slice().expect("contiguous");
                    for (t, yt) in ys.iter_mut().enumerate() {
                        let base = t * s;
                        let mut acc = 0.0;
                        for (ki, &wk) in w.iter().enumerate() {
                            acc += wk * xs[base + ki];
                        }
                        *yt += acc;
                    }
                }
            }
        }
        (y, StridedCache { input: x.clone() })
    }

    pub fn backward(&mut self, cache: &StridedCache, grad_out: &Array3<f64>) -> Array3<f64> {
        let (b, c_in, l) = cache.input.dim();
        let s = self.stride;
        let (c_out, _, _) = self.weight.dim();
        let l_out = l / s;
        let mut grad_in = Array3::zeros((b, c_in, l));
        for bi in 0..b {
            let xb = cache.input.index_axis(Axis(0), bi);
            let gv = grad_out.index_axis(Axis(0), bi);
            let mut giv = grad_in.index_axis_mut(Axis(0), bi);
            for o in 0..c_out {
                let grow = gv.row(o);
                let gs = grow.as_slice().expect("contiguous");
                self.bias_grad[o] += gs.iter().sum::<f64>();
                for i in 0..c_in {
                    let xrow = xb.row(i);
                    let xs = xrow.as_slice().expect("contiguous");
                    let mut girow = giv.row_mut(i);
                    let gis = girow.as_slice_mut().expect("contiguous");
                    let mut wv = self.weight_grad.index_axis_mut(Axis(0), o);
                    let mut wgrow = wv.row_mut(i);
                    let wg = wgrow.as_slice_mut().expect("contiguous");
                    let wvv = self.weight.index_axis(Axis(0), o);
                    let wrow = wvv.row(i);
                    let w = wrow.as_slice().expect("contiguous");
                    for (t, &g) in gs.iter().enumerate().take(l_out) {
                        let base = t * s;
                        for ki in 0..s {
                            wg[ki] += xs[base + ki] * g;
                            gis[base + ki] += w[ki] * g;
                        }
                    }
                }
            }
        }
        grad_in
    }

    pub fn visit(&mut self, prefix: &str, f: &mut ParamFn<'_>) {
        visit_params!(
            f,
            prefix,
            ("weight", self.weight, self.weight_grad),
            ("bias", self.bias, self.bias_grad),
        );
    }
}

// ── Transposed convolution ─────────────────────────────────────────────────

/// Upsampling transposed convolution. With kernel 4, stride 2, padding 1 the
/// output length is exactly twice the input length.
#[derive(Debug, Clone)]
pub struct ConvTranspose1d {
    pub weight: Array3<f64>,
    pub bias: Array1<f64>,
    pub weight_grad: Array3<f64>,
    pub bias_grad: Array1<f64>,
    pub stride: usize,
    pub pad: usize,
}

pub struct ConvTransposeCache {
    input: Array3<f64>,
}

impl ConvTranspose1d {
    pub fn new(
        rng: &mut ChaCha8Rng,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        Self {
            weight: init::weights_3d(rng, in_channels, out_channels, kernel),
            bias: Array1::zeros(out_channels),
            weight_grad: Array3::zeros((in_channels, out_channels, kernel)),
            bias_grad: Array1::zeros(out_channels),
            stride,
            pad,
        }
    }

    pub fn out_len(&self, l_in: usize) -> usize {
        (l_in - 1) * self.stride + self.weight.dim().2 - 2 * self.pad
    }

    pub fn forward(&self, x: &Array3<f64>) -> (Array3<f64>, ConvTransposeCache) {
        let (b, c_in, l_in) = x.dim();
        let (_, c_out, _) = self.weight.dim();
        let l_out = self.out_len(l_in);
        let mut y = Array3::zeros((b, c_out, l_out));
        for bi in 0..b {
            let xb = x.index_axis(Axis(0), bi);
            let mut yv = y.index_axis_mut(Axis(0), bi);
            for o in 0..c_out {
                let mut yrow = yv.row_mut(o);
                let ys = yrow.as_slice_mut().expect("contiguous");
                ys.fill(self.bias[o]);
                for i in 0..c_in {
                    let xrow = xb.row(i);
                    let xs = xrow.as_slice().expect("contiguous");
                    let wv = self.weight.index_axis(Axis(0), i);
                    let wrow = wv.row(o);
                    let w = wrow.as_slice().expect("contiguous");
                    for (l, &xv) in xs.iter().enumerate() {
                        let base = l * self.stride;
                        for (ki, &wk) in w.iter().enumerate() {
                            let t = base + ki;
                            if t >= self.pad && t - self.pad < l_out {
                                ys[t - self.pad] += wk * xv;
                            }
                        }
                    }
                }
            }
        }
        (y, ConvTransposeCache { input: x.clone() })
    }

    pub fn backward(&mut self, cache: &ConvTransposeCache, grad_out: &Array3<f64>) -> Array3<f64> {
        let (b, c_in, l_in) = cache.input.dim();
        let (_, c_out, k) = self.weight.dim();
        let l_out = self.out_len(l_in);
        let mut grad_in = Array3::zeros((b, c_in, l_in));
        for bi in 0..b {
            let xb = cache.input.index_axis(Axis(0), bi);
            let gv = grad_out.index_axis(Axis(0), bi);
            let mut giv = grad_in.index_axis_mut(Axis(0), bi);
            for o in 0..c_out {
                let grow = gv.row(o);
                let gs = grow.as_slice().expect("contiguous");
                self.bias_grad[o] += gs.iter().sum::<f64>();
                for i in 0..c_in {
                    let xrow = xb.row(i);
                    let xs = xrow.as_slice().expect("contiguous");
                    let mut girow = giv.row_mut(i);
                    let gis = girow.as_slice_mut().expect("contiguous");
                    let mut wgv = self.weight_grad.index_axis_mut(Axis(0), i);
                    let mut wgrow = wgv.row_mut(o);
                    let wg = wgrow.as_slice_mut().expect("contiguous");
                    let wv = self.weight.index_axis(Axis(0), i);
                    let wrow = wv.row(o);
                    let w = wrow.as_slice().expect("contiguous");
                    for (l, &xv) in xs.iter().enumerate() {
                        let base = l * self.stride;
                        let mut acc = 0.0;
                        for ki in 0..k {
                            let t = base + ki;
                            if t >= self.pad && t - self.pad < l_out {
                                let g = gs[t - self.pad];
                                acc += w[ki] * g;
                                wg[ki] += xv * g;
                            }
                        }
                        gis[l] += acc;
                    }
                }
            }
        }
        grad_in
    }

    pub fn visit(&mut self, prefix: &str, f: &mut ParamFn<'_>) {
        visit_params!(
            f,
            prefix,
            ("weight", self.weight, self.weight_grad),
            ("bias", self.bias, self.bias_grad),
        );
    }
}

// ── Layer normalization across channels ────────────────────────────────────

/// Normalizes across the channel dimension independently at every
/// `(batch, position)` pair, with per-channel affine parameters.
#[derive(Debug, Clone)]
pub struct LayerNormChannels {
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
    pub gamma_grad: Array1<f64>,
    pub beta_grad: Array1<f64>,
    pub eps: f64,
}

pub struct LayerNormCache {
    normalized: Array3<f64>,
    inv_std: Array2<f64>,
}

impl LayerNormChannels {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Array1::ones(channels),
            beta: Array1::zeros(channels),
            gamma_grad: Array1::zeros(channels),
            beta_grad: Array1::zeros(channels),
            eps: 1e-6,
        }
    }

    pub fn forward(&self, x: &Array3<f64>) -> (Array3<f64>, LayerNormCache) {
        let (b, c, l) = x.dim();
        let mut y = Array3::zeros((b, c, l));
        let mut normalized = Array3::zeros((b, c, l));
        let mut inv_std = Array2::zeros((b, l));
        let cf = c as f64;
        let mut mean = vec![0.0; l];
        let mut var = vec![0.0; l];
        for bi in 0..b {
            let xv = x.index_axis(Axis(0), bi);
            mean.fill(0.0);
            var.fill(0.0);
            for ci in 0..c {
                let row = xv.row(ci);
                let xs = row.as_slice().expect("contiguous");
                for (m, &v) in mean.iter_mut().zip(xs) {
                    *m += v;
                }
            }
            for m in mean.iter_mut() {
                *m /= cf;
            }
            for ci in 0..c {
                let row = xv.row(ci);
                let xs = row.as_slice().expect("contiguous");
                for (t, &v) in xs.iter().enumerate() {
                    let d = v - mean[t];
                    var[t] += d * d;
                }
            }
            {
                let mut irow = inv_std.row_mut(bi);
                let is = irow.as_slice_mut().expect("contiguous");
                for (t, i) in is.iter_mut().enumerate() {
                    *i = 1.0 / (var[t] / cf + self.eps).sqrt();
                }
            }
            let irow = inv_std.row(bi);
            let is = irow.as_slice().expect("contiguous");
            let mut nv = normalized.index_axis_mut(Axis(0), bi);
            let mut yv = y.index_axis_mut(Axis(0), bi);
            for ci in 0..c {
                let row = xv.row(ci);
                let xs = row.as_slice().expect("contiguous");
                let mut nrow = nv.row_mut(ci);
                let ns = nrow.as_slice_mut().expect("contiguous");
                let mut yrow = yv.row_mut(ci);
                let ys = yrow.as_slice_mut().expect("contiguous");
                let (g, bt) = (self.gamma[ci], self.beta[ci]);
                for t in 0..l {
                    let h = (xs[t] - mean[t]) * is[t];
                    ns[t] = h;
                    ys[t] = g * h + bt;
                }
            }
        }
        (y, LayerNormCache { normalized, inv_std })
    }

    pub fn backward(&mut self, cache: &LayerNormCache, grad_out: &Array3<f64>) -> Array3<f64> {
        let (b, c, l) = cache.normalized.dim();
        let cf = c as f64;
        let mut grad_in = Array3::zeros((b, c, l));
        let mut mean_dh = vec![0.0; l];
        let mut mean_dh_h = vec![0.0; l];
        for bi in 0..b {
            let nv = cache.normalized.index_axis(Axis(0), bi);
            let gv = grad_out.index_axis(Axis(0), bi);
            mean_dh.fill(0.0);
            mean_dh_h.fill(0.0);
            for ci in 0..c {
                let hrow = nv.row(ci);
                let hs = hrow.as_slice().expect("contiguous");
                let grow = gv.row(ci);
                let gs = grow.as_slice().expect("contiguous");
                let g = self.gamma[ci];
                let mut dgamma = 0.0;
                let mut dbeta = 0.0;
                for t in 0..l {
                    let dy = gs[t];
                    let h = hs[t];
                    dgamma += dy * h;
                    dbeta += dy;
                    let dh = dy * g;
                    mean_dh[t] += dh;
                    mean_dh_h[t] += dh * h;
                }
                self.gamma_grad[ci] += dgamma;
                self.beta_grad[ci] += dbeta;
            }
            for t in 0..l {
                mean_dh[t] /= cf;
                mean_dh_h[t] /= cf;
            }
            let irow = cache.inv_std.row(bi);
            let is = irow.as_slice().expect("contiguous");
            let mut giv = grad_in.index_axis_mut(Axis(0), bi);
            for ci in 0..c {
                let hrow = nv.row(ci);
                let hs = hrow.as_slice().expect("contiguous");
                let grow = gv.row(ci);
                let gs = grow.as_slice().expect("contiguous");
                let g = self.gamma[ci];
                let mut girow = giv.row_mut(ci);
                let gis = girow.as_slice_mut().expect("contiguous");
                for t in 0..l {
                    let dh = gs[t] * g;
                    gis[t] = is[t] * (dh - mean_dh[t] - hs[t] * mean_dh_h[t]);
                }
            }
        }
        grad_in
    }

    pub fn visit(&mut self, prefix: &str, f: &mut ParamFn<'_>) {
        visit_params!(
            f,
            prefix,
            ("gamma", self.gamma, self.gamma_grad),
            ("beta", self.beta, self.beta_grad),
        );
    }
}

// ── Global response normalization ──────────────────────────────────────────

/// Channel-competition normalization: each channel is rescaled by its global
/// response relative to the per-sample mean response, with a residual path.
/// `gamma`/`beta` start at zero so the layer is the identity at init.
#[derive(Debug, Clone)]
pub struct Grn {
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
    pub gamma_grad: Array1<f64>,
    pub beta_grad: Array1<f64>,
    pub eps: f64,
}

pub struct GrnCache {
    input: Array3<f64>,
    response: Array2<f64>,
    scale: Array2<f64>,
    mean: Array1<f64>,
}

impl Grn {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Array1::zeros(channels),
            beta: Array1::zeros(channels),
            gamma_grad: Array1::zeros(channels),
            beta_grad: Array1::zeros(channels),
            eps: 1e-6,
        }
    }

    pub fn forward(&self, x: &Array3<f64>) -> (Array3<f64>, GrnCache) {
        let (b, c, l) = x.dim();
        let mut response = Array2::zeros((b, c));
        let mut mean = Array1::zeros(b);
        for bi in 0..b {
            let xv = x.index_axis(Axis(0), bi);
            for ci in 0..c {
                let row = xv.row(ci);
                let xs = row.as_slice().expect("contiguous");
                response[(bi, ci)] = xs.iter().map(|v| v * v).sum::<f64>().sqrt();
            }
            mean[bi] = response.row(bi).sum() / c as f64;
        }
        let mut scale = Array2::zeros((b, c));
        for bi in 0..b {
            for ci in 0..c {
                scale[(bi, ci)] = response[(bi, ci)] / (mean[bi] + self.eps);
            }
        }
        let mut y = Array3::zeros((b, c, l));
        for bi in 0..b {
            let xv = x.index_axis(Axis(0), bi);
            let mut yv = y.index_axis_mut(Axis(0), bi);
            for ci in 0..c {
                let g = self.gamma[ci];
                let bt = self.beta[ci];
                let n = scale[(bi, ci)];
                let a = g * n + 1.0;
                let row = xv.row(ci);
                let xs = row.as_slice().expect("contiguous");
                let mut yrow = yv.row_mut(ci);
                let ys = yrow.as_slice_mut().expect("contiguous");
                for t in 0..l {
                    ys[t] = a * xs[t] + bt;
                }
            }
        }
        (
            y,
            GrnCache {
                input: x.clone(),
                response,
                scale,
                mean,
            },
        )
    }

    pub fn backward(&mut self, cache: &GrnCache, grad_out: &Array3<f64>) -> Array3<f64> {
        let (b, c, l) = cache.input.dim();
        let cf = c as f64;
        let mut grad_in = Array3::zeros((b, c, l));
        for bi in 0..b {
            let xv = cache.input.index_axis(Axis(0), bi);
            let gv = grad_out.index_axis(Axis(0), bi);
            let mut giv = grad_in.index_axis_mut(Axis(0), bi);
            // Direct path and accumulation of d(loss)/d(scale).
            let mut d_scale = vec![0.0; c];
            for ci in 0..c {
                let g = self.gamma[ci];
                let n = cache.scale[(bi, ci)];
                let a = g * n + 1.0;
                let xrow = xv.row(ci);
                let xs = xrow.as_slice().expect("contiguous");
                let grow = gv.row(ci);
                let gs = grow.as_slice().expect("contiguous");
                let mut girow = giv.row_mut(ci);
                let gis = girow.as_slice_mut().expect("contiguous");
                let mut dg = 0.0;
                let mut db = 0.0;
                let mut ds = 0.0;
                for t in 0..l {
                    let dy = gs[t];
                    let x = xs[t];
                    dg += dy * x;
                    db += dy;
                    ds += dy * x;
                    gis[t] += dy * a;
                }
                self.gamma_grad[ci] += dg * n;
                self.beta_grad[ci] += db;
                d_scale[ci] = ds * g;
            }
            // Through the response normalization.
            let denom = cache.mean[bi] + self.eps;
            let mut weighted: f64 = 0.0;
            for ci in 0..c {
                weighted += d_scale[ci] * cache.response[(bi, ci)];
            }
            for ci in 0..c {
                let d_resp = d_scale[ci] / denom - weighted / (denom * denom * cf);
                let r = cache.response[(bi, ci)];
                if r > 0.0 {
                    let f = d_resp / r;
                    let xrow = xv.row(ci);
                    let xs = xrow.as_slice().expect("contiguous");
                    let mut girow = giv.row_mut(ci);
                    let gis = girow.as_slice_mut().expect("contiguous");
                    for t in 0..l {
                        gis[t] += f * xs[t];
                    }
                }
            }
        }
        grad_in
    }

    pub fn visit(&mut self, prefix: &str, f: &mut ParamFn<'_>) {
        visit_params!(
            f,
            prefix,
            ("gamma", self.gamma, self.gamma_grad),
            ("beta", self.beta, self.beta_grad),
        );
    }
}

// ── Activation wrappers ────────────────────────────────────────────────────

pub fn gelu_map(x: &Array3<f64>) -> Array3<f64> {
    x.mapv(gelu)
}

pub fn gelu_map_backward(x: &Array3<f64>, grad_out: &Array3<f64>) -> Array3<f64> {
    let mut g = x.mapv(gelu_prime);
    g *= grad_out;
    g
}

pub fn gelu_flat(x: &Array2<f64>) -> Array2<f64> {
    x.mapv(gelu)
}

pub fn gelu_flat_backward(x: &Array2<f64>, grad_out: &Array2<f64>) -> Array2<f64> {
    let mut g = x.mapv(gelu_prime);
    g *= grad_out;
    g
}

// ── Pooling ────────────────────────────────────────────────────────────────

/// Mean over the length axis: `(B, C, L) -> (B, C)`.
pub fn global_avg_pool(x: &Array3<f64>) -> Array2<f64> {
    x.mean_axis(Axis(2)).expect("nonzero length")
}

/// Backward map of [`global_avg_pool`].
pub fn global_avg_pool_backward(grad_out: &Array2<f64>, length: usize) -> Array3<f64> {
    let (b, c) = grad_out.dim();
    let mut grad_in = Array3::zeros((b, c, length));
    let inv = 1.0 / length as f64;
    for bi in 0..b {
        for ci in 0..c {
            let g = grad_out[(bi, ci)] * inv;
            for t in 0..length {
                grad_in[(bi, ci, t)] = g;
            }
        }
    }
    grad_in
}
