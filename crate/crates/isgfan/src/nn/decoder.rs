//! Signal reconstruction decoder.
//!
//! Consumes the channel-concatenated final maps of the two extractors
//! (`2F` channels at length `L/32`), compresses them through two
//! depthwise-separable convolutions with layer normalization, then upsamples
//! back to the input length with five stride-2 transposed convolutions.

use ndarray::Array3;
use rand_chacha::ChaCha8Rng;

use super::layers::{
    gelu_map, gelu_map_backward, ChannelLinear, ChannelLinearCache, ConvTranspose1d,
    ConvTransposeCache, DepthwiseCache, DepthwiseConv1d, LayerNormCache, LayerNormChannels,
};
use super::params::ParamFn;
use crate::error::{Error, Result};

struct DwSep {
    dw: DepthwiseConv1d,
    pw: ChannelLinear,
    norm: LayerNormChannels,
}

struct DwSepTrace {
    dw: DepthwiseCache,
    pw: ChannelLinearCache,
    norm: LayerNormCache,
}

impl DwSep {
    fn new(rng: &mut ChaCha8Rng, in_channels: usize, out_channels: usize, kernel: usize) -> Self {
        Self {
            dw: DepthwiseConv1d::new(rng, in_channels, kernel),
            pw: ChannelLinear::new(rng, in_channels, out_channels),
            norm: LayerNormChannels::new(out_channels),
        }
    }

    fn forward(&self, x: &Array3<f64>) -> (Array3<f64>, DwSepTrace) {
        let (t1, dw) = self.dw.forward(x);
        let (t2, pw) = self.pw.forward(&t1);
        let (y, norm) = self.norm.forward(&t2);
        (y, DwSepTrace { dw, pw, norm })
    }

    fn backward(&mut self, trace: &DwSepTrace, grad: &Array3<f64>) -> Array3<f64> {
        let g = self.norm.backward(&trace.norm, grad);
        let g = self.pw.backward(&trace.pw, &g);
        self.dw.backward(&trace.dw, &g)
    }

    fn visit(&mut self, prefix: &str, f: &mut ParamFn<'_>) {
        self.dw.visit(&format!("{prefix}.dw"), f);
        self.pw.visit(&format!("{prefix}.pw"), f);
        self.norm.visit(&format!("{prefix}.norm"), f);
    }
}

pub struct Decoder {
    /// Channels of the concatenated input (`2 *` extractor feature dim).
    pub in_channels: usize,
    compress: [DwSep; 2],
    ups: Vec<ConvTranspose1d>,
}

pub struct DecoderTrace {
    compress: [DwSepTrace; 2],
    ups: Vec<(ConvTransposeCache, Option<Array3<f64>>)>,
}

/// Output channels of the five upsampling layers for a given feature width.
fn upsample_channels(feature_dim: usize) -> [usize; 5] {
    let mut out = [1; 5];
    for (i, slot) in out.iter_mut().enumerate().take(4) {
        *slot = (feature_dim >> (i + 1)).max(1);
    }
    out
}

impl Decoder {
    /// `feature_dim` is one extractor's final channel count; the decoder input
    /// carries twice that many channels.
    pub fn new(feature_dim: usize, dw_kernel: usize, rng: &mut ChaCha8Rng) -> Self {
        let in_channels = 2 * feature_dim;
        let compress = [
            DwSep::new(rng, in_channels, feature_dim, dw_kernel),
            DwSep::new(rng, feature_dim, feature_dim, dw_kernel),
        ];
        let schedule = upsample_channels(feature_dim);
        let mut ups = Vec::with_capacity(5);
        let mut cur = feature_dim;
        for &out in &schedule {
            ups.push(ConvTranspose1d::new(rng, cur, out, 4, 2, 1));
            cur = out;
        }
        Self {
            in_channels,
            compress,
            ups,
        }
    }

    /// Reconstructs a `(B, 1, 32 * L_in)` signal from a `(B, 2F, L_in)` map.
    pub fn forward(&self, concat: &Array3<f64>) -> Result<(Array3<f64>, DecoderTrace)> {
        let (_, c, _) = concat.dim();
        if c != self.in_channels {
            return Err(Error::ShapeMismatch(format!(
                "decoder expects {} channels, got {c}",
                self.in_channels
            )));
        }
        let (h1, t1) = self.compress[0].forward(concat);
        let (mut h, t2) = self.compress[1].forward(&h1);
        let mut ups = Vec::with_capacity(self.ups.len());
        let last = self.ups.len() - 1;
        for (i, up) in self.ups.iter().enumerate() {
            let (z, cache) = up.forward(&h);
            if i < last {
                ups.push((cache, Some(z.clone())));
                h = gelu_map(&z);
            } else {
                ups.push((cache, None));
                h = z;
            }
        }
        Ok((
            h,
            DecoderTrace {
                compress: [t1, t2],
                ups,
            },
        ))
    }

    pub fn backward(&mut self, trace: &DecoderTrace, grad_out: &Array3<f64>) -> Array3<f64> {
        let mut grad = grad_out.clone();
        for (i, up) in self.ups.iter_mut().enumerate().rev() {
            grad = up.backward(&trace.ups[i].0, &grad);
            // The input of layer i (for i > 0) is gelu of layer i-1's output.
            if i > 0 {
                let pre = trace.ups[i - 1].1.as_ref().expect("non-final layers cache pre-gelu");
                grad = gelu_map_backward(pre, &grad);
            }
        }
        let grad = self.compress[1].backward(&trace.compress[1], &grad);
        self.compress[0].backward(&trace.compress[0], &grad)
    }

    pub fn visit(&mut self, prefix: &str, f: &mut ParamFn<'_>) {
        self.compress[0].visit(&format!("{prefix}.compress0"), f);
        self.compress[1].visit(&format!("{prefix}.compress1"), f);
        for (i, up) in self.ups.iter_mut().enumerate() {
            up.visit(&format!("{prefix}.up{i}"), f);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed;

    #[test]
    fn upsample_schedule_halves_and_terminates_at_one() {
        assert_eq!(upsample_channels(320), [160, 80, 40, 20, 1]);
        assert_eq!(upsample_channels(32), [16, 8, 4, 2, 1]);
        assert_eq!(upsample_channels(16), [8, 4, 2, 1, 1]);
    }

    #[test]
    fn decoder_restores_input_length() {
        let mut rng = seed::rng(0);
        let dec = Decoder::new(8, 7, &mut rng);
        for l in [1024usize, 2048, 2560] {
            let map = Array3::from_shape_fn((1, 16, l / 32), |(_, c, t)| {
                ((c * t) as f64 * 0.01).sin()
            });
            let (y, _) = dec.forward(&map).unwrap();
            assert_eq!(y.dim(), (1, 1, l));
        }
    }

    #[test]
    fn wrong_channel_count_is_rejected() {
        let mut rng = seed::rng(0);
        let dec = Decoder::new(8, 7, &mut rng);
        let map = Array3::zeros((1, 8, 4));
        assert!(matches!(dec.forward(&map), Err(Error::ShapeMismatch(_))));
    }
}
