//! Four-stage 1-D feature extractor.
//!
//! Each stage downsamples with a kernel-equals-stride convolution followed by
//! layer normalization, then applies depthwise-separable blocks: depthwise
//! conv (kernel 7, same padding), layer norm, channel-expanding linear, GELU,
//! global response normalization, channel-compressing linear, and a residual
//! connection. The overall stride is 32, so the stage maps of an input of
//! length `L` have lengths `L/4, L/8, L/16, L/32`.

use ndarray::Array3;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::layers::{
    gelu_map, gelu_map_backward, ChannelLinear, ChannelLinearCache, DepthwiseCache,
    DepthwiseConv1d, Grn, GrnCache, LayerNormCache, LayerNormChannels, StridedCache,
    StridedConv1d,
};
use super::params::ParamFn;
use crate::error::{Error, Result};

/// Channel expansion factor inside each block.
const EXPANSION: usize = 4;

/// Stage table of the extractor.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ExtractorConfig {
    /// Output channels of the four stages.
    pub stage_channels: [usize; 4],
    /// (kernel, stride) of each stage's downsampling layer.
    pub stage_downsample: [(usize, usize); 4],
    /// Depthwise-separable blocks per stage.
    pub blocks_per_stage: usize,
    /// Depthwise kernel width.
    pub dw_kernel: usize,
}

impl Default for ExtractorConfig {
    fn default() -> Self {
        Self {
            stage_channels: [40, 80, 160, 320],
            stage_downsample: [(4, 4), (2, 2), (2, 2), (2, 2)],
            blocks_per_stage: 1,
            dw_kernel: 7,
        }
    }
}

impl ExtractorConfig {
    /// Reduced-width table for desk-scale experiments; strides stay fixed.
    pub fn scaled(stage_channels: [usize; 4]) -> Self {
        Self {
            stage_channels,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let product: usize = self.stage_downsample.iter().map(|&(_, s)| s).product();
        if product != 32 {
            return Err(Error::InvalidConfig(format!(
                "downsample strides multiply to {product}, expected 32"
            )));
        }
        for w in self.stage_channels.windows(2) {
            if w[1] <= w[0] {
                return Err(Error::InvalidConfig(
                    "stage channels must be strictly increasing".into(),
                ));
            }
        }
        if self.blocks_per_stage == 0 {
            return Err(Error::InvalidConfig("blocks_per_stage must be >= 1".into()));
        }
        if self.dw_kernel % 2 == 0 {
            return Err(Error::InvalidConfig("dw_kernel must be odd".into()));
        }
        Ok(())
    }

    /// Feature dimension seen by the heads (final stage channels).
    pub fn feature_dim(&self) -> usize {
        self.stage_channels[3]
    }

    /// Cumulative stride of the whole extractor.
    pub fn total_stride(&self) -> usize {
        self.stage_downsample.iter().map(|&(_, s)| s).product()
    }

    /// Map length after each stage for an input of length `l`.
    pub fn stage_lengths(&self, l: usize) -> [usize; 4] {
        let mut out = [0; 4];
        let mut len = l;
        for (i, &(_, s)) in self.stage_downsample.iter().enumerate() {
            len /= s;
            out[i] = len;
        }
        out
    }
}

/// A stage map together with its stage index.
#[derive(Debug, Clone)]
pub struct FeatureMap {
    pub values: Array3<f64>,
    pub stage: usize,
}

struct Block {
    dw: DepthwiseConv1d,
    norm: LayerNormChannels,
    expand: ChannelLinear,
    grn: Grn,
    compress: ChannelLinear,
}

pub struct BlockTrace {
    dw: DepthwiseCache,
    norm: LayerNormCache,
    expand: ChannelLinearCache,
    pre_gelu: Array3<f64>,
    grn: GrnCache,
    compress: ChannelLinearCache,
}

impl Block {
    fn new(rng: &mut ChaCha8Rng, channels: usize, dw_kernel: usize) -> Self {
        Self {
            dw: DepthwiseConv1d::new(rng, channels, dw_kernel),
            norm: LayerNormChannels::new(channels),
            expand: ChannelLinear::new(rng, channels, channels * EXPANSION),
            grn: Grn::new(channels * EXPANSION),
            compress: ChannelLinear::new(rng, channels * EXPANSION, channels),
        }
    }

    fn forward(&self, x: &Array3<f64>) -> (Array3<f64>, BlockTrace) {
        let (t1, dw) = self.dw.forward(x);
        let (t2, norm) = self.norm.forward(&t1);
        let (t3, expand) = self.expand.forward(&t2);
        let t4 = gelu_map(&t3);
        let (t5, grn) = self.grn.forward(&t4);
        let (t6, compress) = self.compress.forward(&t5);
        let y = x + &t6;
        (
            y,
            BlockTrace {
                dw,
                norm,
                expand,
                pre_gelu: t3,
                grn,
                compress,
            },
        )
    }

    fn backward(&mut self, trace: &BlockTrace, grad_out: &Array3<f64>) -> Array3<f64> {
        let g6 = self.compress.backward(&trace.compress, grad_out);
        let g5 = self.grn.backward(&trace.grn, &g6);
        let g4 = gelu_map_backward(&trace.pre_gelu, &g5);
        let g3 = self.expand.backward(&trace.expand, &g4);
        let g2 = self.norm.backward(&trace.norm, &g3);
        let g1 = self.dw.backward(&trace.dw, &g2);
        // Residual path.
        g1 + grad_out
    }

    fn visit(&mut self, prefix: &str, f: &mut ParamFn<'_>) {
        self.dw.visit(&format!("{prefix}.dw"), f);
        self.norm.visit(&format!("{prefix}.norm"), f);
        self.expand.visit(&format!("{prefix}.expand"), f);
        self.grn.visit(&format!("{prefix}.grn"), f);
        self.compress.visit(&format!("{prefix}.compress"), f);
    }
}

struct Stage {
    down: StridedConv1d,
    norm: LayerNormChannels,
    blocks: Vec<Block>,
}

pub struct StageTrace {
    down: StridedCache,
    norm: LayerNormCache,
    blocks: Vec<BlockTrace>,
}

/// Full forward trace of one extractor pass.
pub struct ExtractorTrace {
    stages: Vec<StageTrace>,
    /// Length of the input the trace was recorded on.
    pub input_len: usize,
}

pub struct Extractor {
    pub config: ExtractorConfig,
    stages: Vec<Stage>,
}

impl Extractor {
    pub fn new(config: ExtractorConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        config.validate()?;
        let mut stages = Vec::with_capacity(4);
        let mut in_channels = 1;
        for s in 0..4 {
            let out_channels = config.stage_channels[s];
            let (_, stride) = config.stage_downsample[s];
            let down = StridedConv1d::new(rng, in_channels, out_channels, stride);
            let norm = LayerNormChannels::new(out_channels);
            let blocks = (0..config.blocks_per_stage)
                .map(|_| Block::new(rng, out_channels, config.dw_kernel))
                .collect();
            stages.push(Stage { down, norm, blocks });
            in_channels = out_channels;
        }
        Ok(Self { config, stages })
    }

    fn check_input(&self, x: &Array3<f64>) -> Result<()> {
        let (_, c, l) = x.dim();
        if c != 1 {
            return Err(Error::ShapeMismatch(format!("expected 1 input channel, got {c}")));
        }
        if l == 0 || l % self.config.total_stride() != 0 {
            return Err(Error::InvalidLength(format!(
                "input length {l} must be a positive multiple of {}",
                self.config.total_stride()
            )));
        }
        Ok(())
    }

    /// Runs all four stages, returning the final map and the backward trace.
    pub fn forward(&self, x: &Array3<f64>) -> Result<(Array3<f64>, ExtractorTrace)> {
        self.check_input(x)?;
        let input_len = x.dim().2;
        let mut cur = x.clone();
        let mut stages = Vec::with_capacity(4);
        for stage in &self.stages {
            let (d, down) = stage.down.forward(&cur);
            let (mut h, norm) = stage.norm.forward(&d);
            let mut blocks = Vec::with_capacity(stage.blocks.len());
            for block in &stage.blocks {
                let (next, trace) = block.forward(&h);
                blocks.push(trace);
                h = next;
            }
            stages.push(StageTrace { down, norm, blocks });
            cur = h;
        }
        Ok((cur, ExtractorTrace { stages, input_len }))
    }

    /// Per-stage maps, used for shape inspection.
    pub fn forward_stages(&self, x: &Array3<f64>) -> Result<Vec<FeatureMap>> {
        self.check_input(x)?;
        let mut cur = x.clone();
        let mut maps = Vec::with_capacity(4);
        for (i, stage) in self.stages.iter().enumerate() {
            let (d, _) = stage.down.forward(&cur);
            let (mut h, _) = stage.norm.forward(&d);
            for block in &stage.blocks {
                let (next, _) = block.forward(&h);
                h = next;
            }
            maps.push(FeatureMap {
                values: h.clone(),
                stage: i,
            });
            cur = h;
        }
        Ok(maps)
    }

    /// Backpropagates a gradient on the final map, accumulating parameter
    /// gradients and returning the gradient with respect to the input.
    pub fn backward(&mut self, trace: &ExtractorTrace, grad_final: &Array3<f64>) -> Array3<f64> {
        let mut grad = grad_final.clone();
        for (stage, strace) in self.stages.iter_mut().zip(&trace.stages).rev() {
            for (block, btrace) in stage.blocks.iter_mut().zip(&strace.blocks).rev() {
                grad = block.backward(btrace, &grad);
            }
            grad = stage.norm.backward(&strace.norm, &grad);
            grad = stage.down.backward(&strace.down, &grad);
        }
        grad
    }

    pub fn visit(&mut self, prefix: &str, f: &mut ParamFn<'_>) {
        for (i, stage) in self.stages.iter_mut().enumerate() {
            stage.down.visit(&format!("{prefix}.stage{i}.down"), f);
            stage.norm.visit(&format!("{prefix}.stage{i}.norm"), f);
            for (j, block) in stage.blocks.iter_mut().enumerate() {
                block.visit(&format!("{prefix}.stage{i}.block{j}"), f);
            }
        }
    }
}
