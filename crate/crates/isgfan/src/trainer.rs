//! Training orchestration.
//!
//! One step pairs a labeled source batch with an unlabeled target batch,
//! wires the forward graph of the active variant, computes all losses, and
//! routes gradients per parameter group: the label classifier sees only the
//! classification loss; discriminator heads see only their own losses; the
//! fault-relevant extractor receives classification, orthogonality, and
//! reconstruction gradients plus sign-reversed adversarial gradients through
//! the gradient reversal layer; the fault-irrelevant extractor receives
//! orthogonality and reconstruction gradients minus the label-discriminator
//! gradient. Dynamic loss weights are recomputed every step before
//! backpropagation and treated as constants by the gradient.

use std::path::Path;
use std::time::Instant;

use ndarray::{concatenate, Array2, Array3, Axis};
use rand::seq::SliceRandom;

use crate::attention::{AttentionConfig, AttentionState};
use crate::balancer::{assemble_total_loss, BalancerConfig, EffectiveWeights};
use crate::config::ExperimentConfig;
pub use crate::config::TrainingSection as TrainingConfig;
use crate::error::{Error, Result};
use crate::evaluator;
use crate::metrics::{AttentionTrace, MetricRecord, MetricsWriter};
use crate::nn::grl::{grl_backward, grl_forward, GrlCoefficient};
use crate::nn::heads::MlpTrace;
use crate::nn::layers::{global_avg_pool, global_avg_pool_backward};
use crate::nn::{AdamW, IsgfanModel, ParamGroup};
use crate::objectives::{
    cross_entropy, cross_entropy_grad, domain_bce, domain_bce_grad, focal_domain_loss,
    normalize_rows_backward, one_hot, orthogonality_grad, orthogonality_loss,
    reconstruction_grad, reconstruction_loss, FeatureMatrix, LossBundle,
};
use crate::pseudo::{assign_pseudo_labels, softmax_backward, softmax_probs, PseudoLabelConfig};
use crate::seed;
use crate::signal::{Role, SegmentedDataset, TransferData};

/// Cosine-annealed learning rate between the base and minimum rates.
/// Valid for `0 <= epoch <= epochs`.
pub fn lr_at(epoch: usize, cfg: &TrainingConfig) -> Result<f64> {
    if epoch > cfg.epochs {
        return Err(Error::InvalidConfig(format!(
            "epoch {epoch} out of range for {} epochs",
            cfg.epochs
        )));
    }
    if cfg.epochs == 0 {
        return Ok(cfg.base_lr);
    }
    let progress = epoch as f64 / cfg.epochs as f64;
    Ok(cfg.min_lr
        + 0.5 * (cfg.base_lr - cfg.min_lr) * (1.0 + (std::f64::consts::PI * progress).cos()))
}

/// Which loss terms participate in a step. Disabled terms are skipped
/// entirely (zero loss, no gradient); training uses the default of all-on.
#[derive(Debug, Clone, Copy)]
pub struct LossMask {
    pub lc: bool,
    pub gd: bool,
    pub fd: bool,
    pub orth: bool,
    pub recon: bool,
    pub ld: bool,
}

impl Default for LossMask {
    fn default() -> Self {
        Self {
            lc: true,
            gd: true,
            fd: true,
            orth: true,
            recon: true,
            ld: true,
        }
    }
}

impl LossMask {
    pub fn none() -> Self {
        Self {
            lc: false,
            gd: false,
            fd: false,
            orth: false,
            recon: false,
            ld: false,
        }
    }

    pub fn only(name: &str) -> Self {
        let mut m = Self::none();
        match name {
            "lc" => m.lc = true,
            "gd" => m.gd = true,
            "fd" => m.fd = true,
            "orth" => m.orth = true,
            "recon" => m.recon = true,
            "ld" => m.ld = true,
            other => panic!("unknown loss {other}"),
        }
        m
    }
}

/// Fixed weights for gradient checks: both the effective loss weights and the
/// attention weights are held constant so the total is a smooth function of
/// the parameters.
#[derive(Debug, Clone)]
pub struct FrozenWeights {
    pub effective: EffectiveWeights,
    pub attention: Vec<f64>,
}

/// Step controls used by tests; training uses the default.
#[derive(Debug, Clone, Default)]
pub struct StepOptions {
    pub mask: LossMask,
    /// Replace gradient reversal with identity (scaling by `+lambda`).
    pub grl_identity: bool,
    /// Hold effective and attention weights fixed; skips the attention
    /// state update.
    pub frozen: Option<FrozenWeights>,
    /// Compute gradients but skip the optimizer update.
    pub skip_update: bool,
}

impl StepOptions {
    fn is_default_training(&self) -> bool {
        self.frozen.is_none()
    }
}

/// Telemetry of one training step.
#[derive(Debug, Clone)]
pub struct StepOutput {
    pub losses: LossBundle,
    pub total: f64,
    pub weights: EffectiveWeights,
    pub attention_weights: Vec<f64>,
    pub accepted_pseudo: usize,
}

/// Total loss under fixed effective weights.
pub fn total_with_weights(bundle: &LossBundle, w: &EffectiveWeights) -> f64 {
    bundle.l_lc
        + w.delta * bundle.l_gd
        + w.zeta * bundle.l_fd
        + w.gamma * bundle.l_orth
        + w.mu * bundle.l_recon
        + w.omega * bundle.l_ld
}

struct ClassSdcState {
    rows_s: Vec<usize>,
    rows_t: Vec<usize>,
    cache_s: Option<crate::nn::layers::DenseCache>,
    cache_t: Option<crate::nn::layers::DenseCache>,
    probs_s: Vec<f64>,
    probs_t: Vec<f64>,
}

struct SdcPhase {
    per_class: Vec<ClassSdcState>,
    counts: Vec<usize>,
    weights: Vec<f64>,
    accepted: usize,
}

struct GdPhase {
    trace_s: MlpTrace,
    trace_t: MlpTrace,
    d_s: Vec<f64>,
    d_t: Vec<f64>,
}

struct OrthPhase {
    raw_fr: Array2<f64>,
    raw_fi: Array2<f64>,
    norms_fr: ndarray::Array1<f64>,
    norms_fi: ndarray::Array1<f64>,
    norm_fr: FeatureMatrix,
    norm_fi: FeatureMatrix,
    map_dims: (usize, usize, usize),
}

struct ReconPhase {
    trace: crate::nn::decoder::DecoderTrace,
    x_flat: Array2<f64>,
    xhat_flat: Array2<f64>,
}

/// Everything the backward pass needs from the forward pass.
struct ForwardState {
    losses: LossBundle,
    map_len: usize,
    pooled_fr_s: Array2<f64>,
    trace_fr_s: crate::nn::extractor::ExtractorTrace,
    lc_trace: MlpTrace,
    probs_s: Array2<f64>,
    onehot: Array2<f64>,
    target: Option<(crate::nn::extractor::ExtractorTrace, Array2<f64>)>,
    gd: Option<GdPhase>,
    sdc: Option<SdcPhase>,
    fife: Option<(crate::nn::extractor::ExtractorTrace, Array2<f64>)>,
    ld: Option<(MlpTrace, Array2<f64>)>,
    orth: Option<OrthPhase>,
    recon: Option<ReconPhase>,
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

fn gather_rows(features: &Array2<f64>, rows: &[usize]) -> Array2<f64> {
    let mut out = Array2::zeros((rows.len(), features.ncols()));
    for (bi, &i) in rows.iter().enumerate() {
        out.row_mut(bi).assign(&features.row(i));
    }
    out
}

/// Forward graph of one step. `attention` is mutated (EMA update) unless the
/// options freeze the weights.
fn forward_pass(
    model: &IsgfanModel,
    src_x: &Array3<f64>,
    src_y: &[u16],
    tgt_x: Option<&Array3<f64>>,
    pseudo_cfg: &PseudoLabelConfig,
    attention: &mut AttentionState,
    opts: &StepOptions,
) -> Result<ForwardState> {
    if src_x.dim().0 == 0 {
        return Err(Error::EmptyBatch);
    }
    if src_x.dim().0 != src_y.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} source samples vs {} labels",
            src_x.dim().0,
            src_y.len()
        )));
    }
    let c = model.num_classes;
    let mut losses = LossBundle::default();

    // Fault-relevant features, both domains.
    let (map_fr_s, trace_fr_s) = model.frfe.forward(src_x)?;
    let map_len = map_fr_s.dim().2;
    let pooled_fr_s = global_avg_pool(&map_fr_s);
    let target = match tgt_x {
        Some(x) if model.variant.has_gdc() => {
            let (map, trace) = model.frfe.forward(x)?;
            Some((trace, global_avg_pool(&map)))
        }
        _ => None,
    };

    // Label classification on source.
    let (logits_s, lc_trace) = model.lc.forward(&pooled_fr_s)?;
    let probs_s = softmax_probs(&logits_s);
    let onehot = one_hot(src_y, c);
    if opts.mask.lc {
        losses.l_lc = cross_entropy(&probs_s, &onehot)?;
    }

    // Global domain classifier over both domains.
    let gd = match (&model.gdc, &target) {
        (Some(gdc), Some((_, pooled_fr_t))) if opts.mask.gd => {
            let (logit_s, trace_s) = gdc.forward(&grl_forward(&pooled_fr_s))?;
            let (logit_t, trace_t) = gdc.forward(&grl_forward(pooled_fr_t))?;
            let d_s: Vec<f64> = logit_s.column(0).iter().map(|&z| sigmoid(z)).collect();
            let d_t: Vec<f64> = logit_t.column(0).iter().map(|&z| sigmoid(z)).collect();
            losses.l_gd = domain_bce(&d_s, &d_t)?;
            Some(GdPhase {
                trace_s,
                trace_t,
                d_s,
                d_t,
            })
        }
        _ => None,
    };

    // Focal branch: pseudo-labels gate the target side of each subdomain
    // classifier; true labels route the source side.
    let sdc = match (&model.sdcs, &target) {
        (Some(sdcs), Some((_, pooled_fr_t))) if opts.mask.fd => {
            let (logits_t, _) = model.lc.forward(pooled_fr_t)?;
            let pseudo = assign_pseudo_labels(&logits_t, pseudo_cfg)?;
            let accepted = pseudo.accepted_count();
            if accepted == 0 {
                // No usable pseudo-labels: the focal loss sits out this step
                // and the attention state stays untouched.
                None
            } else {
                let mut per_class = Vec::with_capacity(c);
                let mut per_loss = vec![0.0; c];
                let mut counts = vec![0usize; c];
                for class in 0..c {
                    let rows_s: Vec<usize> = src_y
                        .iter()
                        .enumerate()
                        .filter(|(_, &y)| usize::from(y) == class)
                        .map(|(i, _)| i)
                        .collect();
                    let rows_t = pseudo.accepted_of_class(class as u16);
                    counts[class] = rows_s.len() + rows_t.len();
                    let mut state = ClassSdcState {
                        rows_s,
                        rows_t,
                        cache_s: None,
                        cache_t: None,
                        probs_s: Vec::new(),
                        probs_t: Vec::new(),
                    };
                    if counts[class] > 0 {
                        if !state.rows_s.is_empty() {
                            let sub = gather_rows(&pooled_fr_s, &state.rows_s);
                            let (logit, cache) = sdcs[class].forward(&grl_forward(&sub))?;
                            state.probs_s = logit.column(0).iter().map(|&z| sigmoid(z)).collect();
                            state.cache_s = Some(cache);
                        }
                        if !state.rows_t.is_empty() {
                            let sub = gather_rows(pooled_fr_t, &state.rows_t);
                            let (logit, cache) = sdcs[class].forward(&grl_forward(&sub))?;
                            state.probs_t = logit.column(0).iter().map(|&z| sigmoid(z)).collect();
                            state.cache_t = Some(cache);
                        }
                        per_loss[class] = domain_bce(&state.probs_s, &state.probs_t)?;
                    }
                    per_class.push(state);
                }
                let weights = match &opts.frozen {
                    Some(f) => f.attention.clone(),
                    None => attention.compute_weights_and_update(&per_loss, &counts)?,
                };
                losses.l_fd = focal_domain_loss(&per_loss, &weights)?;
                Some(SdcPhase {
                    per_class,
                    counts,
                    weights,
                    accepted,
                })
            }
        }
        _ => None,
    };

    // Information-separation branch on the source domain.
    let mut fife = None;
    let mut ld = None;
    let mut orth = None;
    let mut recon = None;
    if let Some(fife_net) = &model.fife {
        let (map_fi_s, trace_fi_s) = fife_net.forward(src_x)?;
        let pooled_fi_s = global_avg_pool(&map_fi_s);

        if let Some(ld_net) = &model.ld {
            if opts.mask.ld {
                let (ld_logits, ld_trace) = ld_net.forward(&grl_forward(&pooled_fi_s))?;
                let probs_ld = softmax_probs(&ld_logits);
                losses.l_ld = cross_entropy(&probs_ld, &onehot)?;
                ld = Some((ld_trace, probs_ld));
            }
        }

        if opts.mask.orth {
            // Channel rows over the whole stage-4 map (batch and positions
            // flattened) keep both Gram targets attainable.
            let fm_fr = FeatureMatrix::from_map(&map_fr_s);
            let fm_fi = FeatureMatrix::from_map(&map_fi_s);
            let (norm_fr, norms_fr) = fm_fr.normalize_rows();
            let (norm_fi, norms_fi) = fm_fi.normalize_rows();
            let (_, _, l_orth) = orthogonality_loss(&norm_fr, &norm_fi)?;
            losses.l_orth = l_orth;
            orth = Some(OrthPhase {
                raw_fr: fm_fr.values,
                raw_fi: fm_fi.values,
                norms_fr,
                norms_fi,
                norm_fr,
                norm_fi,
                map_dims: map_fr_s.dim(),
            });
        }

        if let Some(decoder) = &model.decoder {
            if opts.mask.recon {
                let concat = concatenate(Axis(1), &[map_fr_s.view(), map_fi_s.view()])
                    .expect("matching batch and length");
                let (x_hat, trace) = decoder.forward(&concat)?;
                let x_flat = src_x.index_axis(Axis(1), 0).to_owned();
                let xhat_flat = x_hat.index_axis(Axis(1), 0).to_owned();
                losses.l_recon = reconstruction_loss(&x_flat, &xhat_flat)?;
                recon = Some(ReconPhase {
                    trace,
                    x_flat,
                    xhat_flat,
                });
            }
        }
        fife = Some((trace_fi_s, pooled_fi_s));
    }

    if !losses.is_finite() {
        return Err(Error::NonFinite(format!("loss bundle {losses:?}")));
    }
    Ok(ForwardState {
        losses,
        map_len,
        pooled_fr_s,
        trace_fr_s,
        lc_trace,
        probs_s,
        onehot,
        target,
        gd,
        sdc,
        fife,
        ld,
        orth,
        recon,
    })
}

/// The trainer: model, optimizer, attention state, and step plumbing.
pub struct Trainer {
    pub model: IsgfanModel,
    pub optimizer: AdamW,
    pub attention: AttentionState,
    pub balancer: BalancerConfig,
    pub pseudo: PseudoLabelConfig,
    pub grl: GrlCoefficient,
    /// Per-module multipliers on the shared learning-rate schedule.
    pub group_lr_scale: Vec<(crate::nn::ParamGroup, f64)>,
    last_attention: Vec<f64>,
}

impl Trainer {
    pub fn new(
        model: IsgfanModel,
        weight_decay: f64,
        attention_cfg: AttentionConfig,
        balancer: BalancerConfig,
        pseudo: PseudoLabelConfig,
    ) -> Self {
        let c = model.num_classes;
        Self {
            model,
            optimizer: AdamW::new(weight_decay),
            attention: AttentionState::new(c, attention_cfg),
            balancer,
            pseudo,
            grl: GrlCoefficient::default(),
            group_lr_scale: Vec::new(),
            last_attention: vec![1.0 / c as f64; c],
        }
    }

    /// Loss values at the current parameters without touching any state
    /// (the attention EMA update runs on a throwaway clone). Also returns
    /// the attention weights the step would use, when the focal branch is
    /// active. Freeze those weights via [`StepOptions::frozen`] to make the
    /// total a smooth function of the parameters for gradient checks.
    pub fn probe(
        &self,
        src_x: &Array3<f64>,
        src_y: &[u16],
        tgt_x: Option<&Array3<f64>>,
        opts: &StepOptions,
    ) -> Result<(LossBundle, Option<Vec<f64>>)> {
        let mut attention = self.attention.clone();
        let state = forward_pass(
            &self.model,
            src_x,
            src_y,
            tgt_x,
            &self.pseudo,
            &mut attention,
            opts,
        )?;
        let weights = state.sdc.as_ref().map(|s| s.weights.clone());
        Ok((state.losses, weights))
    }

    /// One training step. Computes every active loss, assembles the dynamic
    /// weights, backpropagates through the routed graph, and (unless
    /// disabled) applies one optimizer update.
    pub fn training_step(
        &mut self,
        src_x: &Array3<f64>,
        src_y: &[u16],
        tgt_x: Option<&Array3<f64>>,
        lr: f64,
        opts: &StepOptions,
    ) -> Result<StepOutput> {
        self.model.zero_grads();
        let state = forward_pass(
            &self.model,
            src_x,
            src_y,
            tgt_x,
            &self.pseudo,
            &mut self.attention,
            opts,
        )?;

        let (total, eff) = match &opts.frozen {
            Some(f) => (total_with_weights(&state.losses, &f.effective), f.effective),
            None => assemble_total_loss(&state.losses, &self.balancer),
        };
        if !total.is_finite() {
            return Err(Error::NonFinite(format!("total loss (bundle {:?})", state.losses)));
        }

        let attention_weights = match &state.sdc {
            Some(s) => s.weights.clone(),
            None => self.last_attention.clone(),
        };
        let accepted = state.sdc.as_ref().map_or(0, |s| s.accepted);

        self.backward_pass(&state, &eff, opts)?;

        if !opts.skip_update {
            let scales = std::mem::take(&mut self.group_lr_scale);
            self.optimizer.step_scaled(&mut self.model, lr, &scales);
            self.group_lr_scale = scales;
        }
        if opts.is_default_training() {
            self.last_attention = attention_weights.clone();
        }

        Ok(StepOutput {
            losses: state.losses,
            total,
            weights: eff,
            attention_weights,
            accepted_pseudo: accepted,
        })
    }

    fn backward_pass(
        &mut self,
        state: &ForwardState,
        eff: &EffectiveWeights,
        opts: &StepOptions,
    ) -> Result<()> {
        let model = &mut self.model;
        let (batch, feat) = state.pooled_fr_s.dim();
        let mut d_pooled_fr_s = Array2::zeros((batch, feat));
        let mut d_pooled_fr_t = state
            .target
            .as_ref()
            .map(|(_, pooled)| Array2::zeros(pooled.dim()));
        let mut d_map_fr_s: Option<Array3<f64>> = None;
        let mut d_map_fi_s: Option<Array3<f64>> = None;
        let mut d_pooled_fi_s = state
            .fife
            .as_ref()
            .map(|(_, pooled)| Array2::zeros(pooled.dim()));

        let reverse = |g: &Array2<f64>, coeff: GrlCoefficient, identity: bool| -> Array2<f64> {
            if identity {
                g.mapv(|v| coeff.lambda * v)
            } else {
                grl_backward(g, coeff)
            }
        };
        let coeff = self.grl;

        // Classification loss -> LC head and fault-relevant extractor.
        if opts.mask.lc {
            let dprobs = cross_entropy_grad(&state.probs_s, &state.onehot);
            let dlogits = softmax_backward(&state.probs_s, &dprobs);
            let g = model.lc.backward(&state.lc_trace, &dlogits);
            d_pooled_fr_s += &g;
        }

        // Global domain loss -> GDC head (positive) and extractor (reversed).
        if let Some(gd) = &state.gd {
            let gdc = model.gdc.as_mut().expect("gd phase implies gdc");
            let (gs, gt) = domain_bce_grad(&gd.d_s, &gd.d_t);
            let dlogit_s = Array2::from_shape_fn((gd.d_s.len(), 1), |(i, _)| {
                eff.delta * gs[i] * gd.d_s[i] * (1.0 - gd.d_s[i])
            });
            let dlogit_t = Array2::from_shape_fn((gd.d_t.len(), 1), |(i, _)| {
                eff.delta * gt[i] * gd.d_t[i] * (1.0 - gd.d_t[i])
            });
            let din_s = gdc.backward(&gd.trace_s, &dlogit_s);
            let din_t = gdc.backward(&gd.trace_t, &dlogit_t);
            d_pooled_fr_s += &reverse(&din_s, coeff, opts.grl_identity);
            if let Some(d_t) = d_pooled_fr_t.as_mut() {
                *d_t += &reverse(&din_t, coeff, opts.grl_identity);
            }
        }

        // Focal loss -> each SDC head (positive) and extractor (reversed),
        // scaled by the attention weights.
        if let Some(sdc) = &state.sdc {
            let sdcs = model.sdcs.as_mut().expect("sdc phase implies sdcs");
            for (class, cls) in sdc.per_class.iter().enumerate() {
                if sdc.counts[class] == 0 {
                    continue;
                }
                let scale = eff.zeta * sdc.weights[class];
                if scale == 0.0 {
                    continue;
                }
                let (gs, gt) = domain_bce_grad(&cls.probs_s, &cls.probs_t);
                if let Some(cache) = &cls.cache_s {
                    let dlogit = Array2::from_shape_fn((cls.probs_s.len(), 1), |(i, _)| {
                        scale * gs[i] * cls.probs_s[i] * (1.0 - cls.probs_s[i])
                    });
                    let din = sdcs[class].backward(cache, &dlogit);
                    let din = reverse(&din, coeff, opts.grl_identity);
                    for (bi, &row) in cls.rows_s.iter().enumerate() {
                        let mut dst = d_pooled_fr_s.row_mut(row);
                        dst += &din.row(bi);
                    }
                }
                if let Some(cache) = &cls.cache_t {
                    let dlogit = Array2::from_shape_fn((cls.probs_t.len(), 1), |(i, _)| {
                        scale * gt[i] * cls.probs_t[i] * (1.0 - cls.probs_t[i])
                    });
                    let din = sdcs[class].backward(cache, &dlogit);
                    let din = reverse(&din, coeff, opts.grl_identity);
                    if let Some(d_t) = d_pooled_fr_t.as_mut() {
                        for (bi, &row) in cls.rows_t.iter().enumerate() {
                            let mut dst = d_t.row_mut(row);
                            dst += &din.row(bi);
                        }
                    }
                }
            }
        }

        // Label-discriminator loss -> LD head (positive) and fault-irrelevant
        // extractor (reversed).
        if let Some((ld_trace, probs_ld)) = &state.ld {
            let ld = model.ld.as_mut().expect("ld phase implies ld");
            let mut dprobs = cross_entropy_grad(probs_ld, &state.onehot);
            dprobs.mapv_inplace(|v| eff.omega * v);
            let dlogits = softmax_backward(probs_ld, &dprobs);
            let din = ld.backward(ld_trace, &dlogits);
            if let Some(d_fi) = d_pooled_fi_s.as_mut() {
                *d_fi += &reverse(&din, coeff, opts.grl_identity);
            }
        }

        // Orthogonality -> both extractors' stage-4 maps through the row
        // normalization.
        if let Some(orth) = &state.orth {
            let (g_fr, g_fi) = orthogonality_grad(&orth.norm_fr, &orth.norm_fi);
            let g_fr = normalize_rows_backward(
                &orth.raw_fr,
                &orth.norms_fr,
                &g_fr.mapv(|v| eff.gamma * v),
            );
            let g_fi = normalize_rows_backward(
                &orth.raw_fi,
                &orth.norms_fi,
                &g_fi.mapv(|v| eff.gamma * v),
            );
            let add_fr = crate::objectives::map_grad_from_matrix(&g_fr, orth.map_dims);
            match d_map_fr_s.as_mut() {
                Some(m) => *m += &add_fr,
                None => d_map_fr_s = Some(add_fr),
            }
            let add_fi = crate::objectives::map_grad_from_matrix(&g_fi, orth.map_dims);
            match d_map_fi_s.as_mut() {
                Some(m) => *m += &add_fi,
                None => d_map_fi_s = Some(add_fi),
            }
        }

        // Reconstruction -> decoder and both extractors via the concatenated
        // stage-4 maps.
        if let Some(recon) = &state.recon {
            let decoder = model.decoder.as_mut().expect("recon phase implies decoder");
            let grad_flat = reconstruction_grad(&recon.x_flat, &recon.xhat_flat);
            let (b, l) = grad_flat.dim();
            let mut grad_out = Array3::zeros((b, 1, l));
            for bi in 0..b {
                for t in 0..l {
                    grad_out[(bi, 0, t)] = eff.mu * grad_flat[(bi, t)];
                }
            }
            let d_concat = decoder.backward(&recon.trace, &grad_out);
            let d_fr = d_concat.slice(ndarray::s![.., 0..feat, ..]).to_owned();
            let d_fi = d_concat.slice(ndarray::s![.., feat.., ..]).to_owned();
            match d_map_fr_s.as_mut() {
                Some(m) => *m += &d_fr,
                None => d_map_fr_s = Some(d_fr),
            }
            match d_map_fi_s.as_mut() {
                Some(m) => *m += &d_fi,
                None => d_map_fi_s = Some(d_fi),
            }
        }

        // Fault-relevant extractor: pooled-path gradients plus decoder map
        // gradients, source and target traces.
        let mut d_map = global_avg_pool_backward(&d_pooled_fr_s, state.map_len);
        if let Some(extra) = &d_map_fr_s {
            d_map += extra;
        }
        model.frfe.backward(&state.trace_fr_s, &d_map);
        if let (Some((trace_t, _)), Some(d_t)) = (&state.target, &d_pooled_fr_t) {
            if d_t.iter().any(|&v| v != 0.0) {
                let d_map_t = global_avg_pool_backward(d_t, state.map_len);
                model.frfe.backward(trace_t, &d_map_t);
            }
        }

        // Fault-irrelevant extractor.
        if let (Some((trace_fi, _)), Some(d_fi_pooled)) = (&state.fife, &d_pooled_fi_s) {
            let mut d_map_fi = global_avg_pool_backward(d_fi_pooled, state.map_len);
            if let Some(extra) = &d_map_fi_s {
                d_map_fi += extra;
            }
            let has_signal =
                d_map_fi.iter().any(|&v| v != 0.0) || d_fi_pooled.iter().any(|&v| v != 0.0);
            if has_signal {
                model.fife.as_mut().expect("fife present").backward(trace_fi, &d_map_fi);
            }
        }

        Ok(())
    }
}

// ── Experiment driver ──────────────────────────────────────────────────────

/// Result of one experiment run.
#[derive(Debug, Clone, serde::Serialize)]
pub struct ExperimentReport {
    pub task: String,
    pub variant: String,
    pub snr_db: f64,
    pub seed: u64,
    pub epochs: usize,
    /// `(epoch, target-test accuracy, source-train accuracy)` at every
    /// evaluation point.
    pub eval_points: Vec<(usize, f64, f64)>,
    pub final_accuracy: f64,
    pub best_accuracy: f64,
    pub best_epoch: usize,
    pub num_test_samples: usize,
    pub wall_clock_secs: f64,
    /// Byte-exact echo of the resolved configuration.
    pub config_echo: String,
}

fn gather_batch(samples: &Array2<f64>, idx: &[usize]) -> Array3<f64> {
    let l = samples.ncols();
    let mut x = Array3::zeros((idx.len(), 1, l));
    for (bi, &i) in idx.iter().enumerate() {
        x.index_axis_mut(Axis(0), bi)
            .index_axis_mut(Axis(0), 0)
            .assign(&samples.row(i));
    }
    x
}

/// Shuffled index stream that reshuffles each time it is exhausted.
struct IndexStream {
    n: usize,
    order: Vec<usize>,
    cursor: usize,
    rng: rand_chacha::ChaCha8Rng,
}

impl IndexStream {
    fn new(n: usize, seed_value: u64) -> Self {
        let mut s = Self {
            n,
            order: (0..n).collect(),
            cursor: 0,
            rng: seed::rng(seed_value),
        };
        s.reshuffle();
        s
    }

    fn reshuffle(&mut self) {
        self.order = (0..self.n).collect();
        self.order.shuffle(&mut self.rng);
        self.cursor = 0;
    }

    fn take(&mut self, count: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(count);
        while out.len() < count {
            if self.cursor == self.n {
                self.reshuffle();
            }
            out.push(self.order[self.cursor]);
            self.cursor += 1;
        }
        out
    }
}

/// Trains on an assembled transfer task and writes run artifacts (metrics
/// stream, attention trace, confusion matrix, embeddings, checkpoints,
/// report, config echo) into `out_dir` when given.
pub fn run_with_data(
    cfg: &ExperimentConfig,
    data: &TransferData,
    seed_value: u64,
    out_dir: Option<&Path>,
) -> Result<ExperimentReport> {
    let start = Instant::now();
    let num_classes = data.source_train.num_classes;
    if data.source_train.role != Role::SourceTrain {
        return Err(Error::InvalidConfig("source_train role mismatch".into()));
    }
    let model = IsgfanModel::build_variant(
        cfg.model.variant,
        cfg.arch(),
        num_classes,
        seed::derive(seed_value, b"init"),
    )?;
    let mut trainer = Trainer::new(
        model,
        cfg.training.weight_decay,
        cfg.attention,
        cfg.balancer,
        cfg.pseudo,
    );
    for (name, scale) in &cfg.training.group_lr_scale {
        let group = ParamGroup::ALL
            .into_iter()
            .find(|g| g.as_str() == name)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown parameter group `{name}`")))?;
        trainer.group_lr_scale.push((group, *scale));
    }

    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
    }
    let mut metrics = match out_dir {
        Some(dir) => Some(MetricsWriter::create(&dir.join("metrics.jsonl"))?),
        None => None,
    };
    let mut trace = match out_dir {
        Some(dir) => Some(AttentionTrace::create(
            &dir.join("attention_trace.csv"),
            num_classes,
        )?),
        None => None,
    };

    let training = &cfg.training;
    let n_src = data.source_train.len();
    let n_tgt = data.target_train.len();
    let batch = training.batch_size.min(n_src.max(2));
    let steps_per_epoch = (n_src / batch).max(1);
    let labels = data
        .source_train
        .labels
        .as_ref()
        .ok_or_else(|| Error::MissingData("source labels".into()))?;

    let mut src_stream = IndexStream::new(n_src, seed::derive(seed_value, b"src-order"));
    let mut tgt_stream = if n_tgt > 0 {
        Some(IndexStream::new(n_tgt, seed::derive(seed_value, b"tgt-order")))
    } else {
        None
    };

    let eval_batch = 64;
    let mut eval_points = Vec::new();
    let mut best_accuracy = f64::NEG_INFINITY;
    let mut best_epoch = 0;
    let opts = StepOptions::default();

    let evaluate = |trainer: &mut Trainer,
                        epoch: usize,
                        metrics: &mut Option<MetricsWriter>,
                        eval_points: &mut Vec<(usize, f64, f64)>,
                        best_accuracy: &mut f64,
                        best_epoch: &mut usize|
     -> Result<()> {
        let acc = evaluator::evaluate_accuracy(&trainer.model, &data.target_test, eval_batch)?;
        let src_acc = evaluator::evaluate_accuracy(&trainer.model, &data.source_train, eval_batch)?;
        eval_points.push((epoch, acc, src_acc));
        if let Some(m) = metrics {
            m.write(&MetricRecord::Eval {
                epoch,
                accuracy: acc,
                source_accuracy: src_acc,
            })?;
        }
        if acc > *best_accuracy {
            *best_accuracy = acc;
            *best_epoch = epoch;
            if let Some(dir) = out_dir {
                trainer.model.save_checkpoint(&dir.join("checkpoint_best.ckpt"))?;
            }
        }
        Ok(())
    };

    // Untrained evaluation anchors epoch 0.
    evaluate(
        &mut trainer,
        0,
        &mut metrics,
        &mut eval_points,
        &mut best_accuracy,
        &mut best_epoch,
    )?;

    for epoch in 0..training.epochs {
        let lr = lr_at(epoch, training)?;
        for step in 0..steps_per_epoch {
            let src_idx = src_stream.take(batch);
            let src_x = gather_batch(&data.source_train.samples, &src_idx);
            let src_y: Vec<u16> = src_idx.iter().map(|&i| labels[i]).collect();
            let tgt_x = tgt_stream
                .as_mut()
                .map(|s| gather_batch(&data.target_train.samples, &s.take(batch)));
            let out = trainer.training_step(&src_x, &src_y, tgt_x.as_ref(), lr, &opts)?;
            if let Some(m) = &mut metrics {
                m.write(&MetricRecord::Step {
                    epoch,
                    step,
                    losses: &out.losses,
                    total: out.total,
                    weights: &out.weights,
                    attention: &out.attention_weights,
                    accepted_pseudo: out.accepted_pseudo,
                    lr,
                })?;
            }
            if let Some(t) = &mut trace {
                t.write(epoch, step, &out.attention_weights)?;
            }
        }
        let is_last = epoch + 1 == training.epochs;
        if (epoch + 1) % training.eval_interval.max(1) == 0 || is_last {
            evaluate(
                &mut trainer,
                epoch + 1,
                &mut metrics,
                &mut eval_points,
                &mut best_accuracy,
                &mut best_epoch,
            )?;
        }
    }

    // Final artifacts.
    let test_labels = data
        .target_test
        .labels
        .as_ref()
        .ok_or_else(|| Error::MissingData("target test labels".into()))?;
    let inference = evaluator::infer(&trainer.model, &data.target_test, eval_batch)?;
    let final_accuracy = evaluator::accuracy(&inference.predictions, test_labels)?;
    let confusion = evaluator::confusion_matrix(&inference.predictions, test_labels, num_classes)?;

    if let Some(dir) = out_dir {
        trainer.model.save_checkpoint(&dir.join("checkpoint_final.ckpt"))?;
        evaluator::write_confusion(&dir.join("confusion.csv"), &confusion)?;

        let src_inference = evaluator::infer(&trainer.model, &data.source_train, eval_batch)?;
        let mut features = src_inference.features;
        features.append(Axis(0), inference.features.view()).expect("same width");
        let mut emb_labels: Vec<u16> = labels.clone();
        emb_labels.extend_from_slice(test_labels);
        let mut domains: Vec<&str> = vec!["source"; n_src];
        domains.extend(std::iter::repeat_n("target", data.target_test.len()));
        evaluator::export_embeddings(&dir.join("embeddings.csv"), &features, &emb_labels, &domains)?;

        std::fs::write(dir.join("config.toml"), cfg.to_toml_string())?;
        if let Some(m) = &mut metrics {
            m.flush()?;
        }
        if let Some(t) = &mut trace {
            t.flush()?;
        }
    }

    let report = ExperimentReport {
        task: cfg.task_name(),
        variant: cfg.model.variant.as_str().to_string(),
        snr_db: cfg.noise.snr_db,
        seed: seed_value,
        epochs: training.epochs,
        eval_points,
        final_accuracy,
        best_accuracy,
        best_epoch,
        num_test_samples: data.target_test.len(),
        wall_clock_secs: start.elapsed().as_secs_f64(),
        config_echo: cfg.to_toml_string(),
    };
    if let Some(dir) = out_dir {
        write_report(&dir.join("report.txt"), &report)?;
    }
    Ok(report)
}

/// Plain `key: value` report summary.
pub fn write_report(path: &Path, report: &ExperimentReport) -> Result<()> {
    use std::io::Write;
    let mut f = std::fs::File::create(path)?;
    writeln!(f, "task: {}", report.task)?;
    writeln!(f, "variant: {}", report.variant)?;
    writeln!(f, "snr_db: {}", report.snr_db)?;
    writeln!(f, "seed: {}", report.seed)?;
    writeln!(f, "epochs: {}", report.epochs)?;
    writeln!(f, "num_test_samples: {}", report.num_test_samples)?;
    writeln!(f, "final_accuracy: {:.6}", report.final_accuracy)?;
    writeln!(f, "best_accuracy: {:.6}", report.best_accuracy)?;
    writeln!(f, "best_epoch: {}", report.best_epoch)?;
    writeln!(f, "wall_clock_secs: {:.3}", report.wall_clock_secs)?;
    for (epoch, acc, src_acc) in &report.eval_points {
        writeln!(f, "eval_{epoch}: {acc:.6} (source {src_acc:.6})")?;
    }
    Ok(())
}

/// Loads prepared archives for the configured task and runs one experiment,
/// writing artifacts into the standard run directory.
pub fn run_experiment(cfg: &ExperimentConfig, seed_value: u64) -> Result<ExperimentReport> {
    let data = load_transfer_data(cfg)?;
    let dir = cfg.run_dir(seed_value);
    run_with_data(cfg, &data, seed_value, Some(&dir))
}

/// Builds the three dataset roles from the prepared archives of the
/// configured source and target conditions.
pub fn load_transfer_data(cfg: &ExperimentConfig) -> Result<TransferData> {
    let dir = &cfg.task.data_dir;
    let src_path = dir.join(crate::archive::archive_filename(
        &cfg.task.source,
        cfg.noise.kind,
        cfg.noise.snr_db,
    ));
    let tgt_path = dir.join(crate::archive::archive_filename(
        &cfg.task.target,
        cfg.noise.kind,
        cfg.noise.snr_db,
    ));
    for p in [&src_path, &tgt_path] {
        if !p.exists() {
            return Err(Error::MissingData(format!("archive not found: {}", p.display())));
        }
    }
    let src = crate::archive::read_segment_archive(&src_path)?;
    let tgt = crate::archive::read_segment_archive(&tgt_path)?;
    if src.samples.ncols() != tgt.samples.ncols() || src.num_classes != tgt.num_classes {
        return Err(Error::IncompatibleDomains(format!(
            "{} vs {}",
            src_path.display(),
            tgt_path.display()
        )));
    }
    let src_labels = src
        .labels
        .ok_or_else(|| Error::MissingData("source archive has no labels".into()))?;
    let tgt_labels = tgt
        .labels
        .ok_or_else(|| Error::MissingData("target archive has no labels".into()))?;
    Ok(TransferData {
        source_train: SegmentedDataset::new(
            src.samples,
            Some(src_labels),
            cfg.task.source.clone(),
            Role::SourceTrain,
            src.num_classes,
        )?,
        target_train: SegmentedDataset::new(
            tgt.samples.clone(),
            None,
            cfg.task.target.clone(),
            Role::TargetTrainUnlabeled,
            tgt.num_classes,
        )?,
        target_test: SegmentedDataset::new(
            tgt.samples,
            Some(tgt_labels),
            cfg.task.target.clone(),
            Role::TargetTest,
            tgt.num_classes,
        )?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lr_schedule_endpoints_and_midpoint() {
        let cfg = TrainingConfig {
            epochs: 3500,
            ..Default::default()
        };
        assert_eq!(lr_at(0, &cfg).unwrap(), 1e-4);
        assert!((lr_at(3500, &cfg).unwrap() - 1e-6).abs() < 1e-18);
        let mid = lr_at(1750, &cfg).unwrap();
        assert!((mid - (1e-4 + 1e-6) / 2.0).abs() < 1e-12);
        assert!(lr_at(3501, &cfg).is_err());
    }
}
