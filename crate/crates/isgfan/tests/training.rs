//! Trainer-level behavior: gradient routing across parameter groups, reversal
//! semantics at the GRL, whole-step gradient checks against finite
//! differences, determinism, and experiment plumbing.

mod common;

use common::*;
use isgfan::attention::AttentionConfig;
use isgfan::balancer::{BalancerConfig, EffectiveWeights};
use isgfan::config::ExperimentConfig;
use isgfan::nn::params::ParamEntry;
use isgfan::nn::{ArchConfig, IsgfanModel, ModelVariant, ParamGroup};
use isgfan::pseudo::PseudoLabelConfig;
use isgfan::seed;
use isgfan::signal::{Role, SegmentedDataset, TransferData};
use isgfan::trainer::{
    lr_at, run_with_data, total_with_weights, FrozenWeights, LossMask, StepOptions, Trainer,
    TrainingConfig,
};
use ndarray::{Array2, Array3};

const NUM_CLASSES: usize = 2;
const SEG_LEN: usize = 64;

fn tiny_arch() -> ArchConfig {
    ArchConfig::scaled([2, 3, 4, 6])
}

/// Trainer over the full variant with the label classifier sharpened so the
/// pseudo-label gate accepts confidently classified target samples.
fn toy_trainer(variant: ModelVariant, boost_lc: bool) -> Trainer {
    let model = IsgfanModel::build_variant(variant, tiny_arch(), NUM_CLASSES, 902).unwrap();
    let mut trainer = Trainer::new(
        model,
        0.0,
        AttentionConfig::default(),
        BalancerConfig::default(),
        PseudoLabelConfig::default(),
    );
    if boost_lc {
        // Bias the final classifier layer toward class 0 so target
        // predictions are confident and clear the entropy gate with a wide,
        // perturbation-stable margin.
        let mut names = Vec::new();
        trainer
            .model
            .visit_group(ParamGroup::Lc, &mut |e: ParamEntry| {
                names.push(e.name.clone());
            });
        let last_linear = names
            .iter()
            .filter_map(|n| n.strip_prefix("LC.linear"))
            .filter_map(|n| n.split('.').next()?.parse::<usize>().ok())
            .max()
            .unwrap();
        let bias_name = format!("LC.linear{last_linear}.bias");
        trainer
            .model
            .visit_group(ParamGroup::Lc, &mut |e: ParamEntry| {
                if e.name == bias_name {
                    e.value[0] = 8.0;
                }
            });
    }
    trainer
}

fn toy_batches() -> (Array3<f64>, Vec<u16>, Array3<f64>) {
    let mut rng = seed::rng(555);
    let src = rand_array3(&mut rng, 4, 1, SEG_LEN, 0.8);
    let tgt = rand_array3(&mut rng, 4, 1, SEG_LEN, 0.8);
    let labels = vec![0u16, 1, 0, 1];
    (src, labels, tgt)
}

fn unit_frozen() -> FrozenWeights {
    FrozenWeights {
        effective: EffectiveWeights {
            delta: 1.0,
            zeta: 1.0,
            gamma: 1.0,
            mu: 1.0,
            omega: 1.0,
        },
        attention: vec![1.0 / NUM_CLASSES as f64; NUM_CLASSES],
    }
}

fn collect_group_grads(model: &mut IsgfanModel, group: ParamGroup) -> Vec<f64> {
    let mut out = Vec::new();
    model.visit_group(group, &mut |e: ParamEntry| out.extend_from_slice(e.grad));
    out
}

fn collect_group_values(model: &mut IsgfanModel, group: ParamGroup) -> Vec<f64> {
    let mut out = Vec::new();
    model.visit_group(group, &mut |e: ParamEntry| out.extend_from_slice(e.value));
    out
}

#[test]
fn pseudo_label_gate_accepts_with_boosted_classifier() {
    let mut trainer = toy_trainer(ModelVariant::Full, true);
    let (src, labels, tgt) = toy_batches();
    let opts = StepOptions {
        skip_update: true,
        ..Default::default()
    };
    let out = trainer.training_step(&src, &labels, Some(&tgt), 1e-4, &opts).unwrap();
    assert!(out.accepted_pseudo > 0, "boosted classifier must accept pseudo-labels");
    assert!(out.losses.l_fd > 0.0);
}

/// The 6-loss x 7-group exclusion matrix: backpropagating any single loss
/// leaves exactly zero gradient on every parameter group outside its routing
/// set and nonzero gradient inside it.
#[test]
fn gradient_routing_matrix_is_exact() {
    let (src, labels, tgt) = toy_batches();
    let cases: [(&str, &[ParamGroup]); 6] = [
        ("lc", &[ParamGroup::Lc, ParamGroup::Frfe]),
        ("gd", &[ParamGroup::Gdc, ParamGroup::Frfe]),
        ("fd", &[ParamGroup::Sdc, ParamGroup::Frfe]),
        ("orth", &[ParamGroup::Frfe, ParamGroup::Fife]),
        ("recon", &[ParamGroup::Decoder, ParamGroup::Frfe, ParamGroup::Fife]),
        ("ld", &[ParamGroup::Ld, ParamGroup::Fife]),
    ];
    for (loss, included) in cases {
        let mut trainer = toy_trainer(ModelVariant::Full, true);
        let opts = StepOptions {
            mask: LossMask::only(loss),
            frozen: Some(unit_frozen()),
            skip_update: true,
            ..Default::default()
        };
        trainer
            .training_step(&src, &labels, Some(&tgt), 1e-4, &opts)
            .unwrap();
        for group in ParamGroup::ALL {
            let max = trainer.model.group_grad_max(group).unwrap();
            if included.contains(&group) {
                assert!(max > 0.0, "loss {loss}: group {group:?} should receive gradient");
            } else {
                assert_eq!(max, 0.0, "loss {loss}: group {group:?} must stay untouched");
            }
        }
    }
}

/// Replacing the reversal with identity flips the sign of the adversarial
/// gradient on the extractor bit-for-bit and leaves the discriminator
/// gradient unchanged.
#[test]
fn grl_reversal_flips_extractor_gradient_exactly() {
    let (src, labels, tgt) = toy_batches();
    let mut trainer = toy_trainer(ModelVariant::Full, true);
    let base = StepOptions {
        mask: LossMask::only("gd"),
        frozen: Some(unit_frozen()),
        skip_update: true,
        ..Default::default()
    };
    trainer.training_step(&src, &labels, Some(&tgt), 1e-4, &base).unwrap();
    let frfe_reversed = collect_group_grads(&mut trainer.model, ParamGroup::Frfe);
    let gdc_reversed = collect_group_grads(&mut trainer.model, ParamGroup::Gdc);

    let control = StepOptions {
        grl_identity: true,
        ..base
    };
    trainer.training_step(&src, &labels, Some(&tgt), 1e-4, &control).unwrap();
    let frfe_identity = collect_group_grads(&mut trainer.model, ParamGroup::Frfe);
    let gdc_identity = collect_group_grads(&mut trainer.model, ParamGroup::Gdc);

    assert!(frfe_reversed.iter().any(|&g| g != 0.0));
    for (r, i) in frfe_reversed.iter().zip(&frfe_identity) {
        assert_eq!(*r, -*i, "reversal must negate the extractor gradient exactly");
    }
    for (r, i) in gdc_reversed.iter().zip(&gdc_identity) {
        assert_eq!(*r, *i, "discriminator gradient must not depend on the GRL");
    }
}

/// Whole-step analytic gradients match central finite differences of the
/// frozen-weight total loss for a sample of parameters in every group.
#[test]
fn step_gradients_match_finite_differences() {
    let (src, labels, tgt) = toy_batches();
    let mut trainer = toy_trainer(ModelVariant::Full, true);

    // Freeze the weights the step would use so the total is smooth.
    let base_opts = StepOptions::default();
    let (bundle, attention) = trainer.probe(&src, &labels, Some(&tgt), &base_opts).unwrap();
    let (_, effective) = isgfan::balancer::assemble_total_loss(&bundle, &trainer.balancer);
    let frozen = FrozenWeights {
        effective,
        attention: attention.expect("focal branch active"),
    };
    // Identity-control mode: with the reversal replaced by identity the
    // analytic gradient is the plain gradient of the scalar total, which is
    // what central differences measure. The reversal sign itself is covered
    // by the bit-exact flip test above.
    let opts = StepOptions {
        frozen: Some(frozen.clone()),
        skip_update: true,
        grl_identity: true,
        ..Default::default()
    };
    trainer.training_step(&src, &labels, Some(&tgt), 1e-4, &opts).unwrap();

    for group in ParamGroup::ALL {
        let analytic = collect_group_grads(&mut trainer.model, group);
        let n = analytic.len();
        assert!(n > 0);
        // A deterministic sample of parameter slots per group.
        let stride = 1 + n / 7;
        for slot in (0..n).step_by(stride) {
            let mut cursor = 0usize;
            let mut orig = 0.0;
            trainer.model.visit_group(group, &mut |e: ParamEntry| {
                if slot >= cursor && slot < cursor + e.value.len() {
                    orig = e.value[slot - cursor];
                }
                cursor += e.value.len();
            });
            let numeric = central_diff(
                |v| {
                    let mut cursor = 0usize;
                    trainer.model.visit_group(group, &mut |e: ParamEntry| {
                        if slot >= cursor && slot < cursor + e.value.len() {
                            e.value[slot - cursor] = v;
                        }
                        cursor += e.value.len();
                    });
                    let (bundle, _) = trainer.probe(&src, &labels, Some(&tgt), &opts).unwrap();
                    total_with_weights(&bundle, &frozen.effective)
                },
                orig,
            );
            let mut cursor = 0usize;
            trainer.model.visit_group(group, &mut |e: ParamEntry| {
                if slot >= cursor && slot < cursor + e.value.len() {
                    e.value[slot - cursor] = orig;
                }
                cursor += e.value.len();
            });
            assert_grad(
                analytic[slot],
                numeric,
                1e-3,
                &format!("{group:?} slot {slot}"),
            );
        }
    }
}

#[test]
fn steps_are_bit_deterministic() {
    let (src, labels, tgt) = toy_batches();
    let mut a = toy_trainer(ModelVariant::Full, true);
    let mut b = toy_trainer(ModelVariant::Full, true);
    let opts = StepOptions::default();
    for _ in 0..3 {
        a.training_step(&src, &labels, Some(&tgt), 1e-4, &opts).unwrap();
        b.training_step(&src, &labels, Some(&tgt), 1e-4, &opts).unwrap();
    }
    for group in a.model.present_groups() {
        let va = collect_group_values(&mut a.model, group);
        let vb = collect_group_values(&mut b.model, group);
        assert_eq!(va, vb, "group {group:?} diverged");
    }
}

#[test]
fn empty_pseudo_acceptance_zeroes_focal_loss_and_freezes_attention() {
    // Unboosted classifier: near-uniform target predictions never clear the
    // entropy gate.
    let mut trainer = toy_trainer(ModelVariant::Full, false);
    let (src, labels, tgt) = toy_batches();
    let ema_before = trainer.attention.l_ema.clone();
    let out = trainer
        .training_step(&src, &labels, Some(&tgt), 1e-4, &StepOptions::default())
        .unwrap();
    assert_eq!(out.accepted_pseudo, 0);
    assert_eq!(out.losses.l_fd, 0.0);
    assert_eq!(trainer.attention.l_ema, ema_before);
    assert!(trainer.model.group_grad_max(ParamGroup::Sdc).unwrap() == 0.0);
}

#[test]
fn variant_steps_only_produce_their_losses() {
    let (src, labels, tgt) = toy_batches();
    let opts = StepOptions {
        skip_update: true,
        ..Default::default()
    };

    let mut isfa = toy_trainer(ModelVariant::Isfa, true);
    let out = isfa.training_step(&src, &labels, Some(&tgt), 1e-4, &opts).unwrap();
    assert!(out.losses.l_lc > 0.0 && out.losses.l_gd > 0.0);
    assert_eq!(out.losses.l_fd, 0.0);
    assert_eq!(out.losses.l_orth, 0.0);
    assert_eq!(out.losses.l_recon, 0.0);
    assert_eq!(out.losses.l_ld, 0.0);

    let mut fald = toy_trainer(ModelVariant::Fald, true);
    let out = fald.training_step(&src, &labels, Some(&tgt), 1e-4, &opts).unwrap();
    assert_eq!(out.losses.l_ld, 0.0);
    assert!(out.losses.l_orth > 0.0 && out.losses.l_recon > 0.0);

    let mut source_only = toy_trainer(ModelVariant::SourceOnly, true);
    let out = source_only
        .training_step(&src, &labels, Some(&tgt), 1e-4, &opts)
        .unwrap();
    assert!(out.losses.l_lc > 0.0);
    assert_eq!(out.losses.l_gd, 0.0);
}

#[test]
fn missing_target_batch_disables_adversarial_losses() {
    // Without a target batch the domain losses sit out; the source-side
    // separation branch still runs.
    let mut trainer = toy_trainer(ModelVariant::Full, true);
    let (src, labels, _) = toy_batches();
    let out = trainer
        .training_step(&src, &labels, None, 1e-4, &StepOptions::default())
        .unwrap();
    assert_eq!(out.losses.l_gd, 0.0);
    assert_eq!(out.losses.l_fd, 0.0);
    assert!(out.losses.l_lc > 0.0);
    assert!(out.losses.l_orth > 0.0);
    assert!(out.losses.l_recon > 0.0);
    assert!(out.losses.l_ld > 0.0);
}

#[test]
fn empty_source_batch_is_rejected() {
    let mut trainer = toy_trainer(ModelVariant::Full, false);
    let src = Array3::<f64>::zeros((0, 1, SEG_LEN));
    let err = trainer
        .training_step(&src, &[], None, 1e-4, &StepOptions::default())
        .unwrap_err();
    assert!(matches!(err, isgfan::Error::EmptyBatch));
}

// ── Experiment driver ──────────────────────────────────────────────────────

fn toy_transfer_data(per_class: usize) -> TransferData {
    let mut rng = seed::rng(31);
    let make = |rng: &mut rand_chacha::ChaCha8Rng, shift: f64| -> (Array2<f64>, Vec<u16>) {
        let n = per_class * NUM_CLASSES;
        let mut samples = Array2::zeros((n, SEG_LEN));
        let mut labels = Vec::with_capacity(n);
        for c in 0..NUM_CLASSES {
            for s in 0..per_class {
                let i = c * per_class + s;
                let f = 0.05 * (c + 1) as f64 * shift;
                use rand::Rng;
                let phase: f64 = rng.random::<f64>() * std::f64::consts::TAU;
                for t in 0..SEG_LEN {
                    samples[(i, t)] = (2.0 * std::f64::consts::PI * f * t as f64 + phase).sin()
                        + 0.05 * rng.random::<f64>();
                }
                labels.push(c as u16);
            }
        }
        (samples, labels)
    };
    let (src_samples, src_labels) = make(&mut rng, 1.0);
    let (tgt_samples, tgt_labels) = make(&mut rng, 1.2);
    TransferData {
        source_train: SegmentedDataset::new(
            src_samples,
            Some(src_labels),
            "A",
            Role::SourceTrain,
            NUM_CLASSES,
        )
        .unwrap(),
        target_train: SegmentedDataset::new(
            tgt_samples.clone(),
            None,
            "B",
            Role::TargetTrainUnlabeled,
            NUM_CLASSES,
        )
        .unwrap(),
        target_test: SegmentedDataset::new(
            tgt_samples,
            Some(tgt_labels),
            "B",
            Role::TargetTest,
            NUM_CLASSES,
        )
        .unwrap(),
    }
}

fn toy_config(epochs: usize, variant: &str) -> ExperimentConfig {
    let text = format!(
        r#"
[model]
variant = "{variant}"
stage_channels = [2, 3, 4, 6]

[training]
epochs = {epochs}
batch_size = 8
eval_interval = 2
seed = 7
"#
    );
    ExperimentConfig::from_toml_str(&text).unwrap()
}

#[test]
fn zero_epoch_run_reports_untrained_evaluation() {
    let data = toy_transfer_data(8);
    let cfg = toy_config(0, "full");
    let dir = tempfile::tempdir().unwrap();
    let report = run_with_data(&cfg, &data, 7, Some(dir.path())).unwrap();
    assert_eq!(report.epochs, 0);
    assert_eq!(report.eval_points.len(), 1);
    assert_eq!(report.eval_points[0].0, 0);
    assert!(report.final_accuracy >= 0.0 && report.final_accuracy <= 1.0);

    // Confusion rows sum to the per-class test counts.
    let confusion = std::fs::read_to_string(dir.path().join("confusion.csv")).unwrap();
    for line in confusion.lines() {
        let row_sum: u64 = line.split(',').map(|v| v.parse::<u64>().unwrap()).sum();
        assert_eq!(row_sum, 8);
    }
    for artifact in [
        "metrics.jsonl",
        "attention_trace.csv",
        "embeddings.csv",
        "checkpoint_final.ckpt",
        "checkpoint_best.ckpt",
        "report.txt",
        "config.toml",
    ] {
        assert!(dir.path().join(artifact).exists(), "{artifact} missing");
    }
}

#[test]
fn identical_seeds_give_bit_identical_runs() {
    let data = toy_transfer_data(8);
    let cfg = toy_config(2, "full");
    let d1 = tempfile::tempdir().unwrap();
    let d2 = tempfile::tempdir().unwrap();
    let r1 = run_with_data(&cfg, &data, 11, Some(d1.path())).unwrap();
    let r2 = run_with_data(&cfg, &data, 11, Some(d2.path())).unwrap();
    assert_eq!(r1.final_accuracy, r2.final_accuracy);
    for artifact in [
        "metrics.jsonl",
        "attention_trace.csv",
        "confusion.csv",
        "embeddings.csv",
        "checkpoint_final.ckpt",
    ] {
        let a = std::fs::read(d1.path().join(artifact)).unwrap();
        let b = std::fs::read(d2.path().join(artifact)).unwrap();
        assert_eq!(a, b, "{artifact} differs between identical runs");
    }
}

#[test]
fn lr_at_rejects_out_of_range_epochs() {
    let cfg = TrainingConfig {
        epochs: 10,
        ..Default::default()
    };
    assert!(lr_at(10, &cfg).is_ok());
    assert!(lr_at(11, &cfg).is_err());
}

