//! Signal ingestion: segmentation, SNR-controlled noise injection, and
//! transfer-task assembly.
//!
//! Raw condition-partitioned recordings are cut into fixed-length segments,
//! contaminated with additive noise calibrated to a target signal-to-noise
//! ratio, and arranged into the three roles of an unsupervised transfer task:
//! labeled source training data, unlabeled target training data, and labeled
//! target test data.

use std::collections::BTreeMap;

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;

/// A raw labeled recording from one operating condition.
#[derive(Debug, Clone)]
pub struct SignalRecord {
    /// Sensor samples.
    pub waveform: Vec<f64>,
    /// Class index in `[0, num_classes)`.
    pub class_label: u16,
    /// Operating-condition tag (e.g. load level).
    pub condition_id: String,
    /// Sampling rate in Hz.
    pub sample_rate: f64,
}

/// Additive noise family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseType {
    Gaussian,
    Laplacian,
    Mixed,
}

impl NoiseType {
    pub fn as_str(self) -> &'static str {
        match self {
            NoiseType::Gaussian => "gaussian",
            NoiseType::Laplacian => "laplacian",
            NoiseType::Mixed => "mixed",
        }
    }
}

impl std::str::FromStr for NoiseType {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "gaussian" => Ok(NoiseType::Gaussian),
            "laplacian" => Ok(NoiseType::Laplacian),
            "mixed" => Ok(NoiseType::Mixed),
            other => Err(Error::InvalidConfig(format!("unknown noise type `{other}`"))),
        }
    }
}

/// Noise specification: family, target SNR in dB, and the seed that fully
/// determines the generated sequence for a given length.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub noise_type: NoiseType,
    pub snr_db: f64,
    pub seed: u64,
}

/// Role of a segmented dataset within a transfer task.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    SourceTrain,
    TargetTrainUnlabeled,
    TargetTest,
}

/// Fixed-length segments from one operating condition, with labels present
/// for every role except the unlabeled target training split.
#[derive(Debug, Clone)]
pub struct SegmentedDataset {
    /// `(num_samples, segment_len)`.
    pub samples: Array2<f64>,
    /// One label per row; `None` for the unlabeled target-train role.
    pub labels: Option<Vec<u16>>,
    pub condition_id: String,
    pub role: Role,
    pub num_classes: usize,
}

impl SegmentedDataset {
    /// Validates the role/label pairing and the architecture constraint that
    /// the segment length divides by 32.
    pub fn new(
        samples: Array2<f64>,
        labels: Option<Vec<u16>>,
        condition_id: impl Into<String>,
        role: Role,
        num_classes: usize,
    ) -> Result<Self> {
        let len = samples.ncols();
        if len == 0 || len % 32 != 0 {
            return Err(Error::InvalidLength(format!(
                "segment length {len} must be a positive multiple of 32"
            )));
        }
        match (&labels, role) {
            (None, Role::TargetTrainUnlabeled) => {}
            (Some(l), r) if r != Role::TargetTrainUnlabeled => {
                if l.len() != samples.nrows() {
                    return Err(Error::ShapeMismatch(format!(
                        "{} labels for {} samples",
                        l.len(),
                        samples.nrows()
                    )));
                }
                if let Some(&bad) = l.iter().find(|&&c| usize::from(c) >= num_classes) {
                    return Err(Error::InvalidConfig(format!(
                        "label {bad} out of range for {num_classes} classes"
                    )));
                }
            }
            _ => {
                return Err(Error::InvalidConfig(
                    "labels present iff role is not target_train_unlabeled".into(),
                ))
            }
        }
        Ok(Self {
            samples,
            labels,
            condition_id: condition_id.into(),
            role,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.nrows() == 0
    }

    pub fn segment_len(&self) -> usize {
        self.samples.ncols()
    }
}

/// Labeled segments of one condition before any role assignment or noise.
#[derive(Debug, Clone)]
pub struct ConditionSegments {
    pub condition_id: String,
    /// `(num_samples, segment_len)`.
    pub samples: Array2<f64>,
    pub labels: Vec<u16>,
    pub num_classes: usize,
}

impl ConditionSegments {
    /// Segments every record of a condition and stacks the results.
    /// Records too short to yield a segment are skipped.
    pub fn from_records(
        condition_id: impl Into<String>,
        records: &[SignalRecord],
        length: usize,
        stride: usize,
        num_classes: usize,
    ) -> Result<Self> {
        let condition_id = condition_id.into();
        let mut rows: Vec<f64> = Vec::new();
        let mut labels = Vec::new();
        for rec in records {
            for segment in segment_signal(rec, length, stride) {
                rows.extend_from_slice(&segment);
                labels.push(rec.class_label);
            }
        }
        let n = labels.len();
        let samples = Array2::from_shape_vec((n, length), rows)
            .map_err(|e| Error::ShapeMismatch(e.to_string()))?;
        Ok(Self {
            condition_id,
            samples,
            labels,
            num_classes,
        })
    }

    /// Keep at most `cap` segments per class (in order of appearance).
    pub fn truncate_per_class(&mut self, cap: usize) -> Result<()> {
        let mut counts = vec![0usize; self.num_classes];
        let mut keep = Vec::new();
        for (i, &label) in self.labels.iter().enumerate() {
            let c = usize::from(label);
            if counts[c] < cap {
                counts[c] += 1;
                keep.push(i);
            }
        }
        if counts.iter().any(|&n| n < cap) {
            return Err(Error::MissingData(format!(
                "condition `{}`: fewer than {cap} segments available for some class (got {counts:?})",
                self.condition_id
            )));
        }
        let len = self.samples.ncols();
        let mut rows = Vec::with_capacity(keep.len() * len);
        let mut labels = Vec::with_capacity(keep.len());
        for &i in &keep {
            rows.extend_from_slice(self.samples.row(i).as_slice().expect("contiguous row"));
            labels.push(self.labels[i]);
        }
        self.samples = Array2::from_shape_vec((keep.len(), len), rows)
            .map_err(|e| Error::ShapeMismatch(e.to_string()))?;
        self.labels = labels;
        Ok(())
    }

    /// Set of class labels present.
    pub fn class_set(&self) -> Vec<u16> {
        let mut set: Vec<u16> = self.labels.clone();
        set.sort_unstable();
        set.dedup();
        set
    }
}

/// A source-to-target adaptation task between two operating conditions.
#[derive(Debug, Clone)]
pub struct TransferTask {
    pub source_condition: String,
    pub target_condition: String,
    /// Applied identically in distribution to both domains (independent
    /// realizations per condition).
    pub noise: NoiseSpec,
}

impl TransferTask {
    pub fn new(source: impl Into<String>, target: impl Into<String>, noise: NoiseSpec) -> Result<Self> {
        let source_condition = source.into();
        let target_condition = target.into();
        if source_condition == target_condition {
            return Err(Error::IncompatibleDomains(format!(
                "source and target are both `{source_condition}`"
            )));
        }
        Ok(Self {
            source_condition,
            target_condition,
            noise,
        })
    }

    /// Task name used in output layouts, e.g. `1-2`.
    pub fn name(&self) -> String {
        format!("{}-{}", self.source_condition, self.target_condition)
    }
}

/// The three dataset roles of one assembled transfer task.
#[derive(Debug, Clone)]
pub struct TransferData {
    pub source_train: SegmentedDataset,
    pub target_train: SegmentedDataset,
    pub target_test: SegmentedDataset,
}

/// Cuts a waveform into contiguous fixed-length windows.
///
/// Returns `floor((len - length)/stride) + 1` segments when the waveform is
/// long enough, otherwise an empty list. No padding is applied.
pub fn segment_signal(record: &SignalRecord, length: usize, stride: usize) -> Vec<Vec<f64>> {
    assert!(length >= 1 && stride >= 1, "length and stride must be >= 1");
    let n = record.waveform.len();
    if n < length {
        return Vec::new();
    }
    let count = (n - length) / stride + 1;
    (0..count)
        .map(|i| record.waveform[i * stride..i * stride + length].to_vec())
        .collect()
}

/// Mean-square power `(1/L) * sum(x^2)`.
pub fn signal_power(sample: &[f64]) -> Result<f64> {
    if sample.is_empty() {
        return Err(Error::EmptySignal);
    }
    Ok(sample.iter().map(|x| x * x).sum::<f64>() / sample.len() as f64)
}

/// Generates a zero-mean noise sequence of the given family with target power
/// `p_noise`, fully determined by `spec.seed`.
pub fn generate_noise(spec: &NoiseSpec, p_noise: f64, len: usize) -> Vec<f64> {
    let mut rng = seed::rng(spec.seed);
    match spec.noise_type {
        NoiseType::Gaussian => {
            let normal = Normal::new(0.0, p_noise.sqrt()).expect("valid std");
            (0..len).map(|_| normal.sample(&mut rng)).collect()
        }
        NoiseType::Laplacian => {
            let b = (p_noise / 2.0).sqrt();
            (0..len).map(|_| sample_laplace(&mut rng, b)).collect()
        }
        NoiseType::Mixed => {
            // Independent gaussian and laplacian components, each carrying
            // half the target power, so the sum hits p_noise exactly.
            let normal = Normal::new(0.0, (p_noise / 2.0).sqrt()).expect("valid std");
            let b = (p_noise / 4.0).sqrt();
            (0..len)
                .map(|_| normal.sample(&mut rng) + sample_laplace(&mut rng, b))
                .collect()
        }
    }
}

/// Inverse-CDF Laplace draw with scale `b` (variance `2 b^2`).
fn sample_laplace<R: Rng>(rng: &mut R, b: f64) -> f64 {
    let u: f64 = rng.random::<f64>() - 0.5;
    -b * u.signum() * (1.0 - 2.0 * u.abs()).ln()
}

/// Adds noise to a sample so that the noise power is
/// `P_signal / 10^(snr_db/10)`. Deterministic under a fixed seed.
pub fn inject_noise(sample: &[f64], spec: &NoiseSpec) -> Result<Vec<f64>> {
    let p_signal = signal_power(sample)?;
    if p_signal <= 0.0 {
        return Err(Error::SilentSignal);
    }
    let p_noise = p_signal / 10f64.powf(spec.snr_db / 10.0);
    let noise = generate_noise(spec, p_noise, sample.len());
    Ok(sample.iter().zip(&noise).map(|(s, n)| s + n).collect())
}

/// Applies [`inject_noise`] to every row of a condition's segments, deriving
/// one independent per-segment seed from the spec seed and the condition tag.
pub fn inject_noise_dataset(segments: &ConditionSegments, spec: &NoiseSpec) -> Result<Array2<f64>> {
    let base = seed::derive(spec.seed, segments.condition_id.as_bytes());
    let (n, len) = (segments.samples.nrows(), segments.samples.ncols());
    let mut out = Array2::zeros((n, len));
    for i in 0..n {
        let row = segments.samples.row(i);
        let row_spec = NoiseSpec {
            seed: seed::derive_index(base, i as u64),
            ..*spec
        };
        let noisy = inject_noise(row.as_slice().expect("contiguous row"), &row_spec)?;
        out.row_mut(i).assign(&ndarray::ArrayView1::from(&noisy));
    }
    Ok(out)
}

/// Assembles a transfer task from clean per-condition segments.
///
/// Noise is injected once per segment; the unlabeled target-train split and
/// the labeled target-test split share the same noisy realizations and differ
/// only in label visibility.
pub fn build_transfer_task(
    datasets: &BTreeMap<String, ConditionSegments>,
    task: &TransferTask,
) -> Result<TransferData> {
    let source = datasets.get(&task.source_condition).ok_or_else(|| {
        Error::MissingData(format!("condition `{}` not found", task.source_condition))
    })?;
    let target = datasets.get(&task.target_condition).ok_or_else(|| {
        Error::MissingData(format!("condition `{}` not found", task.target_condition))
    })?;
    if source.samples.ncols() != target.samples.ncols() {
        return Err(Error::IncompatibleDomains(format!(
            "segment lengths differ: {} vs {}",
            source.samples.ncols(),
            target.samples.ncols()
        )));
    }
    if source.num_classes != target.num_classes || source.class_set() != target.class_set() {
        return Err(Error::IncompatibleDomains(
            "class sets differ between source and target".into(),
        ));
    }

    let noisy_source = inject_noise_dataset(source, &task.noise)?;
    let noisy_target = inject_noise_dataset(target, &task.noise)?;

    let source_train = SegmentedDataset::new(
        noisy_source,
        Some(source.labels.clone()),
        source.condition_id.clone(),
        Role::SourceTrain,
        source.num_classes,
    )?;
    let target_train = SegmentedDataset::new(
        noisy_target.clone(),
        None,
        target.condition_id.clone(),
        Role::TargetTrainUnlabeled,
        target.num_classes,
    )?;
    let target_test = SegmentedDataset::new(
        noisy_target,
        Some(target.labels.clone()),
        target.condition_id.clone(),
        Role::TargetTest,
        target.num_classes,
    )?;

    Ok(TransferData {
        source_train,
        target_train,
        target_test,
    })
}
