//! Declarative experiment configuration.
//!
//! A flat TOML file with one section per concern. Every field has the
//! standard default, so an empty file reproduces the reference training
//! configuration; the resolved config is echoed byte-for-byte into each run
//! directory and a run is fully reproducible from its echo.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::attention::AttentionConfig;
use crate::balancer::BalancerConfig;
use crate::error::{Error, Result};
use crate::nn::extractor::ExtractorConfig;
use crate::nn::model::{ArchConfig, ModelVariant};
use crate::pseudo::PseudoLabelConfig;
use crate::signal::NoiseType;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct TaskSection {
    /// Source condition id.
    pub source: String,
    /// Target condition id.
    pub target: String,
    /// Directory holding prepared segment archives.
    pub data_dir: PathBuf,
}

impl Default for TaskSection {
    fn default() -> Self {
        Self {
            source: "A".into(),
            target: "B".into(),
            data_dir: PathBuf::from("data"),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseSection {
    pub kind: NoiseType,
    pub snr_db: f64,
    pub seed: u64,
}

impl Default for NoiseSection {
    fn default() -> Self {
        Self {
            kind: NoiseType::Mixed,
            snr_db: -8.0,
            seed: 17,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub variant: ModelVariant,
    pub stage_channels: [usize; 4],
    pub blocks_per_stage: usize,
    pub dw_kernel: usize,
    /// Optional explicit hidden layout for the MLP heads.
    pub head_hidden: Option<Vec<usize>>,
}

impl Default for ModelSection {
    fn default() -> Self {
        let e = ExtractorConfig::default();
        Self {
            variant: ModelVariant::Full,
            stage_channels: e.stage_channels,
            blocks_per_stage: e.blocks_per_stage,
            dw_kernel: e.dw_kernel,
            head_hidden: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub min_lr: f64,
    pub weight_decay: f64,
    pub eval_interval: usize,
    pub seed: u64,
    /// Optional per-module multipliers on the shared schedule, keyed by
    /// parameter-group name (`FRFE`, `FIFE`, `LC`, `LD`, `GDC`, `SDC`,
    /// `DEC`). All modules share the schedule by default.
    pub group_lr_scale: std::collections::BTreeMap<String, f64>,
}

impl Default for TrainingSection {
    fn default() -> Self {
        Self {
            epochs: 3500,
            batch_size: 32,
            base_lr: 1e-4,
            min_lr: 1e-6,
            weight_decay: 5e-4,
            eval_interval: 10,
            seed: 42,
            group_lr_scale: std::collections::BTreeMap::new(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSection {
    pub dir: PathBuf,
    pub repeats: usize,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("out"),
            repeats: 1,
        }
    }
}

/// The complete declarative experiment description.
#[derive(Debug, Clone, Serialize, Deserialize, Default, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub task: TaskSection,
    pub noise: NoiseSection,
    pub model: ModelSection,
    pub training: TrainingSection,
    pub pseudo: PseudoLabelConfig,
    pub attention: AttentionConfig,
    pub balancer: BalancerConfig,
    pub output: OutputSection,
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig =
            toml::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    /// Serializes the fully-resolved configuration.
    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.task.source == self.task.target {
            return Err(Error::InvalidConfig(
                "task source and target must differ".into(),
            ));
        }
        if self.training.batch_size < 2 {
            return Err(Error::InvalidConfig("batch_size must be >= 2".into()));
        }
        if self.training.min_lr > self.training.base_lr {
            return Err(Error::InvalidConfig("min_lr must not exceed base_lr".into()));
        }
        self.pseudo.validate()?;
        self.arch().extractor.validate()?;
        Ok(())
    }

    pub fn arch(&self) -> ArchConfig {
        ArchConfig {
            extractor: ExtractorConfig {
                stage_channels: self.model.stage_channels,
                stage_downsample: ExtractorConfig::default().stage_downsample,
                blocks_per_stage: self.model.blocks_per_stage,
                dw_kernel: self.model.dw_kernel,
            },
            head_hidden: self.model.head_hidden.clone(),
        }
    }

    /// Task name used in output layouts.
    pub fn task_name(&self) -> String {
        format!("{}-{}", self.task.source, self.task.target)
    }

    /// Run directory `out/<task>/<variant>/<snr>/<seed>/`.
    pub fn run_dir(&self, seed: u64) -> PathBuf {
        self.output
            .dir
            .join(self.task_name())
            .join(self.model.variant.as_str())
            .join(format!("{}dB", self.noise.snr_db))
            .join(seed.to_string())
    }
}
