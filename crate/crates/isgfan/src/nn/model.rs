//! The assembled network: extractors, heads, subdomain classifiers, and
//! decoder, built per ablation variant, with named parameter groups and a
//! versioned binary checkpoint format.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::decoder::Decoder;
use super::extractor::{Extractor, ExtractorConfig};
use super::heads::{HeadConfig, MlpHead, SdcHead};
use super::params::{ParamEntry, ParamFn};
use crate::error::{Error, Result};
use crate::seed;

/// Ablation variants. `SourceOnly` (classifier trained on source data with no
/// adaptation) is the no-transfer baseline used by the synthetic benchmark.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelVariant {
    /// Every module and all six losses.
    Full,
    /// Separation branch and focal module removed; equivalent to a plain
    /// global domain-adversarial network.
    Isfa,
    /// Separation branch removed (no irrelevant-feature extractor, label
    /// discriminator, decoder, or orthogonality).
    Is,
    /// Focal module removed (no subdomain classifiers or attention).
    Fa,
    /// Focal module and label discriminator removed.
    Fald,
    /// Feature extractor and label classifier only.
    SourceOnly,
}

impl ModelVariant {
    pub fn as_str(self) -> &'static str {
        match self {
            ModelVariant::Full => "full",
            ModelVariant::Isfa => "isfa",
            ModelVariant::Is => "is",
            ModelVariant::Fa => "fa",
            ModelVariant::Fald => "fald",
            ModelVariant::SourceOnly => "source_only",
        }
    }

    pub fn has_gdc(self) -> bool {
        self != ModelVariant::SourceOnly
    }

    pub fn has_sdc(self) -> bool {
        matches!(self, ModelVariant::Full | ModelVariant::Is)
    }

    pub fn has_fife(self) -> bool {
        matches!(self, ModelVariant::Full | ModelVariant::Fa | ModelVariant::Fald)
    }

    pub fn has_ld(self) -> bool {
        matches!(self, ModelVariant::Full | ModelVariant::Fa)
    }

    pub fn has_decoder(self) -> bool {
        self.has_fife()
    }
}

impl std::str::FromStr for ModelVariant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "full" => Ok(ModelVariant::Full),
            "isfa" => Ok(ModelVariant::Isfa),
            "is" => Ok(ModelVariant::Is),
            "fa" => Ok(ModelVariant::Fa),
            "fald" => Ok(ModelVariant::Fald),
            "source_only" | "source-only" => Ok(ModelVariant::SourceOnly),
            other => Err(Error::InvalidConfig(format!("unknown variant `{other}`"))),
        }
    }
}

/// Named parameter groups with distinct gradient routing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    Frfe,
    Fife,
    Lc,
    Ld,
    Gdc,
    Sdc,
    Decoder,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 7] = [
        ParamGroup::Frfe,
        ParamGroup::Fife,
        ParamGroup::Lc,
        ParamGroup::Ld,
        ParamGroup::Gdc,
        ParamGroup::Sdc,
        ParamGroup::Decoder,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ParamGroup::Frfe => "FRFE",
            ParamGroup::Fife => "FIFE",
            ParamGroup::Lc => "LC",
            ParamGroup::Ld => "LD",
            ParamGroup::Gdc => "GDC",
            ParamGroup::Sdc => "SDC",
            ParamGroup::Decoder => "DEC",
        }
    }
}

/// Architecture description shared by every component.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ArchConfig {
    pub extractor: ExtractorConfig,
    /// Hidden layout of the MLP heads; `None` selects the compressing
    /// default `F -> F/2 -> F/4 -> out`.
    pub head_hidden: Option<Vec<usize>>,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            extractor: ExtractorConfig::default(),
            head_hidden: None,
        }
    }
}

impl ArchConfig {
    pub fn scaled(stage_channels: [usize; 4]) -> Self {
        Self {
            extractor: ExtractorConfig::scaled(stage_channels),
            head_hidden: None,
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.extractor.feature_dim()
    }

    fn head_config(&self, out_dim: usize) -> HeadConfig {
        match &self.head_hidden {
            Some(h) => HeadConfig {
                in_dim: self.feature_dim(),
                hidden_dims: h.clone(),
                out_dim,
            },
            None => HeadConfig::compressing(self.feature_dim(), out_dim),
        }
    }
}

/// The trainable network for one variant.
pub struct IsgfanModel {
    pub variant: ModelVariant,
    pub arch: ArchConfig,
    pub num_classes: usize,
    pub frfe: Extractor,
    pub fife: Option<Extractor>,
    pub lc: MlpHead,
    pub ld: Option<MlpHead>,
    pub gdc: Option<MlpHead>,
    pub sdcs: Option<Vec<SdcHead>>,
    pub decoder: Option<Decoder>,
}

impl IsgfanModel {
    /// Builds the module graph of `variant` with seed-derived initialization.
    pub fn build_variant(
        variant: ModelVariant,
        arch: ArchConfig,
        num_classes: usize,
        init_seed: u64,
    ) -> Result<Self> {
        arch.extractor.validate()?;
        if num_classes < 2 {
            return Err(Error::InvalidConfig("need at least 2 classes".into()));
        }
        let f = arch.feature_dim();
        let mk_rng = |tag: &str| seed::rng(seed::derive(init_seed, tag.as_bytes()));

        let frfe = Extractor::new(arch.extractor.clone(), &mut mk_rng("frfe"))?;
        let fife = if variant.has_fife() {
            Some(Extractor::new(arch.extractor.clone(), &mut mk_rng("fife"))?)
        } else {
            None
        };
        let lc = MlpHead::new(arch.head_config(num_classes), &mut mk_rng("lc"));
        let ld = if variant.has_ld() {
            Some(MlpHead::new(arch.head_config(num_classes), &mut mk_rng("ld")))
        } else {
            None
        };
        let gdc = if variant.has_gdc() {
            Some(MlpHead::new(arch.head_config(1), &mut mk_rng("gdc")))
        } else {
            None
        };
        let sdcs = if variant.has_sdc() {
            let mut rng = mk_rng("sdc");
            Some((0..num_classes).map(|_| SdcHead::new(f, &mut rng)).collect())
        } else {
            None
        };
        let decoder = if variant.has_decoder() {
            Some(Decoder::new(f, arch.extractor.dw_kernel, &mut mk_rng("decoder")))
        } else {
            None
        };

        Ok(Self {
            variant,
            arch,
            num_classes,
            frfe,
            fife,
            lc,
            ld,
            gdc,
            sdcs,
            decoder,
        })
    }

    /// Groups present in this variant, in checkpoint order.
    pub fn present_groups(&self) -> Vec<ParamGroup> {
        ParamGroup::ALL
            .into_iter()
            .filter(|g| match g {
                ParamGroup::Frfe | ParamGroup::Lc => true,
                ParamGroup::Fife => self.fife.is_some(),
                ParamGroup::Ld => self.ld.is_some(),
                ParamGroup::Gdc => self.gdc.is_some(),
                ParamGroup::Sdc => self.sdcs.is_some(),
                ParamGroup::Decoder => self.decoder.is_some(),
            })
            .collect()
    }

    /// Visits the parameters of one group in a fixed order.
    pub fn visit_group(&mut self, group: ParamGroup, f: &mut ParamFn<'_>) {
        match group {
            ParamGroup::Frfe => self.frfe.visit("FRFE", f),
            ParamGroup::Fife => {
                if let Some(fife) = &mut self.fife {
                    fife.visit("FIFE", f);
                }
            }
            ParamGroup::Lc => self.lc.visit("LC", f),
            ParamGroup::Ld => {
                if let Some(ld) = &mut self.ld {
                    ld.visit("LD", f);
                }
            }
            ParamGroup::Gdc => {
                if let Some(gdc) = &mut self.gdc {
                    gdc.visit("GDC", f);
                }
            }
            ParamGroup::Sdc => {
                if let Some(sdcs) = &mut self.sdcs {
                    for (c, sdc) in sdcs.iter_mut().enumerate() {
                        sdc.visit(&format!("SDC{c}"), f);
                    }
                }
            }
            ParamGroup::Decoder => {
                if let Some(dec) = &mut self.decoder {
                    dec.visit("DEC", f);
                }
            }
        }
    }

    /// Visits every parameter of every present group.
    pub fn visit_params(&mut self, f: &mut ParamFn<'_>) {
        for group in self.present_groups() {
            self.visit_group(group, f);
        }
    }

    pub fn zero_grads(&mut self) {
        self.visit_params(&mut |entry: ParamEntry<'_>| {
            entry.grad.fill(0.0);
        });
    }

    /// Max absolute gradient entry of a group; `None` when the group is
    /// absent from the variant.
    pub fn group_grad_max(&mut self, group: ParamGroup) -> Option<f64> {
        if !self.present_groups().contains(&group) {
            return None;
        }
        let mut max = 0.0f64;
        self.visit_group(group, &mut |entry: ParamEntry<'_>| {
            for g in entry.grad.iter() {
                max = max.max(g.abs());
            }
        });
        Some(max)
    }

    pub fn param_count(&mut self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |entry: ParamEntry<'_>| {
            n += entry.value.len();
        });
        n
    }

    // ── Checkpoint codec ───────────────────────────────────────────────────

    /// Serializes all parameter tensors with shape headers. Layout:
    /// magic `SGCK`, format version, tensor count, then per tensor a
    /// length-prefixed name, the dimensions, and little-endian `f64` data.
    pub fn save_checkpoint(&mut self, path: &Path) -> Result<()> {
        let mut entries: Vec<(String, Vec<usize>, Vec<f64>)> = Vec::new();
        self.visit_params(&mut |entry: ParamEntry<'_>| {
            entries.push((entry.name.clone(), entry.shape.clone(), entry.value.to_vec()));
        });
        let mut buf: Vec<u8> = Vec::new();
        buf.extend_from_slice(b"SGCK");
        buf.extend_from_slice(&1u32.to_le_bytes());
        buf.extend_from_slice(&(entries.len() as u32).to_le_bytes());
        for (name, shape, data) in &entries {
            let name_bytes = name.as_bytes();
            buf.extend_from_slice(&(name_bytes.len() as u16).to_le_bytes());
            buf.extend_from_slice(name_bytes);
            buf.push(shape.len() as u8);
            for &d in shape {
                buf.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in data {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        let mut file = std::fs::File::create(path)?;
        file.write_all(&buf)?;
        Ok(())
    }

    /// Loads a checkpoint previously written by [`Self::save_checkpoint`]
    /// into a model with the identical architecture and variant.
    pub fn load_checkpoint(&mut self, path: &Path) -> Result<()> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        let mut cur = 0usize;
        let take = |cur: &mut usize, n: usize| -> Result<&[u8]> {
            if *cur + n > bytes.len() {
                return Err(Error::Checkpoint("truncated file".into()));
            }
            let s = &bytes[*cur..*cur + n];
            *cur += n;
            Ok(s)
        };
        if take(&mut cur, 4)? != b"SGCK" {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = u32::from_le_bytes(take(&mut cur, 4)?.try_into().unwrap());
        if version != 1 {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let count = u32::from_le_bytes(take(&mut cur, 4)?.try_into().unwrap()) as usize;
        let mut tensors: Vec<(String, Vec<usize>, Vec<f64>)> = Vec::with_capacity(count);
        for _ in 0..count {
            let name_len = u16::from_le_bytes(take(&mut cur, 2)?.try_into().unwrap()) as usize;
            let name = String::from_utf8(take(&mut cur, name_len)?.to_vec())
                .map_err(|e| Error::Checkpoint(e.to_string()))?;
            let ndim = take(&mut cur, 1)?[0] as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(u32::from_le_bytes(take(&mut cur, 4)?.try_into().unwrap()) as usize);
            }
            let n: usize = shape.iter().product();
            let mut data = Vec::with_capacity(n);
            for _ in 0..n {
                data.push(f64::from_le_bytes(take(&mut cur, 8)?.try_into().unwrap()));
            }
            tensors.push((name, shape, data));
        }

        let mut idx = 0usize;
        let mut err: Option<Error> = None;
        self.visit_params(&mut |entry: ParamEntry<'_>| {
            if err.is_some() {
                return;
            }
            let Some((name, shape, data)) = tensors.get(idx) else {
                err = Some(Error::Checkpoint("fewer tensors than parameters".into()));
                return;
            };
            if *name != entry.name || *shape != entry.shape {
                err = Some(Error::Checkpoint(format!(
                    "tensor mismatch at {}: checkpoint has {name} {shape:?}",
                    entry.name
                )));
                return;
            }
            entry.value.copy_from_slice(data);
            idx += 1;
        });
        if let Some(e) = err {
            return Err(e);
        }
        if idx != tensors.len() {
            return Err(Error::Checkpoint("more tensors than parameters".into()));
        }
        Ok(())
    }
}
