//! Differentiable building blocks.
//!
//! Every component implements an explicit forward pass that returns a cache
//! and an explicit backward pass that consumes it, accumulating parameter
//! gradients in place. All arithmetic is `f64`; nothing here allocates global
//! state, so forward evaluation is pure given the parameters.

pub mod decoder;
pub mod extractor;
pub mod grl;
pub mod heads;
pub mod init;
pub mod layers;
pub mod model;
pub mod optimizer;
pub mod params;

pub use decoder::Decoder;
pub use extractor::{Extractor, ExtractorConfig, FeatureMap};
pub use grl::{grl_backward, grl_forward, GrlCoefficient};
pub use heads::{HeadConfig, MlpHead};
pub use model::{ArchConfig, IsgfanModel, ModelVariant, ParamGroup};
pub use optimizer::AdamW;
pub use params::ParamEntry;
