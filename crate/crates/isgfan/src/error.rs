//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("empty signal")]
    EmptySignal,

    #[error("undefined SNR for silent signal")]
    SilentSignal,

    #[error("incompatible domains: {0}")]
    IncompatibleDomains(String),

    #[error("invalid input length: {0}")]
    InvalidLength(String),

    #[error("rows must be unit norm: row {row} has norm {norm}")]
    UnnormalizedRows { row: usize, norm: f64 },

    #[error("empty batch")]
    EmptyBatch,

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("archive error: {0}")]
    Archive(String),

    #[error("manifest line {line}: {msg}")]
    Manifest { line: usize, msg: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("missing data: {0}")]
    MissingData(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
