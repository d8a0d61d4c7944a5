//! Noise-robust cross-domain fault diagnosis for 1-D vibration signals.
//!
//! This crate implements ISGFAN, an information-separation global-focal
//! adversarial network. A fault-relevant extractor is trained jointly with an
//! adversarially-guided fault-irrelevant branch (orthogonality + reconstruction
//! constraints), a global domain classifier, and per-class subdomain
//! classifiers driven by filtered pseudo-labels and a subdomain attention
//! mechanism. Everything runs on the CPU in `f64` with hand-written forward
//! and reverse passes, so gradients are exact and runs are reproducible
//! bit-for-bit under a fixed seed.
//!
//! Main entry points:
//!
//! - [`signal`]: segmentation, SNR-calibrated noise injection, transfer tasks.
//! - [`nn`]: feature extractors, heads, decoder, gradient reversal.
//! - [`objectives`]: every loss term (cross-entropy, orthogonality, MSE, BCE).
//! - [`pseudo`]: confidence/entropy-gated pseudo-label assignment.
//! - [`attention`]: the subdomain attention weight algorithm.
//! - [`balancer`]: dynamic loss weighting.
//! - [`trainer`]: the training loop and [`trainer::run_experiment`].
//! - [`evaluator`]: accuracy, confusion matrices, embedding export.
//! - [`config`]: declarative experiment configuration (TOML).

pub mod archive;
pub mod attention;
pub mod balancer;
pub mod config;
pub mod error;
pub mod evaluator;
pub mod metrics;
pub mod nn;
pub mod objectives;
pub mod pseudo;
pub mod seed;
pub mod signal;
pub mod synthetic;
pub mod trainer;

pub use error::{Error, Result};
