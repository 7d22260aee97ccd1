//! Deterministic federated-learning simulator with feature-matching data
//! synthesis on top of a small reverse-mode autodiff engine.

// Range checks are written as `!(x > 0.0)` so that NaN fails them.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod config;
pub mod data;
pub mod engine;
pub mod error;
pub mod hfmds;
pub mod metrics;
pub mod runner;
pub mod seed;
pub mod tensor;

pub use config::{load_config, parse_config, ExperimentConfig, RunManifest};
pub use error::{Error, Result};
pub use runner::run_experiment;
pub use tensor::Tensor;
