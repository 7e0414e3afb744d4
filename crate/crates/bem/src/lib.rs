//! Two-stage Bayesian enhancement at desk scale.
//!
//! Stage I is a small Bayesian (mean-field Gaussian) encoder-decoder that
//! models coarse illumination in a downsampled space; Stage II is a
//! deterministic refinement network at full resolution. Inference draws K
//! coarse candidates and either averages them (Monte Carlo mode) or picks
//! the best one under a no-reference quality metric (Rank mode) before a
//! single full-resolution refinement pass.

pub mod backbone;
pub mod cli;
pub mod inference;
pub mod ndtensor;
pub mod pipeline;
pub mod synthdata;
pub mod variational;

use thiserror::Error;

/// Crate-wide error type. The CLI maps variants onto stable exit codes.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] ndtensor::TensorError),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("training diverged (non-finite loss) at step {step}")]
    Divergence { step: usize },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("metric error: {0}")]
    Metric(String),

    #[error("parse error at byte {offset}: {msg}")]
    Parse { offset: usize, msg: String },

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
