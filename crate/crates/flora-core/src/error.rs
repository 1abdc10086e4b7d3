//! Crate-wide error type.

use thiserror::Error;

/// Errors produced by kernels, adapters, the simulator, persistence and training.
#[derive(Debug, Error)]
pub enum Error {
    /// Shapes do not line up for the requested operation.
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    /// A NaN or infinity reached a place that requires finite values.
    #[error("non-finite value: {0}")]
    NonFinite(String),

    /// Adapters in one batch must share a single rank.
    #[error("heterogeneous adapter ranks: {0}")]
    HeterogeneousRank(String),

    /// Number of adapters does not match the batch size.
    #[error("adapter count mismatch: {0}")]
    Arity(String),

    /// Inconsistent or invalid configuration.
    #[error("configuration error: {0}")]
    Config(String),

    /// Least-squares calibration could not be performed.
    #[error("calibration error: {0}")]
    Calibration(String),

    /// Underlying I/O failure while storing or loading an adapter.
    #[error("storage error: {0}")]
    Io(#[from] std::io::Error),

    /// Malformed adapter file.
    #[error("format error: {0}")]
    Format(String),

    /// File declares a format version this build does not read.
    #[error("unsupported version: {0}")]
    UnsupportedVersion(u16),

    /// Operation not defined for this adapter kind.
    #[error("unsupported: {0}")]
    Unsupported(String),

    /// Catalog lookup miss.
    #[error("adapter not found: id {0}")]
    NotFound(u64),

    /// Training loss exploded past the divergence guard.
    #[error("training diverged at step {step}: loss {loss:e} vs initial {initial:e}")]
    Divergence {
        step: u32,
        loss: f64,
        initial: f64,
        trace: Vec<f64>,
    },
}

pub type Result<T> = std::result::Result<T, Error>;
