//! Shared error type for all spi-core modules.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum SpiError {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("invalid temperature {0} (must be > 0 and finite)")]
    InvalidTemperature(f64),

    #[error("degenerate embedding: norm {norm:e} below threshold {eps:e}")]
    DegenerateEmbedding { norm: f64, eps: f64 },

    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },

    #[error("invalid k={k} for dimension {d}")]
    InvalidK { k: usize, d: usize },

    #[error("invalid class {class} for {num_classes} classes")]
    InvalidClass { class: usize, num_classes: usize },

    #[error("degenerate batch: {0}")]
    DegenerateBatch(String),

    #[error("invalid view count: expected {expected} global views, got {got}")]
    InvalidViewCount { expected: usize, got: usize },

    #[error("non-finite loss: {0}")]
    NonFiniteLoss(String),

    #[error("non-finite gradient: {0}")]
    NonFiniteGradient(String),

    #[error("invalid threshold {0} (must lie in (0, 1])")]
    InvalidThreshold(f64),

    #[error("inconsistent state: {0}")]
    InconsistentState(String),

    #[error("class {class} missing from {which} labeled set")]
    MissingClass { class: usize, which: String },

    #[error("unlabeled set is empty")]
    EmptyUnlabeledSet,

    #[error("test set is empty")]
    EmptyTestSet,

    #[error("invalid dataset spec: {0}")]
    InvalidSpec(String),

    #[error("storage error: {0}")]
    Storage(#[from] std::io::Error),

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("epoch {epoch} out of range (total {total})")]
    InvalidEpoch { epoch: usize, total: usize },

    #[error("invalid config: {0}")]
    InvalidConfig(String),
}

pub type Result<T> = std::result::Result<T, SpiError>;
