//! Error type shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// A vector whose norm falls below the floor cannot be normalized.
    #[error("vector norm {norm:e} is below the {floor:e} floor")]
    ZeroNorm { norm: f64, floor: f64 },

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid spec: {0}")]
    InvalidSpec(String),

    #[error("requested {requested} distinct classes but only {available} available")]
    InsufficientClasses { requested: usize, available: usize },

    #[error("class {class} has {available} samples, need {requested}")]
    InsufficientSamples {
        class: usize,
        requested: usize,
        available: usize,
    },

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("schema error at line {line}: {message}")]
    Schema { line: usize, message: String },

    #[error("query {query} has no relevant reference")]
    NoRelevant { query: usize },

    #[error("training log is empty")]
    EmptyLog,

    #[error("stale cache: {0}")]
    StaleCache(String),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
