use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the forecasting library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("empty series: no unmasked entries to fit")]
    EmptySeries,

    #[error("series too short: {len} steps, need at least {needed}")]
    SeriesTooShort { len: usize, needed: usize },

    #[error("empty split: {0}")]
    EmptySplit(String),

    #[error("invalid split ratios: {0}")]
    InvalidRatios(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid config: field `{field}`: {reason}")]
    Config { field: String, reason: String },

    #[error("config mismatch: field `{field}` differs (checkpoint {stored}, requested {requested})")]
    ConfigMismatch {
        field: String,
        stored: String,
        requested: String,
    },

    #[error("non-uniform interval at row {row}: expected {expected}s, found {found}s")]
    NonUniformInterval { row: usize, expected: i64, found: i64 },

    #[error("parse error at row {row}, column {column}: {reason}")]
    Parse {
        row: usize,
        column: usize,
        reason: String,
    },

    #[error("bad magic number: expected {expected:?}")]
    BadMagic { expected: &'static str },

    #[error("unsupported version {found} (expected {expected})")]
    Version { found: u16, expected: u16 },

    #[error("checksum failure")]
    Checksum,

    #[error("config hash mismatch")]
    ConfigHash,

    #[error("node count mismatch: model has {model}, data has {data}")]
    NodeMismatch { model: usize, data: usize },

    #[error("training diverged at epoch {epoch}, step {step}: {detail}")]
    Diverged {
        epoch: usize,
        step: usize,
        detail: String,
    },

    #[error("quantile of an empty error population")]
    EmptyQuantile,

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            reason: reason.into(),
        }
    }
}
