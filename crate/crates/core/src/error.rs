use std::io;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("sizing error: {0}")]
    Sizing(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("parse error at byte offset {offset}: {msg}")]
    Parse { offset: usize, msg: String },
    #[error("corrupt payload: {0}")]
    Corrupt(String),
    #[error("ensemble error: {0}")]
    Ensemble(String),
    #[error("training diverged at epoch {epoch}: {msg}")]
    Divergence { epoch: usize, msg: String },
    #[error("stale cache: {0}")]
    StaleCache(String),
    #[error("label {label} out of range for {classes} classes")]
    Label { label: usize, classes: usize },
    #[error("checksum mismatch for {file}: expected {expected}, got {actual}")]
    Checksum {
        file: String,
        expected: String,
        actual: String,
    },
    #[error("download failed: {0}")]
    Fetch(String),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub(crate) fn shape_err(msg: impl Into<String>) -> Error {
    Error::Shape(msg.into())
}

pub(crate) fn config_err(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}
