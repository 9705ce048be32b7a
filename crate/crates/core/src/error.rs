use std::path::PathBuf;

use thiserror::Error;

/// Errors raised across the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("graph output must be a scalar, got shape {0:?}")]
    NonScalarOutput(Vec<usize>),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("unknown group: layer {layer}, group {group}")]
    UnknownGroup { layer: usize, group: usize },

    #[error("statistic undefined: {0}")]
    Undefined(String),

    #[error("non-finite state at step {step}: {what}")]
    NonFinite { step: usize, what: String },

    #[error("flow integration aborted at step {step}: {what}")]
    FlowAborted { step: usize, what: String, prefix: Box<crate::flowlab::FlowTrace> },

    #[error("config error at `{path}`: {message}")]
    Config { path: String, message: String },

    #[error("artifact {0} already exists with different content")]
    ArtifactConflict(PathBuf),

    #[error("check failed: {0}")]
    CheckFailed(String),

    #[error("malformed file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn shape_err(msg: impl Into<String>) -> Error {
    Error::ShapeMismatch(msg.into())
}

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}
