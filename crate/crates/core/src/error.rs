use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// A value violates a documented invariant. `field` names the offender.
    #[error("invalid {field}: {reason}")]
    Validation { field: String, reason: String },

    #[error("label parse error at line {line}: {reason}")]
    LabelParse { line: usize, reason: String },

    #[error("shape mismatch: {0}")]
    Shape(String),

    /// A stage was handed an input produced out of pipeline order.
    #[error("stage order violation: {stage} requires a predecessor `{expected}`")]
    StageOrder { stage: String, expected: String },

    #[error("contract violation: {0}")]
    Contract(String),

    /// Test data leaked into a training or selection set.
    #[error("data integrity: {0}")]
    DataIntegrity(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn validation(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Validation { field: field.into(), reason: reason.into() }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
