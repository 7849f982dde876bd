use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by any pipeline stage.
#[derive(Debug, Error)]
pub enum Error {
    #[error("malformed config {path}: {message}")]
    MalformedConfig { path: String, message: String },

    #[error("validation error on field `{field}`: {message}")]
    Validation { field: String, message: String },

    #[error("unsupported dataset `{0}`")]
    UnsupportedDataset(String),

    #[error("dataset ingestion failed, missing or unreadable paths: {0:?}")]
    Ingestion(Vec<PathBuf>),

    #[error("trigger geometry error: {0}")]
    Geometry(String),

    #[error("attack construction error: {0}")]
    AttackConstruction(String),

    #[error("batch too small: need at least {need}, got {got}")]
    BatchTooSmall { need: usize, got: usize },

    #[error("training failure at epoch {epoch}: {message}")]
    TrainingFailure { epoch: usize, message: String },

    #[error("trigger inversion failure: {0}")]
    InversionFailure(String),

    #[error("numerical degeneracy: {0}")]
    NumericalDegeneracy(String),

    #[error("experiment failure in stage `{stage}` (config {config_hash}): {message}")]
    Experiment {
        stage: String,
        config_hash: String,
        message: String,
    },

    #[error("stale artifact at {path}: {message}")]
    StaleArtifact { path: PathBuf, message: String },

    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("serialization error: {0}")]
    Serialization(String),
}

impl Error {
    pub fn validation(field: &str, message: impl Into<String>) -> Self {
        Error::Validation {
            field: field.to_string(),
            message: message.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Serialization(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
