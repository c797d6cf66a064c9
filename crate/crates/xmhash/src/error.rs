use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by dataset loading, graph construction, the optimizers,
/// and the pipeline runner.
#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error in {path} at line {line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("row-count mismatch across modalities: {counts:?}")]
    RowCountMismatch { counts: Vec<usize> },

    #[error("non-finite value at ({row}, {col})")]
    NonFinite { row: usize, col: usize },

    #[error("dimension mismatch: {message}")]
    DimensionMismatch { message: String },

    #[error("invalid argument: {message}")]
    InvalidArgument { message: String },

    #[error("modality {modality} has zero total variance; cannot normalize")]
    ZeroVariance { modality: usize },

    #[error("only {available} positive eigenvalues available, {requested} requested")]
    EigenDeficit { available: usize, requested: usize },

    #[error("bad raw matrix file {path}: {message}")]
    BadRawFile { path: PathBuf, message: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("missing artifact {path}: run `{stage}` first")]
    MissingArtifact { path: PathBuf, stage: String },

    #[error("stale artifact {path}: upstream config changed, rerun `{stage}`")]
    StaleArtifact { path: PathBuf, stage: String },

    #[error("training diverged at epoch {epoch}: loss is not finite")]
    Diverged { epoch: usize },

    #[error("{stage} stage failed: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub fn invalid(message: impl Into<String>) -> Self {
        Error::InvalidArgument {
            message: message.into(),
        }
    }

    pub fn dims(message: impl Into<String>) -> Self {
        Error::DimensionMismatch {
            message: message.into(),
        }
    }

    pub fn in_stage(self, stage: &str) -> Self {
        Error::Stage {
            stage: stage.to_string(),
            source: Box::new(self),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
