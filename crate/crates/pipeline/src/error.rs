use std::path::{Path, PathBuf};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("config: {0}")]
    Config(String),
    /// A stage ran before one of its inputs was produced.
    #[error("stage `{stage}` has not produced {what}; run it first")]
    Dependency { stage: &'static str, what: String },
    #[error("provenance check failed for {path}: {msg}")]
    Provenance { path: PathBuf, msg: String },
    #[error("workspace {0} is locked by another process (remove the lock file if it is stale)")]
    Locked(PathBuf),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {msg}")]
    Format { path: PathBuf, msg: String },
    #[error(transparent)]
    Core(#[from] cariface_core::CoreError),
    #[error(transparent)]
    Model(#[from] cariface_models::error::ModelError),
}

pub type Result<T> = std::result::Result<T, PipelineError>;

impl PipelineError {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        PipelineError::Config(msg.into())
    }

    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        PipelineError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub(crate) fn format(path: &Path, msg: impl ToString) -> Self {
        PipelineError::Format {
            path: path.to_path_buf(),
            msg: msg.to_string(),
        }
    }

    pub(crate) fn provenance(path: &Path, msg: impl Into<String>) -> Self {
        PipelineError::Provenance {
            path: path.to_path_buf(),
            msg: msg.into(),
        }
    }
}
