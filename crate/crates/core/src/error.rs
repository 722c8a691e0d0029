use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, DgibError>;

#[derive(Debug, Error)]
pub enum DgibError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("validation failed for {file}: {message}")]
    Validation { file: String, message: String },

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("empty result: {0}")]
    EmptyResult(String),

    #[error("non-finite loss at epoch {epoch}: first non-finite term is `{term}`")]
    Divergence { epoch: usize, term: String },

    #[error("missing artifact: {0}")]
    MissingArtifact(PathBuf),

    #[error("parse error in {file}: {message}")]
    Parse { file: String, message: String },
}

impl DgibError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        DgibError::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn arg(message: impl Into<String>) -> Self {
        DgibError::Argument(message.into())
    }
}
