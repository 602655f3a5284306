use std::path::PathBuf;

use crate::tensor_store::CompatReport;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// A file exists but does not follow the expected layout.
    #[error("malformed {what}: {detail}")]
    Format { what: &'static str, detail: String },

    /// Arguments or data that violate a documented precondition.
    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("incompatible checkpoints: {0}")]
    Incompatible(CompatReport),

    #[error("optimizer: {0}")]
    Optimizer(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }

    pub fn format(what: &'static str, detail: impl Into<String>) -> Self {
        Error::Format {
            what,
            detail: detail.into(),
        }
    }
}
