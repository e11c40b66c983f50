use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shapes are incompatible with the requested operation.
    #[error("dimension error in {op}: {reason}")]
    Dimension { op: &'static str, reason: String },

    /// A precondition of an operation was violated by its caller.
    #[error("contract violation in {op}: {reason}")]
    Contract { op: &'static str, reason: String },

    /// A NaN or infinity appeared where only finite values are allowed.
    #[error("non-finite value produced by {op} at flat index {index}")]
    NonFinite { op: &'static str, index: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("malformed {what}: {reason}")]
    Format { what: &'static str, reason: String },

    /// One or more images in a directory tree could not be decoded.
    #[error("failed to load {} image(s): {}", .0.len(), list_paths(.0))]
    Images(Vec<(PathBuf, String)>),

    #[error("training diverged at epoch {epoch}, batch {batch}: {detail}")]
    Diverged {
        epoch: usize,
        batch: usize,
        detail: String,
    },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

fn list_paths(items: &[(PathBuf, String)]) -> String {
    items
        .iter()
        .map(|(p, why)| format!("{} ({why})", p.display()))
        .collect::<Vec<_>>()
        .join(", ")
}

impl Error {
    pub(crate) fn dim(op: &'static str, reason: impl Into<String>) -> Self {
        Error::Dimension {
            op,
            reason: reason.into(),
        }
    }

    pub(crate) fn contract(op: &'static str, reason: impl Into<String>) -> Self {
        Error::Contract {
            op,
            reason: reason.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
