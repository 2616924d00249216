use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("format error: {0}")]
    Format(String),

    #[error("corrupt data: {0}")]
    Corruption(String),

    #[error("validation error: {0}")]
    Validation(String),

    #[error("dependency unavailable: {0}")]
    Dependency(String),

    #[error("degenerate clustering at {tier} tier (channel {channel:?}): {reason}")]
    DegenerateClustering {
        tier: &'static str,
        channel: Option<usize>,
        reason: String,
    },

    #[error("insufficient capacity: {0}")]
    Capacity(String),

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("backend unavailable: {0}")]
    BackendUnavailable(String),

    #[error("non-finite loss at step {step}: {detail}")]
    NonFinite { step: u64, detail: String },

    #[error("i/o error on {path:?}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Whether the failure comes from a missing or failing external dependency
    /// (extractor, remote backend) rather than from bad input.
    pub fn is_dependency(&self) -> bool {
        matches!(
            self,
            Error::Dependency(_) | Error::BackendUnavailable(_) | Error::Unsupported(_)
        )
    }
}

pub(crate) fn validation(msg: impl Into<String>) -> Error {
    Error::Validation(msg.into())
}
