use std::path::PathBuf;

use thiserror::Error;

/// Errors surfaced by every fallible operation in the crate.
#[derive(Debug, Error)]
pub enum RsadError {
    /// A configuration value is missing, malformed or out of range.
    #[error("configuration error ({key}): {reason}")]
    Config { key: String, reason: String },

    /// Caller-supplied data has the wrong shape or content.
    #[error("input error: {0}")]
    Input(String),

    /// An episode cannot be drawn from the requested split section.
    #[error("sampling error: {0}")]
    Sampling(String),

    /// DBI is undefined when two distinct clusters share a centroid.
    #[error("degenerate centroids: clusters {0} and {1} coincide")]
    DegenerateCentroids(usize, usize),

    /// A loss or gradient became NaN or infinite during training.
    #[error("non-finite loss at episode {episode}: {detail}")]
    NonFinite { episode: u64, detail: String },

    /// A file exists but could not be decoded.
    #[error("corrupt file {path}: {reason}")]
    Corrupt { path: PathBuf, reason: String },

    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl RsadError {
    pub fn config(key: impl Into<String>, reason: impl Into<String>) -> Self {
        RsadError::Config {
            key: key.into(),
            reason: reason.into(),
        }
    }

    pub fn input(msg: impl Into<String>) -> Self {
        RsadError::Input(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        RsadError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn corrupt(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        RsadError::Corrupt {
            path: path.into(),
            reason: reason.into(),
        }
    }
}

pub type Result<T, E = RsadError> = std::result::Result<T, E>;
