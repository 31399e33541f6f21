use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid shapes, geometry or hyperparameters.
    #[error("parameter error: {0}")]
    Parameter(String),

    /// API misuse, e.g. calling backward on a non-scalar root.
    #[error("usage error: {0}")]
    Usage(String),

    /// Degenerate input data (all-zero mask row, empty prediction list, ...).
    #[error("input error: {0}")]
    Input(String),

    /// A record or file failed to ingest.
    #[error("data error in {path}: {reason}")]
    Data { path: PathBuf, reason: String },

    #[error("non-finite loss at epoch {epoch}, batch {batch}: {value}")]
    NonFinite {
        epoch: usize,
        batch: usize,
        value: f64,
    },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn param(msg: impl Into<String>) -> Self {
        Error::Parameter(msg.into())
    }

    pub(crate) fn data(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Data {
            path: path.into(),
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
