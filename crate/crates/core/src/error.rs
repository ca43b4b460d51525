use std::io;
use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the laboratory.
#[derive(Debug, Error)]
pub enum Error {
    /// Shapes, hyperparameters or model layouts that cannot be built.
    #[error("configuration error: {0}")]
    Config(String),
    /// An API called in the wrong state (eval-mode training, missing grads, ...).
    #[error("usage error: {0}")]
    Usage(String),
    /// Bad input values such as out-of-range labels or empty buffers.
    #[error("input error: {0}")]
    Input(String),
    /// Malformed files: dataset records, checkpoints, config files.
    #[error("format error: {0}")]
    Format(String),
    /// A normalizing layer was handed a batch with a single value per channel.
    #[error("degenerate batch: {0}")]
    DegenerateBatch(String),
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: io::Error },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
