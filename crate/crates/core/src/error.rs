use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid sensor, model, training or run configuration.
    #[error("configuration error at `{key}`: {message}")]
    Config { key: String, message: String },

    /// Input data violating a documented invariant.
    #[error("data error: {0}")]
    Data(String),

    /// Malformed bytes on disk.
    #[error("format error: {0}")]
    Format(String),

    /// A quantity that is undefined for the given input (e.g. Chamfer of an
    /// empty cloud).
    #[error("domain error: {0}")]
    Domain(String),

    /// Non-finite values produced during evaluation.
    #[error("non-finite values in {stage}")]
    Numeric { stage: String },

    /// Checkpoint written by an incompatible version.
    #[error("incompatible checkpoint version {found} (expected {expected})")]
    Incompatible { found: u32, expected: u32 },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn config(key: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
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
