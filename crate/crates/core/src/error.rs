//! Error type shared across the crate.

use std::path::PathBuf;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor wiring violation, reported with the layer or op that tripped it.
    #[error("shape fault in `{layer}`: {detail}")]
    Shape { layer: String, detail: String },

    /// Invalid configuration or precondition violation.
    #[error("configuration fault: {0}")]
    Config(String),

    /// Malformed file contents.
    #[error("format fault in {}: {detail}", path.display())]
    Format { path: PathBuf, detail: String },

    /// Non-finite values or other numerical failures.
    #[error("numerical fault: {0}")]
    Numeric(String),

    #[error("I/O error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

impl Error {
    pub fn shape(layer: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Shape {
            layer: layer.into(),
            detail: detail.into(),
        }
    }

    pub fn format(path: impl Into<PathBuf>, detail: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            detail: detail.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
