use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the denoising pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    Param(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("invalid config at `{key}`: {message}")]
    Config { key: String, message: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },

    #[error("missing files: {}", .0.iter().map(|p| p.display().to_string()).collect::<Vec<_>>().join(", "))]
    MissingFiles(Vec<PathBuf>),

    #[error(
        "non-finite loss at epoch {epoch}, step {step} (lr {lr:e}, batch seed {batch_seed:#018x})"
    )]
    NonFinite {
        epoch: usize,
        step: usize,
        lr: f64,
        batch_seed: u64,
    },
}

impl Error {
    pub(crate) fn param(msg: impl Into<String>) -> Self {
        Error::Param(msg.into())
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn config(key: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            message: message.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            message: message.into(),
        }
    }

    /// Process exit code: 2 for configuration problems, 3 for I/O, 4 for a
    /// numerical abort.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Param(_) | Error::Shape(_) | Error::Domain(_) | Error::Config { .. } => 2,
            Error::Io { .. } | Error::Format { .. } | Error::MissingFiles(_) => 3,
            Error::NonFinite { .. } => 4,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
