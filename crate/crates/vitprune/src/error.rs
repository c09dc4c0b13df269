//! Error type shared across the crate.
//!
//! Variants are grouped by how the CLI reports them: everything except
//! `Measurement` is a validation-class failure (exit code 2); measurement
//! failures (exit code 3) only arise while timing or evaluating a model.

use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Tensor dimension mismatch; the message names the offending shapes.
    #[error("shape error: {0}")]
    Shape(String),

    /// Reduction or softmax axis outside the tensor rank.
    #[error("axis {axis} out of range for rank {rank}")]
    Axis { axis: usize, rank: usize },

    /// Invalid model configuration.
    #[error("config error: {0}")]
    Config(String),

    /// Invalid file contents, schema violation, or out-of-range argument.
    #[error("validation error: {0}")]
    Validation(String),

    /// Failure during latency or accuracy measurement.
    #[error("measurement error: {0}")]
    Measurement(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },

    #[error("json error in {path}: {detail}")]
    Json { path: PathBuf, detail: String },
}

impl Error {
    /// Process exit code the CLI uses for this error class.
    /// 2 = validation error, 3 = measurement error (0 = success, 1 = usage).
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Measurement(_) => 3,
            _ => 2,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
