use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = CoreError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum CoreError {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value {value} at (y={y}, x={x}, c={c})")]
    NonFinite {
        y: usize,
        x: usize,
        c: usize,
        value: f32,
    },

    #[error("empty mask: {0}")]
    EmptyMask(&'static str),

    #[error("image {width}x{height} too small for {levels} pyramid levels")]
    TooSmall {
        width: usize,
        height: usize,
        levels: usize,
    },

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("scene generation infeasible for seed {seed}: {reason}")]
    Infeasible { seed: u64, reason: String },

    #[error("degenerate geometry: {0}")]
    Degenerate(String),

    #[error("{0}")]
    Json(#[from] serde_json::Error),
}

impl CoreError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CoreError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        CoreError::Format {
            path: path.into(),
            message: message.into(),
        }
    }
}
