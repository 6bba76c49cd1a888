use std::path::PathBuf;

use thiserror::Error;
use unshadow_core::CoreError;

pub type Result<T, E = NnError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum NnError {
    #[error(transparent)]
    Candle(#[from] candle_core::Error),

    #[error(transparent)]
    Core(#[from] CoreError),

    #[error("stage {stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<NnError>,
    },

    #[error("{path}: {message}")]
    Checkpoint { path: PathBuf, message: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("training diverged at epoch {epoch}, step {step}: loss {loss}")]
    Diverged { epoch: usize, step: usize, loss: f64 },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{0}")]
    Json(#[from] serde_json::Error),
}

impl NnError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        NnError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn checkpoint(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        NnError::Checkpoint {
            path: path.into(),
            message: message.into(),
        }
    }

    pub(crate) fn in_stage(stage: &'static str) -> impl FnOnce(NnError) -> NnError {
        move |e| NnError::Stage {
            stage,
            source: Box::new(e),
        }
    }
}
