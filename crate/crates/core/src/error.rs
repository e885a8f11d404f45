use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = GenieError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum GenieError {
    #[error("invalid camera: {0}")]
    InvalidCamera(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("non-finite input: {0}")]
    NonFinite(&'static str),

    #[error("dimension mismatch: expected {expected}, got {got} ({what})")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("proximity index is stale: built at epoch {built}, scene is at epoch {current}")]
    StaleIndex { built: u64, current: u64 },

    #[error("cannot build a proximity index over an empty scene")]
    EmptyScene,

    #[error("operation requires live features; scene is in baked mode")]
    BakedMode,

    #[error("edit requires baked features; gaussian {0} is not baked")]
    NotBaked(usize),

    #[error("singular transform (determinant {0:e})")]
    SingularTransform(f64),

    #[error("selection index {index} out of range for {len} gaussians")]
    InvalidSelection { index: usize, len: usize },

    #[error("mesh error: {0}")]
    Mesh(String),

    #[error("frame {frame} out of range ({len} frames)")]
    FrameOutOfRange { frame: usize, len: usize },

    #[error("non-finite loss at step {step} (batch pixels {first_pixel}..{last_pixel})")]
    NonFiniteLoss {
        step: u64,
        first_pixel: usize,
        last_pixel: usize,
    },

    #[error("checkpoint: {0}")]
    Checkpoint(#[from] crate::io::checkpoint::CheckpointError),

    #[error("dataset: {0}")]
    Dataset(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },
}

impl GenieError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        GenieError::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(path: impl Into<PathBuf>, message: impl ToString) -> Self {
        GenieError::Parse {
            path: path.into(),
            message: message.to_string(),
        }
    }
}
