use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid camera intrinsics: {0}")]
    InvalidIntrinsics(String),

    #[error("point is behind the camera (z = {z})")]
    BehindCamera { z: f64 },

    #[error("degenerate pose: {present} confident joints, at least 2 required")]
    DegeneratePose { present: usize },

    #[error("invalid keypoints: {0}")]
    InvalidKeypoints(String),

    #[error("invalid distance {0} m, must be positive")]
    InvalidDistance(f64),

    #[error("invalid height {0} cm, must be positive")]
    InvalidHeight(f64),

    #[error("invalid height mixture: {0}")]
    InvalidMixture(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("could not place the skeleton inside the image after {tries} tries")]
    SceneOutOfImage { tries: usize },

    #[error("non-finite network input at index {index}")]
    NonFiniteInput { index: usize },

    #[error("invalid regression target {0}, must be positive")]
    InvalidTarget(f64),

    #[error("batch normalization needs at least 2 samples in train mode, got {0}")]
    BatchTooSmall(usize),

    #[error("training diverged at epoch {epoch}, batch {batch}: loss = {loss}")]
    Diverged { epoch: usize, batch: usize, loss: f64 },

    #[error("model has not been trained (batch-norm statistics are uninitialized)")]
    Untrained,

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("cannot resolve distance: {0}")]
    UnresolvableDistance(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("schema violation(s): {}", .0.join("; "))]
    Schema(Vec<String>),

    #[error("unsupported format version {found} (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by bad user input (as opposed to I/O or runtime
    /// failures). The CLI maps these to its validation exit code.
    pub fn is_validation(&self) -> bool {
        !matches!(
            self,
            Error::Io { .. } | Error::Diverged { .. } | Error::Csv(_)
        )
    }
}
