use thiserror::Error;

use crate::geometry::GeometryError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("unsupported image size {0}x{1}: both sides must be positive multiples of {2}")]
    UnsupportedImageSize(u32, u32, u32),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("invalid file format: {0}")]
    Format(String),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("malformed annotation records at indices {indices:?}: {reason}")]
    Annotation { indices: Vec<usize>, reason: String },
    #[error("cost matrix has {rows} predictions but {cols} targets")]
    TooFewPredictions { rows: usize, cols: usize },
    #[error("empty category list")]
    EmptyCategories,
    #[error("training diverged at step {step}: {detail}")]
    Diverged { step: usize, detail: String },
    #[error("checkpoint mismatch: {0}")]
    Checkpoint(String),
    #[error("image decode error: {0}")]
    Image(String),
}

pub type Result<T> = std::result::Result<T, Error>;
