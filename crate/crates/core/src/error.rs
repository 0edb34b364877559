use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("cannot resample an empty point cloud")]
    EmptyShape,

    #[error("point ({0:.4}, {1:.4}) lies outside the raster extent")]
    OutOfBounds(f64, f64),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("parameter `{0}` has no gradient")]
    MissingGradient(String),

    #[error("parse error in {path} at byte {offset}: {msg}")]
    Parse {
        path: PathBuf,
        offset: u64,
        msg: String,
    },

    #[error("missing file: {0}")]
    MissingFile(PathBuf),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("dataset hash mismatch: manifest says {expected}, contents hash to {actual}")]
    HashMismatch { expected: String, actual: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
