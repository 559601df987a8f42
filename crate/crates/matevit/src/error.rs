//! Crate-level error type for model, data, and CLI plumbing.

use thiserror::Error;

use crate::numerics::TensorError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("unknown task id {0}")]
    UnknownTask(usize),
    #[error("task {0} is missing from the dataset")]
    TaskMissing(usize),
    #[error("dataset error: {0}")]
    Dataset(String),
    #[error("{path}: {msg}")]
    DatasetFile { path: String, msg: String },
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("metrics error: {0}")]
    Metrics(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
    #[error("png error: {0}")]
    Png(#[from] png::EncodingError),
}

impl Error {
    /// Process exit code: configuration and usage problems map to 1,
    /// runtime and numeric failures to 2.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 1,
            _ => 2,
        }
    }
}
