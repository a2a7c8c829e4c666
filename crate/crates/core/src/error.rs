use std::io;
use std::path::PathBuf;

use thiserror::Error;
use transdod_tensor::TensorError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("task {task} out of range for {tasks} tasks")]
    Task { task: usize, tasks: usize },
    #[error("format error at byte {offset}: {detail}")]
    Format { offset: u64, detail: String },
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("schedule error: {0}")]
    Schedule(String),
    #[error("undefined metric: {0}")]
    UndefinedMetric(String),
    #[error("non-finite loss at step {step} (task {task}): dice terms {dice:?}, ce terms {ce:?}")]
    NonFiniteLoss {
        step: u64,
        task: usize,
        dice: Vec<f64>,
        ce: Vec<f64>,
    },
    #[error("incompatible configuration, differing fields: {}", .0.join(", "))]
    Incompatible(Vec<String>),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn format(offset: u64, detail: impl Into<String>) -> Self {
        Error::Format {
            offset,
            detail: detail.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
