use std::path::PathBuf;

/// Errors produced by the engine.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch: {op} got {left:?} and {right:?}")]
    Dimension {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("invalid input: {0}")]
    Input(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("unknown task {task} ({registered} registered)")]
    UnknownTask { task: usize, registered: usize },

    #[error("invalid state: {0}")]
    State(String),

    #[error("malformed file {path}: {reason} at byte offset {offset}")]
    Format {
        path: PathBuf,
        offset: u64,
        reason: String,
    },

    #[error("non-finite gradient in `{param}` at optimizer step {step}")]
    NonFinite { param: String, step: u64 },

    #[error("run record incomplete: {0}")]
    IncompleteRecord(String),

    #[error("detections imply {count} tasks, exceeding the limit of {limit}")]
    RunawayDetection { count: usize, limit: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
