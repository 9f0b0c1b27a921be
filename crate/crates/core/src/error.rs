use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("invalid tensor: {0}")]
    InvalidTensor(String),

    #[error("label {label} out of range for {classes} classes (row {row})")]
    LabelOutOfRange {
        row: usize,
        label: usize,
        classes: usize,
    },

    #[error("row {row} has near-zero norm and cannot be normalized")]
    DegenerateRow { row: usize },

    #[error("backward: {0}")]
    Backward(String),

    #[error("non-finite {what} at {location}")]
    NonFinite { what: String, location: String },

    #[error("sample count mismatch: {left} vs {right}")]
    SampleCountMismatch { left: usize, right: usize },

    #[error("probe too small: {n} samples, need at least {min}")]
    ProbeTooSmall { n: usize, min: usize },

    #[error("degenerate (constant) representation: {tag}")]
    DegenerateRepresentation { tag: String },

    #[error("invalid image batch: {0}")]
    InvalidImages(String),

    #[error("split {0} cannot be used here")]
    WrongSplit(String),

    #[error("frozen model: {0}")]
    Frozen(String),

    #[error("model error: {0}")]
    Model(String),

    #[error("task {task}: {source}")]
    Task {
        task: String,
        #[source]
        source: Box<Error>,
    },

    #[error("aggregation: {0}")]
    Aggregation(String),

    #[error("replay table has no entry for task {task} (pool {pool})")]
    MissingTableEntry { task: String, pool: String },

    #[error("config field `{field}`: {message}")]
    Config { field: String, message: String },

    #[error("format error in {path}: {message}")]
    Format { path: PathBuf, message: String },

    #[error("manifest verification failed: {0}")]
    Verification(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            message: message.into(),
        }
    }

    pub fn format(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            message: message.into(),
        }
    }

    pub fn for_task(self, task: &str) -> Self {
        Error::Task {
            task: task.to_string(),
            source: Box::new(self),
        }
    }

    /// True for errors caused by bad user input (config, fixtures) rather than
    /// a failure while running.
    pub fn is_validation(&self) -> bool {
        match self {
            Error::Config { .. }
            | Error::Format { .. }
            | Error::MissingTableEntry { .. }
            | Error::Verification(_) => true,
            Error::Task { source, .. } => source.is_validation(),
            _ => false,
        }
    }
}
