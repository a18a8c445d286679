use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// Malformed JSON or JSONL input. `line` and `column` are 1-based.
    #[error("parse error in {file} at line {line}, column {column}: {message}")]
    Parse {
        file: PathBuf,
        line: usize,
        column: usize,
        message: String,
    },

    #[error("schema violation: slot {slot} is not defined for service {service}")]
    SchemaViolation { service: String, slot: String },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("configuration error: {}", .0.join("; "))]
    Config(Vec<String>),

    #[error("perturbation pool exhausted for {slot}: {reason}")]
    PoolExhausted { slot: String, reason: String },

    #[error("provider error: {0}")]
    Provider(String),

    #[error("teacher returned an empty reasoning for prompt {prompt_hash}")]
    EmptyReasoning { prompt_hash: String },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },

    #[error("degenerate vector: zero norm")]
    DegenerateVector,

    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("selection error: {0}")]
    Selection(String),

    #[error("consistency error: {0}")]
    Consistency(String),

    #[error("duplicate prediction for {0}")]
    Duplicate(String),

    #[error("accuracy matrix cell a[{j},{i}] is missing")]
    MissingCell { j: usize, i: usize },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(file: impl Into<PathBuf>, err: &serde_json::Error) -> Self {
        Error::Parse {
            file: file.into(),
            line: err.line(),
            column: err.column(),
            message: err.to_string(),
        }
    }
}
