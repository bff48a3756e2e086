//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, CoreError>;

#[derive(Error, Debug)]
pub enum CoreError {
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("malformed file {path}: {reason}")]
    Format { path: String, reason: String },

    #[error("payload length mismatch in {path}: header declares {expected} samples, payload holds {actual}")]
    LengthMismatch {
        path: String,
        expected: usize,
        actual: usize,
    },

    #[error("invalid record {id}: {reason}")]
    InvalidRecord { id: String, reason: String },

    #[error("unknown class token {token:?}")]
    UnknownClass { token: String },

    #[error("duplicate record id {id:?} in label file")]
    DuplicateId { id: String },

    #[error("record too short: {actual_ms} ms (need at least {min_ms} ms)")]
    TooShort { actual_ms: f64, min_ms: f64 },

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("degenerate signal: {0}")]
    Degenerate(&'static str),

    #[error("training data contains a single class")]
    SingleClass,

    #[error("infeasible generator spec: {0}")]
    InfeasibleSpec(String),
}
