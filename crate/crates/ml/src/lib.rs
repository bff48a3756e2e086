//! Learning primitives for the screening pipeline: gradient boosted trees
//! with a softmax objective, a recurrent sequence classifier trained by
//! backpropagation through time, and linear discriminant analysis.
//!
//! Every training entry point is bit-deterministic given (data,
//! hyperparameters, seed).

pub mod gbt;
pub mod lda;
pub mod seq;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, MlError>;

#[derive(Error, Debug)]
pub enum MlError {
    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("non-finite feature value at row {row}, column {col}")]
    NonFinite { row: usize, col: usize },

    #[error("need at least {needed} examples of class {class}, found {found}")]
    ClassTooSmall {
        class: usize,
        needed: usize,
        found: usize,
    },

    #[error("fewer than two classes present in training data")]
    SingleClass,

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("covariance is singular even after shrinkage")]
    SingularCovariance,

    #[error("sequence {index} is empty")]
    EmptySequence { index: usize },
}

/// Numerically stable softmax.
pub(crate) fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.iter().map(|e| e / sum).collect()
}
