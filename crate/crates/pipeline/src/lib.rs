//! End-to-end orchestration: per-record processing, stacked training with
//! out-of-fold metafeatures, prediction, the challenge metric and the
//! cross-validation harness.

pub mod eval;
pub mod folds;
pub mod imputer;
pub mod process;
pub mod stacked;

use ecgc_core::record::RecordClass;
use thiserror::Error;

pub use eval::{challenge_score, cross_validate, CvReport, EvaluationReport};
pub use imputer::Imputer;
pub use process::{process_record, ProcessedRecord};
pub use stacked::{predict, train_stacked, train_stacked_with_audit, PipelineConfig, StackedModel, StackingAudit};

pub type Result<T> = std::result::Result<T, PipelineError>;

#[derive(Error, Debug)]
pub enum PipelineError {
    #[error(transparent)]
    Core(#[from] ecgc_core::CoreError),

    #[error(transparent)]
    Ml(#[from] ecgc_ml::MlError),

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("malformed model bundle: {0}")]
    Bundle(String),

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("labels and records disagree: {0}")]
    LabelMismatch(String),

    #[error("class {class} has {found} records, need at least {needed}")]
    ClassTooSmall {
        class: RecordClass,
        found: usize,
        needed: usize,
    },

    #[error("k = {k} exceeds the smallest class count {smallest}")]
    TooManyFolds { k: usize, smallest: usize },
}

/// Fixed class order used in every serialized artifact: N, A, O, ~.
pub const CLASS_ORDER: [RecordClass; 4] = RecordClass::ALL;

/// The class whose probability is dropped from each level-0 model before
/// stacking, to avoid collinearity of the probability simplex.
pub const DROPPED_CLASS: RecordClass = RecordClass::Noisy;

/// Level-0 probability columns kept per model.
pub const KEPT_CLASSES: usize = 3;
