//! Single-lead ECG processing: record storage, beat detection and
//! delineation, lead-inversion correction, abductive rhythm interpretation,
//! and physiologically meaningful feature extraction.
//!
//! The crate is organized around one record at a time. A [`Record`] is read
//! from disk (or synthesized by [`synth`]), beats are located by
//! [`detect::detect_beats`] and delineated by [`detect::delineate`], the
//! signal polarity is fixed by [`inversion`], the rhythm structure is
//! recovered by [`interpret::interpret`], and finally [`features`] turns the
//! record plus its interpretation into the global feature vector and the
//! per-beat feature sequence consumed by downstream classifiers.
//!
//! Everything here is deterministic: identical inputs (and seeds, where a
//! seed is part of the input) produce identical outputs.

pub mod detect;
pub mod dsp;
pub mod error;
pub mod features;
pub mod interpret;
pub mod inversion;
pub mod record;
pub mod rng;
pub mod stats;
pub mod synth;

pub use error::{CoreError, Result};
pub use record::{LabelFile, Record, RecordClass};
