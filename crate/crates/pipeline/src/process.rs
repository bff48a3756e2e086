//! Per-record processing: detection, inversion correction, interpretation
//! and feature extraction, in that order.

use ecgc_core::detect::{analyze, delineate_with, detect_beats_with};
use ecgc_core::features::{
    beat_features_with, global_features_with, GlobalFeatures, BEAT_FEATURE_DIM,
};
use ecgc_core::interpret::interpret_with;
use ecgc_core::inversion::{inversion_features, LogisticModel};
use ecgc_core::record::Record;

/// Features of one record, ready for the classifiers.
#[derive(Debug, Clone)]
pub struct ProcessedRecord {
    pub global: GlobalFeatures,
    /// One row per beat; never empty (a single zero row stands in for
    /// records with no usable beats).
    pub beats: Vec<Vec<f64>>,
    pub was_inverted: bool,
}

impl ProcessedRecord {
    fn sentinel() -> ProcessedRecord {
        ProcessedRecord {
            global: GlobalFeatures::sentinel(),
            beats: vec![vec![0.0; BEAT_FEATURE_DIM]],
            was_inverted: false,
        }
    }
}

/// Runs the full per-record pipeline. Record-level failures (too short,
/// degenerate, no beats) degrade to an all-sentinel row instead of an error;
/// its zero quality leans the classifiers toward the noisy class.
pub fn process_record(r: &Record, inversion: &LogisticModel) -> ProcessedRecord {
    let sig = analyze(r);
    let anns = match detect_beats_with(r, &sig) {
        Ok(a) if !a.is_empty() => a,
        _ => return ProcessedRecord::sentinel(),
    };
    let obs = delineate_with(r, &sig, &anns);

    // Inversion is assessed on the conduction-level delineation and fixed
    // before rhythm interpretation.
    let inverted = match inversion_features(r, &obs) {
        Ok(f) => inversion.predict(&f),
        Err(_) => false,
    };
    let (record, sig, obs) = if inverted {
        let corrected = r.negated();
        let sig2 = analyze(&corrected);
        let anns2 = match detect_beats_with(&corrected, &sig2) {
            Ok(a) if !a.is_empty() => a,
            _ => return ProcessedRecord::sentinel(),
        };
        let obs2 = delineate_with(&corrected, &sig2, &anns2);
        (corrected, sig2, obs2)
    } else {
        (r.clone(), sig, obs)
    };

    let itp = interpret_with(&record, &sig, &obs);
    let global = global_features_with(&record, &sig, &itp);
    let mut beats = beat_features_with(&record, &sig, &itp);
    if beats.is_empty() {
        beats.push(vec![0.0; BEAT_FEATURE_DIM]);
    }
    ProcessedRecord {
        global,
        beats,
        was_inverted: inverted,
    }
}
