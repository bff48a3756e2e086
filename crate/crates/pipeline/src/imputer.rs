//! Missing-value handling for the global feature matrix: proportions carry a
//! 0 sentinel already; continuous fields impute to the training-set median.
//! The fitted statistics are serialized with the model.

use ecgc_core::features::{FeatureKind, GlobalFeatures};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Imputer {
    /// Replacement value per feature column.
    pub fill: Vec<f64>,
    pub format_version: u32,
}

impl Imputer {
    /// Learns per-column medians from the training rows.
    pub fn fit(rows: &[GlobalFeatures]) -> Imputer {
        let dim = GlobalFeatures::DIM;
        let mut fill = vec![0.0f64; dim];
        for (col, f) in fill.iter_mut().enumerate() {
            if GlobalFeatures::KINDS[col] == FeatureKind::Proportion {
                *f = 0.0;
                continue;
            }
            let mut vals: Vec<f64> = rows
                .iter()
                .map(|r| r.as_vec()[col])
                .filter(|v| v.is_finite())
                .collect();
            if vals.is_empty() {
                *f = 0.0;
            } else {
                vals.sort_by(|a, b| a.partial_cmp(b).unwrap());
                let m = vals.len();
                *f = if m % 2 == 1 {
                    vals[m / 2]
                } else {
                    0.5 * (vals[m / 2 - 1] + vals[m / 2])
                };
            }
        }
        Imputer {
            fill,
            format_version: 1,
        }
    }

    /// Returns the feature row with NaN replaced by the fitted fills.
    pub fn apply(&self, gf: &GlobalFeatures) -> Vec<f64> {
        gf.as_vec()
            .iter()
            .enumerate()
            .map(|(col, &v)| if v.is_finite() { v } else { self.fill[col] })
            .collect()
    }
}
