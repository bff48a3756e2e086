//! Lead-inversion detection: fourteen features over the raw signal and its
//! delineation, a logistic classifier, and signal correction by negation.

use serde::{Deserialize, Serialize};

use crate::detect::{delineate_with, detect_beats_with, analyze, BeatObservation};
use crate::error::{CoreError, Result};
use crate::record::Record;
use crate::stats::{iqr, mean, median, std_dev};

/// The fourteen inversion features, in their canonical order.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InversionFeatures {
    /// Median of the per-beat QRS axis proxy.
    pub qrs_axis_median: f64,
    /// Median signed QRS amplitude.
    pub qrs_amp_median: f64,
    /// (mean - median) of the signal, normalized by its length.
    pub mean_median_diff_by_len: f64,
    /// (mean - median) of the signal, normalized by its amplitude range.
    pub mean_median_diff_by_amp: f64,
    /// Baseline value: mode of the signal (64-bin histogram).
    pub baseline_mode: f64,
    /// Ratio of signal energy above vs below the baseline.
    pub energy_ratio_above_below: f64,
    /// Dispersion of the signal (interquartile range).
    pub dispersion: f64,
    /// Mean of the samples beyond 3 standard deviations from the baseline.
    pub extreme_sample_mean: f64,
    pub subwave1_amp_median: f64,
    pub subwave2_amp_median: f64,
    pub subwave3_amp_median: f64,
    /// Detected P waves per second.
    pub p_count_norm: f64,
    /// QRS complexes per second.
    pub qrs_count_norm: f64,
    /// Detected T waves per second.
    pub t_count_norm: f64,
}

pub const INVERSION_DIM: usize = 14;

impl InversionFeatures {
    pub fn as_vec(&self) -> [f64; INVERSION_DIM] {
        [
            self.qrs_axis_median,
            self.qrs_amp_median,
            self.mean_median_diff_by_len,
            self.mean_median_diff_by_amp,
            self.baseline_mode,
            self.energy_ratio_above_below,
            self.dispersion,
            self.extreme_sample_mean,
            self.subwave1_amp_median,
            self.subwave2_amp_median,
            self.subwave3_amp_median,
            self.p_count_norm,
            self.qrs_count_norm,
            self.t_count_norm,
        ]
    }
}

/// Mode of the signal on a 64-bin histogram; ties break toward the bin
/// nearest the median.
fn histogram_mode(x: &[f64]) -> f64 {
    const BINS: usize = 64;
    let lo = x.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        return lo;
    }
    let width = (hi - lo) / BINS as f64;
    let mut counts = [0usize; BINS];
    for &v in x {
        let k = (((v - lo) / width) as usize).min(BINS - 1);
        counts[k] += 1;
    }
    let med = median(x);
    let med_bin = (((med - lo) / width) as usize).min(BINS - 1);
    let mut best = 0usize;
    for k in 1..BINS {
        let better = counts[k] > counts[best]
            || (counts[k] == counts[best]
                && (k as isize - med_bin as isize).abs() < (best as isize - med_bin as isize).abs());
        if better {
            best = k;
        }
    }
    lo + (best as f64 + 0.5) * width
}

/// Computes the fourteen inversion features.
pub fn inversion_features(r: &Record, obs: &[BeatObservation]) -> Result<InversionFeatures> {
    if obs.is_empty() {
        return Err(CoreError::EmptyInput("inversion_features needs beats"));
    }
    let x = r.samples_f64();
    let lo = x.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        return Err(CoreError::Degenerate(
            "inversion_features on zero-range signal",
        ));
    }
    let m = mean(&x);
    let med = median(&x);
    let mode = histogram_mode(&x);
    let sd = std_dev(&x);

    let (mut above, mut below) = (0.0f64, 0.0f64);
    for &v in &x {
        let d = v - mode;
        if d > 0.0 {
            above += d * d;
        } else if d < 0.0 {
            below += d * d;
        }
    }

    let extremes: Vec<f64> = x
        .iter()
        .cloned()
        .filter(|v| (v - mode).abs() > 3.0 * sd)
        .collect();
    let extreme_sample_mean = if extremes.is_empty() { 0.0 } else { mean(&extremes) };

    let axis: Vec<f64> = obs.iter().map(|b| b.axis_proxy).collect();
    let amp: Vec<f64> = obs.iter().map(|b| b.qrs.amplitude).collect();
    let sub = |k: usize| -> f64 {
        let vals: Vec<f64> = obs
            .iter()
            .filter_map(|b| b.subwaves.get(k).map(|s| s.amplitude))
            .collect();
        if vals.is_empty() {
            0.0
        } else {
            median(&vals)
        }
    };

    let secs = r.duration_ms() / 1000.0;
    Ok(InversionFeatures {
        qrs_axis_median: median(&axis),
        qrs_amp_median: median(&amp),
        mean_median_diff_by_len: (m - med) / x.len() as f64,
        mean_median_diff_by_amp: (m - med) / (hi - lo),
        baseline_mode: mode,
        energy_ratio_above_below: (above + 1e-12) / (below + 1e-12),
        dispersion: iqr(&x),
        extreme_sample_mean,
        subwave1_amp_median: sub(0),
        subwave2_amp_median: sub(1),
        subwave3_amp_median: sub(2),
        p_count_norm: obs.iter().filter(|b| b.p.present).count() as f64 / secs,
        qrs_count_norm: obs.len() as f64 / secs,
        t_count_norm: obs.iter().filter(|b| b.t.present).count() as f64 / secs,
    })
}

/// Logistic classifier over standardized inversion features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogisticModel {
    pub weights: Vec<f64>,
    pub bias: f64,
    pub feature_means: Vec<f64>,
    pub feature_scales: Vec<f64>,
    pub format_version: u32,
}

impl LogisticModel {
    /// Probability that the record is inverted.
    pub fn predict_proba(&self, f: &InversionFeatures) -> f64 {
        let x = f.as_vec();
        let mut z = self.bias;
        for k in 0..INVERSION_DIM {
            z += self.weights[k] * (x[k] - self.feature_means[k]) / self.feature_scales[k];
        }
        sigmoid(z)
    }

    pub fn predict(&self, f: &InversionFeatures) -> bool {
        self.predict_proba(f) > 0.5
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

const LAMBDA: f64 = 1.0;
const GRAD_TOL: f64 = 1e-6;
const MAX_NEWTON_ITERS: usize = 200;

/// Trains the inversion classifier by Newton iteration on the L2-regularized
/// logistic loss (lambda = 1.0), to gradient-norm tolerance 1e-6.
/// Deterministic: no randomness anywhere.
pub fn train_inversion(data: &[(InversionFeatures, bool)]) -> Result<LogisticModel> {
    let n = data.len();
    if n == 0 {
        return Err(CoreError::EmptyInput("train_inversion with no data"));
    }
    let pos = data.iter().filter(|(_, y)| *y).count();
    if pos == 0 || pos == n {
        return Err(CoreError::SingleClass);
    }

    // Standardization statistics from the training set only.
    let cols: Vec<Vec<f64>> = (0..INVERSION_DIM)
        .map(|k| data.iter().map(|(f, _)| f.as_vec()[k]).collect())
        .collect();
    let means: Vec<f64> = cols.iter().map(|c| mean(c)).collect();
    let scales: Vec<f64> = cols
        .iter()
        .map(|c| {
            let s = std_dev(c);
            if s > 1e-12 {
                s
            } else {
                1.0
            }
        })
        .collect();

    let xs: Vec<[f64; INVERSION_DIM]> = data
        .iter()
        .map(|(f, _)| {
            let v = f.as_vec();
            let mut z = [0.0; INVERSION_DIM];
            for k in 0..INVERSION_DIM {
                z[k] = (v[k] - means[k]) / scales[k];
            }
            z
        })
        .collect();
    let ys: Vec<f64> = data.iter().map(|(_, y)| if *y { 1.0 } else { 0.0 }).collect();

    // Parameter vector: 14 weights then the bias (bias unregularized).
    const D: usize = INVERSION_DIM + 1;
    let mut w = [0.0f64; D];

    let loss_grad = |w: &[f64; D]| -> (f64, [f64; D]) {
        let mut loss = 0.0;
        let mut grad = [0.0f64; D];
        for (x, &y) in xs.iter().zip(&ys) {
            let mut z = w[D - 1];
            for k in 0..INVERSION_DIM {
                z += w[k] * x[k];
            }
            let p = sigmoid(z);
            // Numerically stable cross entropy.
            loss += if z >= 0.0 {
                (1.0 + (-z).exp()).ln() + z * (1.0 - y)
            } else {
                (1.0 + z.exp()).ln() - z * y
            };
            let e = p - y;
            for k in 0..INVERSION_DIM {
                grad[k] += e * x[k];
            }
            grad[D - 1] += e;
        }
        for k in 0..INVERSION_DIM {
            loss += 0.5 * LAMBDA * w[k] * w[k];
            grad[k] += LAMBDA * w[k];
        }
        (loss, grad)
    };

    let (mut loss, mut grad) = loss_grad(&w);
    for _ in 0..MAX_NEWTON_ITERS {
        let gnorm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        if gnorm < GRAD_TOL {
            break;
        }
        // Hessian: X^T diag(p(1-p)) X + lambda I (bias row unregularized).
        let mut h = [[0.0f64; D]; D];
        for x in &xs {
            let mut z = w[D - 1];
            for k in 0..INVERSION_DIM {
                z += w[k] * x[k];
            }
            let p = sigmoid(z);
            let s = (p * (1.0 - p)).max(1e-12);
            let mut xb = [0.0f64; D];
            xb[..INVERSION_DIM].copy_from_slice(&x[..]);
            xb[D - 1] = 1.0;
            for a in 0..D {
                for b in a..D {
                    h[a][b] += s * xb[a] * xb[b];
                }
            }
        }
        for a in 0..D {
            for b in 0..a {
                h[a][b] = h[b][a];
            }
        }
        for k in 0..INVERSION_DIM {
            h[k][k] += LAMBDA;
        }
        let step = solve_spd(&mut h, &grad);
        // Backtracking line search.
        let mut t = 1.0;
        let mut improved = false;
        for _ in 0..30 {
            let mut wt = w;
            for k in 0..D {
                wt[k] -= t * step[k];
            }
            let (lt, gt) = loss_grad(&wt);
            if lt <= loss {
                w = wt;
                loss = lt;
                grad = gt;
                improved = true;
                break;
            }
            t *= 0.5;
        }
        if !improved {
            break;
        }
    }

    Ok(LogisticModel {
        weights: w[..INVERSION_DIM].to_vec(),
        bias: w[D - 1],
        feature_means: means,
        feature_scales: scales,
        format_version: 1,
    })
}

/// Solves H x = b for symmetric positive definite H (Gaussian elimination
/// with partial pivoting; H is small).
fn solve_spd<const D: usize>(h: &mut [[f64; D]; D], b: &[f64; D]) -> [f64; D] {
    let mut a = *h;
    let mut x = *b;
    for col in 0..D {
        let mut piv = col;
        for row in col + 1..D {
            if a[row][col].abs() > a[piv][col].abs() {
                piv = row;
            }
        }
        a.swap(col, piv);
        x.swap(col, piv);
        let d = a[col][col];
        if d.abs() < 1e-18 {
            continue;
        }
        for row in col + 1..D {
            let f = a[row][col] / d;
            for k in col..D {
                a[row][k] -= f * a[col][k];
            }
            x[row] -= f * x[col];
        }
    }
    for col in (0..D).rev() {
        let d = a[col][col];
        if d.abs() < 1e-18 {
            x[col] = 0.0;
            continue;
        }
        x[col] /= d;
        for row in 0..col {
            x[row] -= a[row][col] * x[col];
        }
    }
    x
}

/// Classifies the record and negates it when found inverted. Records too
/// short or empty for delineation are passed through unchanged.
pub fn correct_inversion(r: &Record, model: &LogisticModel) -> (Record, bool) {
    let sig = analyze(r);
    let anns = match detect_beats_with(r, &sig) {
        Ok(a) if !a.is_empty() => a,
        _ => return (r.clone(), false),
    };
    let obs = delineate_with(r, &sig, &anns);
    match inversion_features(r, &obs) {
        Ok(f) if model.predict(&f) => (r.negated(), true),
        _ => (r.clone(), false),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detect::{delineate, detect_beats};
    use crate::synth::{generate, generate_inversion_corpus, GenSpec};

    fn features_of(r: &Record) -> InversionFeatures {
        let anns = detect_beats(r).unwrap();
        let obs = delineate(r, &anns);
        inversion_features(r, &obs).unwrap()
    }

    #[test]
    fn flat_baseline_with_one_beat() {
        // Flat signal with a single rendered complex: the dispersion-style
        // features stay at the constant-baseline values.
        let fs = 300usize;
        let n = 3000;
        let mut x = vec![0.0f64; n];
        for i in 0..n {
            let d = (i as f64 - 1500.0) / 8.0;
            x[i] += 1400.0 * (-0.5 * d * d).exp();
        }
        let samples: Vec<i16> = x.iter().map(|&v| v.round() as i16).collect();
        let r = Record::new("one", fs as u32, 1000.0, samples).unwrap();
        let obs = delineate(
            &r,
            &[crate::detect::BeatAnnotation {
                sample_index: 1500,
                confidence: 1.0,
            }],
        );
        let f = inversion_features(&r, &obs).unwrap();
        assert_eq!(f.dispersion, 0.0);
        assert!(f.mean_median_diff_by_len.abs() < 1e-2);
        assert_eq!(f.qrs_count_norm, 0.1);
    }

    #[test]
    fn zero_range_and_zero_beats_error() {
        let flat = Record::new("flat", 300, 1000.0, vec![5i16; 3000]).unwrap();
        let obs = delineate(
            &flat,
            &[crate::detect::BeatAnnotation {
                sample_index: 1000,
                confidence: 1.0,
            }],
        );
        assert!(matches!(
            inversion_features(&flat, &obs),
            Err(CoreError::Degenerate(_))
        ));
        let (r, _) = generate(&GenSpec::normal(75.0, 2)).unwrap();
        assert!(matches!(
            inversion_features(&r, &[]),
            Err(CoreError::EmptyInput(_))
        ));
    }

    #[test]
    fn sign_flip_antisymmetry() {
        for seed in [11u64, 12, 13] {
            let (r, _) = generate(&GenSpec::normal(75.0, seed)).unwrap();
            let f = features_of(&r);
            let g = features_of(&r.negated());
            let negating = [
                (f.qrs_axis_median, g.qrs_axis_median, "axis"),
                (f.qrs_amp_median, g.qrs_amp_median, "amp"),
                (f.subwave1_amp_median, g.subwave1_amp_median, "sub1"),
                (f.subwave2_amp_median, g.subwave2_amp_median, "sub2"),
                (f.subwave3_amp_median, g.subwave3_amp_median, "sub3"),
            ];
            for (a, b, name) in negating {
                let tol = 1e-9 * a.abs().max(1.0);
                assert!((a + b).abs() <= tol, "{name}: {a} vs {b} (seed {seed})");
            }
            assert_eq!(f.p_count_norm, g.p_count_norm, "p count (seed {seed})");
            assert_eq!(f.qrs_count_norm, g.qrs_count_norm, "qrs count (seed {seed})");
            assert_eq!(f.t_count_norm, g.t_count_norm, "t count (seed {seed})");
            assert_eq!(f.dispersion, g.dispersion, "dispersion (seed {seed})");
        }
    }

    #[test]
    fn no_p_means_zero_p_count() {
        let mut spec = GenSpec::normal(75.0, 21);
        spec.p_present = false;
        let (r, _) = generate(&spec).unwrap();
        let f = features_of(&r);
        assert!(
            f.p_count_norm <= 0.3 * f.qrs_count_norm,
            "p rate {} vs qrs rate {}",
            f.p_count_norm,
            f.qrs_count_norm
        );
    }

    #[test]
    fn separable_toy_set_trains_to_perfection() {
        let mk = |v: f64| {
            let mut f = InversionFeatures {
                qrs_axis_median: v,
                qrs_amp_median: v,
                mean_median_diff_by_len: 0.0,
                mean_median_diff_by_amp: 0.0,
                baseline_mode: 0.0,
                energy_ratio_above_below: 1.0,
                dispersion: 1.0,
                extreme_sample_mean: v,
                subwave1_amp_median: v,
                subwave2_amp_median: 0.0,
                subwave3_amp_median: 0.0,
                p_count_norm: 1.0,
                qrs_count_norm: 1.0,
                t_count_norm: 1.0,
            };
            f.qrs_amp_median = v;
            f
        };
        let data = vec![(mk(1000.0), false), (mk(-1000.0), true)];
        let model = train_inversion(&data).unwrap();
        assert!(!model.predict(&data[0].0));
        assert!(model.predict(&data[1].0));
        // Determinism: identical data gives an identical model.
        let again = train_inversion(&data).unwrap();
        assert_eq!(
            serde_json::to_string(&model).unwrap(),
            serde_json::to_string(&again).unwrap()
        );
        // Single-class data is rejected.
        assert!(matches!(
            train_inversion(&vec![(mk(1.0), false), (mk(2.0), false)]),
            Err(CoreError::SingleClass)
        ));
    }

    #[test]
    fn corpus_training_separates_inverted_records() {
        let corpus = generate_inversion_corpus(40, 8);
        let rows: Vec<(InversionFeatures, bool)> = corpus
            .iter()
            .map(|(r, inv)| (features_of(r), *inv))
            .collect();
        let model = train_inversion(&rows).unwrap();
        let correct = rows
            .iter()
            .filter(|(f, y)| model.predict(f) == *y)
            .count();
        assert!(
            correct >= 36,
            "only {correct}/40 correct on the training corpus"
        );
        // Probabilities stay in (0, 1).
        for (f, _) in &rows {
            let p = model.predict_proba(f);
            assert!(p > 0.0 && p < 1.0);
        }
    }

    #[test]
    fn correct_inversion_fixes_negated_records() {
        let corpus = generate_inversion_corpus(40, 9);
        let rows: Vec<(InversionFeatures, bool)> = corpus
            .iter()
            .map(|(r, inv)| (features_of(r), *inv))
            .collect();
        let model = train_inversion(&rows).unwrap();

        let mut fixed = 0usize;
        let mut idempotent = 0usize;
        for (r, inv) in &corpus {
            let (corrected, was) = correct_inversion(r, &model);
            if was == *inv {
                fixed += 1;
            }
            let (_, again) = correct_inversion(&corrected, &model);
            if !again {
                idempotent += 1;
            }
        }
        assert!(fixed >= 36, "corrected {fixed}/40");
        assert!(idempotent >= 38, "idempotent on {idempotent}/40");
    }
}
