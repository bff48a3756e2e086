//! The challenge metric and the cross-validation harness.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use ecgc_core::record::{Record, RecordClass};
use ecgc_core::rng::mix_seed;
use ecgc_core::stats::{mean, std_dev};

use crate::stacked::{level0_probs, train_stacked, PipelineConfig};
use crate::{folds, process_record, PipelineError, Result, CLASS_ORDER};

/// Confusion matrix, per-class F1 and the challenge score: the mean F1 of
/// the N, A and O classes. The noisy class is reported but not scored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    /// confusion[truth][prediction] in canonical class order.
    pub confusion: Vec<Vec<usize>>,
    pub f1: Vec<f64>,
    pub challenge_score: f64,
}

/// Computes per-class F1 = 2TP / (2TP + FP + FN) and the challenge score.
pub fn challenge_score(truth: &[RecordClass], pred: &[RecordClass]) -> Result<EvaluationReport> {
    if truth.is_empty() {
        return Err(PipelineError::EmptyInput("challenge_score truth"));
    }
    if truth.len() != pred.len() {
        return Err(PipelineError::LabelMismatch(format!(
            "{} truths vs {} predictions",
            truth.len(),
            pred.len()
        )));
    }
    let mut confusion = vec![vec![0usize; 4]; 4];
    for (t, p) in truth.iter().zip(pred) {
        confusion[t.index()][p.index()] += 1;
    }
    let mut f1 = vec![0.0f64; 4];
    for k in 0..4 {
        let tp = confusion[k][k];
        let fp: usize = (0..4).filter(|&t| t != k).map(|t| confusion[t][k]).sum();
        let fn_: usize = (0..4).filter(|&p| p != k).map(|p| confusion[k][p]).sum();
        let denom = 2 * tp + fp + fn_;
        f1[k] = if denom == 0 {
            0.0
        } else {
            2.0 * tp as f64 / denom as f64
        };
    }
    // Mean F1 of N, A, O; the noisy class is excluded from the score.
    let scored: Vec<f64> = CLASS_ORDER
        .iter()
        .enumerate()
        .filter(|(_, c)| **c != RecordClass::Noisy)
        .map(|(k, _)| f1[k])
        .collect();
    Ok(EvaluationReport {
        confusion,
        f1,
        challenge_score: mean(&scored),
    })
}

/// Per-fold scores for the stacked model and each level-0 model alone.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CvReport {
    pub k: usize,
    pub gbt_only: Vec<EvaluationReport>,
    pub seq_only: Vec<EvaluationReport>,
    pub stacked: Vec<EvaluationReport>,
}

impl CvReport {
    pub fn summary(reports: &[EvaluationReport]) -> (f64, f64) {
        let scores: Vec<f64> = reports.iter().map(|r| r.challenge_score).collect();
        (mean(&scores), std_dev(&scores))
    }

    /// Plain-text table: one row per method, fold columns plus mean (SD).
    pub fn text_table(&self) -> String {
        let mut out = String::new();
        out.push_str("method  ");
        for f in 0..self.k {
            out.push_str(&format!("{f:>7}"));
        }
        out.push_str("  mean (SD)\n");
        for (name, reports) in [
            ("gbt", &self.gbt_only),
            ("seq", &self.seq_only),
            ("stacked", &self.stacked),
        ] {
            out.push_str(&format!("{name:<8}"));
            for r in reports {
                out.push_str(&format!("{:>7.3}", r.challenge_score));
            }
            let (m, sd) = CvReport::summary(reports);
            out.push_str(&format!("  {m:.3} ({sd:.3})\n"));
        }
        out
    }
}

fn argmax(xs: &[f64]) -> usize {
    let mut best = 0usize;
    for k in 1..xs.len() {
        if xs[k] > xs[best] {
            best = k;
        }
    }
    best
}

/// Stratified k-fold cross-validation: each fold trains a full stacked
/// model on the remainder and evaluates the stacked prediction alongside
/// each level-0 model alone.
pub fn cross_validate(
    records: &[Record],
    labels: &[RecordClass],
    k: usize,
    cfg: &PipelineConfig,
    seed: u64,
) -> Result<CvReport> {
    if records.is_empty() || k < 2 {
        return Err(PipelineError::EmptyInput("cross_validate needs data and k >= 2"));
    }
    let smallest = RecordClass::ALL
        .iter()
        .map(|&c| labels.iter().filter(|&&l| l == c).count())
        .min()
        .unwrap_or(0);
    if k > smallest {
        return Err(PipelineError::TooManyFolds { k, smallest });
    }

    let ids: Vec<String> = records.iter().map(|r| r.id.clone()).collect();
    let fold_of = folds::stratified_folds(&ids, labels, k, mix_seed(seed, 11, 0));

    let fold_reports: Vec<Result<(EvaluationReport, EvaluationReport, EvaluationReport)>> = (0..k)
        .into_par_iter()
        .map(|fold| {
            let train_idx: Vec<usize> =
                (0..records.len()).filter(|&i| fold_of[i] != fold).collect();
            let test_idx: Vec<usize> =
                (0..records.len()).filter(|&i| fold_of[i] == fold).collect();
            log::info!("cv fold {fold}: {} train / {} test", train_idx.len(), test_idx.len());

            let train_recs: Vec<Record> = train_idx.iter().map(|&i| records[i].clone()).collect();
            let train_labels: Vec<RecordClass> =
                train_idx.iter().map(|&i| labels[i]).collect();
            let model = train_stacked(&train_recs, &train_labels, cfg, mix_seed(seed, 13, fold as u64))?;

            let truth: Vec<RecordClass> = test_idx.iter().map(|&i| labels[i]).collect();
            let mut gbt_pred = Vec::with_capacity(test_idx.len());
            let mut seq_pred = Vec::with_capacity(test_idx.len());
            let mut stack_pred = Vec::with_capacity(test_idx.len());
            for &i in &test_idx {
                let p = process_record(&records[i], &model.inversion);
                let (seq_probs, gbt_probs) = level0_probs(&model, &p)?;
                gbt_pred.push(RecordClass::from_index(argmax(&gbt_probs)).unwrap());
                seq_pred.push(RecordClass::from_index(argmax(&seq_probs)).unwrap());
                let row = crate::stacked::metafeature_row(&seq_probs, &gbt_probs);
                let (class_idx, _) = model.lda.predict(&row)?;
                stack_pred.push(RecordClass::from_index(class_idx).unwrap());
            }
            Ok((
                challenge_score(&truth, &gbt_pred)?,
                challenge_score(&truth, &seq_pred)?,
                challenge_score(&truth, &stack_pred)?,
            ))
        })
        .collect();

    let mut gbt_only = Vec::with_capacity(k);
    let mut seq_only = Vec::with_capacity(k);
    let mut stacked = Vec::with_capacity(k);
    for r in fold_reports {
        let (g, s, st) = r?;
        gbt_only.push(g);
        seq_only.push(s);
        stacked.push(st);
    }
    Ok(CvReport {
        k,
        gbt_only,
        seq_only,
        stacked,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_predictions_score_one() {
        let truth = vec![
            RecordClass::Normal,
            RecordClass::Afib,
            RecordClass::Other,
            RecordClass::Noisy,
        ];
        let rep = challenge_score(&truth, &truth).unwrap();
        assert_eq!(rep.challenge_score, 1.0);
        assert!(rep.f1.iter().all(|&f| f == 1.0));
    }

    #[test]
    fn hand_computed_confusion_case() {
        use RecordClass::*;
        let truth = vec![Normal, Normal, Afib, Other];
        let pred = vec![Normal, Afib, Afib, Other];
        let rep = challenge_score(&truth, &pred).unwrap();
        assert!((rep.f1[0] - 2.0 / 3.0).abs() < 1e-12);
        assert!((rep.f1[1] - 2.0 / 3.0).abs() < 1e-12);
        assert!((rep.f1[2] - 1.0).abs() < 1e-12);
        assert!((rep.challenge_score - 7.0 / 9.0).abs() < 1e-12);
    }

    #[test]
    fn all_noise_scores_zero() {
        use RecordClass::*;
        let truth = vec![Normal, Afib, Other, Noisy];
        let pred = vec![Noisy; 4];
        let rep = challenge_score(&truth, &pred).unwrap();
        assert_eq!(rep.challenge_score, 0.0);
    }

    #[test]
    fn score_is_permutation_invariant() {
        use RecordClass::*;
        let truth = vec![Normal, Normal, Afib, Other, Noisy, Other];
        let pred = vec![Normal, Afib, Afib, Other, Other, Noisy];
        let a = challenge_score(&truth, &pred).unwrap();
        let perm = [5usize, 3, 0, 4, 1, 2];
        let truth2: Vec<_> = perm.iter().map(|&i| truth[i]).collect();
        let pred2: Vec<_> = perm.iter().map(|&i| pred[i]).collect();
        let b = challenge_score(&truth2, &pred2).unwrap();
        assert_eq!(a.challenge_score, b.challenge_score);
        assert_eq!(a.f1, b.f1);
    }

    #[test]
    fn empty_and_mismatched_inputs_error() {
        assert!(challenge_score(&[], &[]).is_err());
        assert!(challenge_score(&[RecordClass::Normal], &[]).is_err());
    }
}
