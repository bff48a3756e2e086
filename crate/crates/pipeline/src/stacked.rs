//! Stacked classifier: out-of-fold metafeature generation over a 6-fold
//! stratified split, a linear-discriminant meta-classifier, and a final
//! refit of every level-0 model on all data.

use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use ecgc_core::detect::{analyze, delineate_with, detect_beats_with};
use ecgc_core::features::{GlobalFeatures, BEAT_FEATURE_DIM};
use ecgc_core::inversion::{inversion_features, train_inversion, InversionFeatures, LogisticModel};
use ecgc_core::record::{Record, RecordClass};
use ecgc_core::rng::mix_seed;
use ecgc_ml::gbt::{gbt_train, GbtHyperParams, GbtModel};
use ecgc_ml::lda::{lda_train, LdaModel};
use ecgc_ml::seq::{seq_train, SeqConfig, SequenceModel, TrainConfig};

use crate::imputer::Imputer;
use crate::process::{process_record, ProcessedRecord};
use crate::{folds, PipelineError, Result, CLASS_ORDER, DROPPED_CLASS, KEPT_CLASSES};

// Seed stream tags.
const SEED_INVERSION: u64 = 1;
const SEED_STACK_FOLDS: u64 = 2;
const SEED_SEQ: u64 = 3;
const SEED_GBT: u64 = 4;
/// Fold tag for the final refit on all data.
const REFIT_TAG: u64 = 0xFF;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    /// Outer folds for metafeature generation.
    pub stack_folds: usize,
    /// Sequence classifiers trained per level-0 ensemble.
    pub n_nets: usize,
    pub gbt: GbtHyperParams,
    /// Cap on sequence-training epochs (the full regimen runs to early
    /// stopping; desk-scale runs reduce this).
    pub seq_epochs: usize,
    /// Records sampled (with their negations) to train the inversion model.
    pub inversion_sample: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            stack_folds: 6,
            n_nets: 3,
            gbt: GbtHyperParams::default(),
            seq_epochs: 200,
            inversion_sample: 150,
        }
    }
}

impl PipelineConfig {
    fn seq_train_config(&self) -> TrainConfig {
        TrainConfig {
            max_epochs: self.seq_epochs,
            ..Default::default()
        }
    }
}

/// The trained stack: inversion correction, preprocessing statistics, the
/// boosted-tree and sequence level-0 models, and the meta-classifier.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StackedModel {
    pub config: PipelineConfig,
    pub inversion: LogisticModel,
    pub imputer: Imputer,
    pub gbt: GbtModel,
    pub seqs: Vec<SequenceModel>,
    pub lda: LdaModel,
    pub format_version: u32,
}

/// Bookkeeping from a stacking run, for audits and tests.
#[derive(Debug, Clone)]
pub struct StackingAudit {
    /// Outer-fold assignment per record.
    pub fold_of: Vec<usize>,
    /// Out-of-fold metafeature row per record (width 6).
    pub metafeatures: Vec<Vec<f64>>,
}

fn class_indices(labels: &[RecordClass]) -> Vec<usize> {
    labels.iter().map(|c| c.index()).collect()
}

/// Mean of the sequence-net probabilities, with the dropped-class column
/// removed, concatenated with the tree model's kept probabilities.
pub(crate) fn metafeature_row(seq_probs: &[f64], gbt_probs: &[f64]) -> Vec<f64> {
    let mut row = Vec::with_capacity(2 * KEPT_CLASSES);
    for (k, class) in CLASS_ORDER.iter().enumerate() {
        if *class != DROPPED_CLASS {
            row.push(seq_probs[k]);
        }
    }
    for (k, class) in CLASS_ORDER.iter().enumerate() {
        if *class != DROPPED_CLASS {
            row.push(gbt_probs[k]);
        }
    }
    row
}

/// Level-0 predictions for one processed record.
pub(crate) fn level0_probs(
    m: &StackedModel,
    p: &ProcessedRecord,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let x = m.imputer.apply(&p.global);
    let gbt_probs = m.gbt.predict_proba(&x)?;
    let mut seq_probs = vec![0.0f64; 4];
    for net in &m.seqs {
        let p = net.predict_proba(&p.beats)?;
        for k in 0..4 {
            seq_probs[k] += p[k] / m.seqs.len() as f64;
        }
    }
    Ok((seq_probs, gbt_probs))
}

/// Trains the sequence ensemble: `n_nets` classifiers on different
/// stratified validation splits, per the sub-bagging regimen.
fn train_seq_ensemble(
    sequences: &[Vec<Vec<f64>>],
    labels: &[usize],
    cfg: &PipelineConfig,
    seed: u64,
    fold_tag: u64,
) -> Result<Vec<SequenceModel>> {
    let seq_cfg = SeqConfig::standard(BEAT_FEATURE_DIM);
    let tc = cfg.seq_train_config();
    let results: Vec<Result<SequenceModel>> = (0..cfg.n_nets)
        .into_par_iter()
        .map(|net| {
            let net_seed = mix_seed(seed, SEED_SEQ, fold_tag * 16 + net as u64);
            let (model, _log) = seq_train(sequences, labels, &seq_cfg, &tc, net_seed)?;
            Ok(model)
        })
        .collect();
    results.into_iter().collect()
}

/// Trains the inversion classifier from the corpus itself: a seeded sample
/// of records paired with their negations.
fn train_inversion_from(records: &[Record], cfg: &PipelineConfig, seed: u64) -> Result<LogisticModel> {
    let take = cfg.inversion_sample.min(records.len()).max(2);
    // Spread the sample across the corpus deterministically.
    let stride = (records.len() as f64 / take as f64).max(1.0);
    let chosen: Vec<usize> = (0..take)
        .map(|k| ((k as f64 * stride) as usize).min(records.len() - 1))
        .collect();

    let rows: Vec<Option<(InversionFeatures, bool)>> = chosen
        .par_iter()
        .flat_map(|&i| {
            let r = &records[i];
            [false, true]
                .into_par_iter()
                .map(move |negate| {
                    let rec = if negate { r.negated() } else { r.clone() };
                    let sig = analyze(&rec);
                    let anns = detect_beats_with(&rec, &sig).ok()?;
                    if anns.is_empty() {
                        return None;
                    }
                    let obs = delineate_with(&rec, &sig, &anns);
                    inversion_features(&rec, &obs).ok().map(|f| (f, negate))
                })
        })
        .collect();
    let rows: Vec<(InversionFeatures, bool)> = rows.into_iter().flatten().collect();
    if rows.iter().filter(|(_, y)| *y).count() == 0
        || rows.iter().filter(|(_, y)| !*y).count() == 0
    {
        return Err(PipelineError::EmptyInput(
            "no usable records for inversion training",
        ));
    }
    let _ = seed;
    Ok(train_inversion(&rows)?)
}

/// Trains the full stacked classifier.
pub fn train_stacked(
    records: &[Record],
    labels: &[RecordClass],
    cfg: &PipelineConfig,
    seed: u64,
) -> Result<StackedModel> {
    Ok(train_stacked_with_audit(records, labels, cfg, seed)?.0)
}

/// As `train_stacked`, also returning fold assignments and the metafeature
/// table for out-of-fold audits.
pub fn train_stacked_with_audit(
    records: &[Record],
    labels: &[RecordClass],
    cfg: &PipelineConfig,
    seed: u64,
) -> Result<(StackedModel, StackingAudit)> {
    if records.is_empty() {
        return Err(PipelineError::EmptyInput("train_stacked records"));
    }
    if records.len() != labels.len() {
        return Err(PipelineError::LabelMismatch(format!(
            "{} records vs {} labels",
            records.len(),
            labels.len()
        )));
    }
    for class in RecordClass::ALL {
        let found = labels.iter().filter(|&&c| c == class).count();
        if found < cfg.stack_folds {
            return Err(PipelineError::ClassTooSmall {
                class,
                found,
                needed: cfg.stack_folds,
            });
        }
    }

    log::info!("training inversion model on {} records", records.len());
    let inversion = train_inversion_from(records, cfg, mix_seed(seed, SEED_INVERSION, 0))?;

    log::info!("processing {} records", records.len());
    let processed: Vec<ProcessedRecord> = records
        .par_iter()
        .map(|r| process_record(r, &inversion))
        .collect();

    let imputer = Imputer::fit(&processed.iter().map(|p| p.global.clone()).collect::<Vec<_>>());
    let x_rows: Vec<Vec<f64>> = processed.iter().map(|p| imputer.apply(&p.global)).collect();
    let x_flat: Vec<f64> = x_rows.iter().flatten().cloned().collect();
    let y: Vec<usize> = class_indices(labels);
    let sequences: Vec<Vec<Vec<f64>>> = processed.iter().map(|p| p.beats.clone()).collect();

    // Out-of-fold metafeatures over the stratified outer folds.
    let ids: Vec<String> = records.iter().map(|r| r.id.clone()).collect();
    let fold_of = folds::stratified_folds(
        &ids,
        labels,
        cfg.stack_folds,
        mix_seed(seed, SEED_STACK_FOLDS, 0),
    );

    let fold_results: Vec<Result<Vec<(usize, Vec<f64>)>>> = (0..cfg.stack_folds)
        .into_par_iter()
        .map(|fold| {
            let train_idx: Vec<usize> =
                (0..records.len()).filter(|&i| fold_of[i] != fold).collect();
            let test_idx: Vec<usize> =
                (0..records.len()).filter(|&i| fold_of[i] == fold).collect();
            log::info!(
                "stack fold {fold}: {} train / {} test",
                train_idx.len(),
                test_idx.len()
            );

            let train_seqs: Vec<Vec<Vec<f64>>> =
                train_idx.iter().map(|&i| sequences[i].clone()).collect();
            let train_y: Vec<usize> = train_idx.iter().map(|&i| y[i]).collect();
            let nets = train_seq_ensemble(&train_seqs, &train_y, cfg, seed, fold as u64)?;

            let train_x: Vec<f64> = train_idx
                .iter()
                .flat_map(|&i| x_rows[i].clone())
                .collect();
            let gbt = gbt_train(
                &train_x,
                GlobalFeatures::DIM,
                &train_y,
                4,
                &cfg.gbt,
                mix_seed(seed, SEED_GBT, fold as u64),
            )?;

            let mut rows = Vec::with_capacity(test_idx.len());
            for &i in &test_idx {
                let mut seq_probs = vec![0.0f64; 4];
                for net in &nets {
                    let p = net.predict_proba(&sequences[i])?;
                    for k in 0..4 {
                        seq_probs[k] += p[k] / nets.len() as f64;
                    }
                }
                let gbt_probs = gbt.predict_proba(&x_rows[i])?;
                rows.push((i, metafeature_row(&seq_probs, &gbt_probs)));
            }
            Ok(rows)
        })
        .collect();

    let mut metafeatures: Vec<Vec<f64>> = vec![Vec::new(); records.len()];
    for fold in fold_results {
        for (i, row) in fold? {
            metafeatures[i] = row;
        }
    }
    debug_assert!(metafeatures.iter().all(|r| r.len() == 2 * KEPT_CLASSES));

    let meta_flat: Vec<f64> = metafeatures.iter().flatten().cloned().collect();
    let lda = lda_train(&meta_flat, 2 * KEPT_CLASSES, &y, 4)?;

    // Final level-0 refit on all data.
    log::info!("refitting level-0 models on all data");
    let (seqs, gbt) = rayon::join(
        || train_seq_ensemble(&sequences, &y, cfg, seed, REFIT_TAG),
        || {
            gbt_train(
                &x_flat,
                GlobalFeatures::DIM,
                &y,
                4,
                &cfg.gbt,
                mix_seed(seed, SEED_GBT, REFIT_TAG),
            )
        },
    );

    let model = StackedModel {
        config: cfg.clone(),
        inversion,
        imputer,
        gbt: gbt?,
        seqs: seqs?,
        lda,
        format_version: 1,
    };
    Ok((
        model,
        StackingAudit {
            fold_of,
            metafeatures,
        },
    ))
}

/// Predicts one record: level-0 probabilities feed the meta-classifier.
/// Returns the class and the four posteriors in canonical order.
pub fn predict(m: &StackedModel, r: &Record) -> Result<(RecordClass, Vec<f64>)> {
    let p = process_record(r, &m.inversion);
    let (seq_probs, gbt_probs) = level0_probs(m, &p)?;
    let row = metafeature_row(&seq_probs, &gbt_probs);
    let (class_idx, posteriors) = m.lda.predict(&row)?;
    Ok((RecordClass::from_index(class_idx).unwrap(), posteriors))
}

// ---------------------------------------------------------------------------
// Bundle serialization
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    class_order: Vec<String>,
    dropped_class: String,
    n_nets: usize,
    components: Vec<String>,
}

impl StackedModel {
    /// Writes the model as a versioned directory: JSON manifests plus raw
    /// little-endian f64 weight blobs for the sequence nets.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        let mut components = vec![
            "config.json".to_string(),
            "inversion.json".to_string(),
            "imputer.json".to_string(),
            "gbt.json".to_string(),
            "lda.json".to_string(),
        ];
        for i in 0..self.seqs.len() {
            components.push(format!("seq_{i}.json"));
            components.push(format!("seq_{i}.weights"));
        }
        let manifest = Manifest {
            format_version: self.format_version,
            class_order: CLASS_ORDER.iter().map(|c| c.token().to_string()).collect(),
            dropped_class: DROPPED_CLASS.token().to_string(),
            n_nets: self.seqs.len(),
            components,
        };
        let write_json = |name: &str, body: String| -> Result<()> {
            fs::write(dir.join(name), body)?;
            Ok(())
        };
        write_json("manifest.json", serde_json::to_string_pretty(&manifest).unwrap())?;
        write_json("config.json", serde_json::to_string_pretty(&self.config).unwrap())?;
        write_json("inversion.json", serde_json::to_string_pretty(&self.inversion).unwrap())?;
        write_json("imputer.json", serde_json::to_string_pretty(&self.imputer).unwrap())?;
        write_json("gbt.json", serde_json::to_string(&self.gbt).unwrap())?;
        write_json("lda.json", serde_json::to_string_pretty(&self.lda).unwrap())?;
        for (i, net) in self.seqs.iter().enumerate() {
            // Architecture and statistics as JSON; weights as a raw blob.
            let meta = serde_json::json!({
                "cfg": net.cfg,
                "feature_means": net.feature_means,
                "feature_scales": net.feature_scales,
                "format_version": net.format_version,
                "param_count": net.params.len(),
            });
            write_json(&format!("seq_{i}.json"), serde_json::to_string_pretty(&meta).unwrap())?;
            let mut blob = Vec::with_capacity(net.params.len() * 8);
            for v in &net.params {
                blob.extend_from_slice(&v.to_le_bytes());
            }
            fs::write(dir.join(format!("seq_{i}.weights")), blob)?;
        }
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<StackedModel> {
        let dir = dir.as_ref();
        let read_json = |name: &str| -> Result<String> {
            fs::read_to_string(dir.join(name)).map_err(PipelineError::Io)
        };
        let manifest: Manifest = serde_json::from_str(&read_json("manifest.json")?)
            .map_err(|e| PipelineError::Bundle(format!("manifest: {e}")))?;
        if manifest.format_version != 1 {
            return Err(PipelineError::Bundle(format!(
                "unsupported bundle version {}",
                manifest.format_version
            )));
        }
        let config: PipelineConfig = serde_json::from_str(&read_json("config.json")?)
            .map_err(|e| PipelineError::Bundle(format!("config: {e}")))?;
        let inversion: LogisticModel = serde_json::from_str(&read_json("inversion.json")?)
            .map_err(|e| PipelineError::Bundle(format!("inversion: {e}")))?;
        let imputer: Imputer = serde_json::from_str(&read_json("imputer.json")?)
            .map_err(|e| PipelineError::Bundle(format!("imputer: {e}")))?;
        let gbt: GbtModel = serde_json::from_str(&read_json("gbt.json")?)
            .map_err(|e| PipelineError::Bundle(format!("gbt: {e}")))?;
        let lda: LdaModel = serde_json::from_str(&read_json("lda.json")?)
            .map_err(|e| PipelineError::Bundle(format!("lda: {e}")))?;
        let mut seqs = Vec::with_capacity(manifest.n_nets);
        for i in 0..manifest.n_nets {
            let meta: serde_json::Value = serde_json::from_str(&read_json(&format!("seq_{i}.json"))?)
                .map_err(|e| PipelineError::Bundle(format!("seq_{i}: {e}")))?;
            let cfg: SeqConfig = serde_json::from_value(meta["cfg"].clone())
                .map_err(|e| PipelineError::Bundle(format!("seq_{i} cfg: {e}")))?;
            let feature_means: Vec<f64> = serde_json::from_value(meta["feature_means"].clone())
                .map_err(|e| PipelineError::Bundle(format!("seq_{i} means: {e}")))?;
            let feature_scales: Vec<f64> = serde_json::from_value(meta["feature_scales"].clone())
                .map_err(|e| PipelineError::Bundle(format!("seq_{i} scales: {e}")))?;
            let param_count = meta["param_count"].as_u64().unwrap_or(0) as usize;
            let blob = fs::read(dir.join(format!("seq_{i}.weights")))?;
            if blob.len() != param_count * 8 {
                return Err(PipelineError::Bundle(format!(
                    "seq_{i}.weights holds {} bytes, expected {}",
                    blob.len(),
                    param_count * 8
                )));
            }
            let params: Vec<f64> = blob
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            seqs.push(SequenceModel {
                cfg,
                params,
                feature_means,
                feature_scales,
                format_version: 1,
            });
        }
        Ok(StackedModel {
            config,
            inversion,
            imputer,
            gbt,
            seqs,
            lda,
            format_version: manifest.format_version,
        })
    }
}
