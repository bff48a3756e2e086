//! Hypothesize-and-test rhythm interpretation over a reduced abstraction
//! grammar.
//!
//! The interpreter walks the beat sequence left to right. At each frontier it
//! first applies the normal-rhythm shortcut: a maximal run whose RR intervals
//! all lie within ±12.5% of their median, at 50-110 bpm, is committed as one
//! regular-rhythm segment without scoring any alternative. Otherwise every
//! grammar pattern proposes a candidate beat group and the highest-scoring
//! hypothesis is committed.
//!
//! Two correction passes let the rhythm level revise the evidence itself:
//! spurious low-quality annotations whose removal makes a regular hypothesis
//! satisfiable are discarded, and expected-but-missing beats are searched for
//! with a reduced-threshold windowed re-detection. Both run until the beat
//! list reaches a fixed point.

use serde::{Deserialize, Serialize};

use crate::detect::{
    analyze, delineate_with, detect_in_window, BeatAnnotation, BeatObservation, SignalEnv,
    REFRACTORY_MS,
};
use crate::error::{CoreError, Result};
use crate::features::{mad, max_xcorr, rr_irregularity};
use crate::record::Record;
use crate::stats::median;

/// Rhythm hypothesis kinds of the reduced grammar.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum HypothesisKind {
    Normal,
    Tachycardia,
    Bradycardia,
    Extrasystole,
    Couplet,
    Bigeminy,
    Trigeminy,
    Afib,
    Asystole,
}

impl HypothesisKind {
    pub const ALL: [HypothesisKind; 9] = [
        HypothesisKind::Normal,
        HypothesisKind::Tachycardia,
        HypothesisKind::Bradycardia,
        HypothesisKind::Extrasystole,
        HypothesisKind::Couplet,
        HypothesisKind::Bigeminy,
        HypothesisKind::Trigeminy,
        HypothesisKind::Afib,
        HypothesisKind::Asystole,
    ];

    pub fn index(self) -> usize {
        HypothesisKind::ALL.iter().position(|&k| k == self).unwrap()
    }

    /// Regular rhythms: normal sinus, tachycardia, bradycardia.
    pub fn is_regular(self) -> bool {
        matches!(
            self,
            HypothesisKind::Normal | HypothesisKind::Tachycardia | HypothesisKind::Bradycardia
        )
    }
}

/// Grammar thresholds. The 600/1200 ms boundaries separate tachycardia and
/// bradycardia from the normal band; the shortcut tolerance and rate band
/// implement the regular-interval heuristic.
pub mod grammar {
    /// Normal rhythm RR band in ms.
    pub const NORMAL_RR_MS: (f64, f64) = (600.0, 1200.0);
    /// Tachycardia: median RR below this (ms).
    pub const TACHY_RR_MS: f64 = 600.0;
    /// Bradycardia: median RR above this (ms).
    pub const BRADY_RR_MS: f64 = 1200.0;
    /// Shortcut regularity tolerance (fraction of the median RR).
    pub const SHORTCUT_TOL: f64 = 0.125;
    /// Shortcut rate band in bpm.
    pub const SHORTCUT_BPM: (f64, f64) = (50.0, 110.0);
    /// Loose regularity tolerance for plain regular candidates.
    pub const REGULAR_TOL: f64 = 0.25;
    /// AFIB irregularity gate (sample-entropy based measure).
    pub const AFIB_IRREGULARITY: f64 = 0.08;
    /// AFIB requires at least this fraction of member beats without P waves.
    pub const AFIB_ABSENT_P: f64 = 0.60;
    /// Advanced (premature) beat: RR below this fraction of the context RR.
    pub const ADVANCE_FRACTION: f64 = 0.85;
    /// Minimum beats for a regular-run hypothesis.
    pub const MIN_REGULAR_BEATS: usize = 3;
    /// Minimum beats before the shortcut commits without scoring
    /// alternatives; shorter pseudo-regular runs happen by chance inside
    /// genuinely irregular rhythms.
    pub const SHORTCUT_MIN_BEATS: usize = 5;
    /// Minimum advanced beats for bigeminy / trigeminy.
    pub const BIGEMINY_MIN_ECTOPICS: usize = 3;
    pub const TRIGEMINY_MIN_ECTOPICS: usize = 2;
}

/// One committed rhythm segment.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RhythmSegment {
    pub kind: HypothesisKind,
    /// Sample range covered (inclusive).
    pub start: usize,
    pub end: usize,
    /// Indices into the interpretation's final beat list.
    pub member_beats: Vec<usize>,
    pub score: f64,
}

/// The best explanation found for a record.
#[derive(Debug, Clone)]
pub struct Interpretation {
    pub segments: Vec<RhythmSegment>,
    /// Final beat list, chronological, after corrections.
    pub beats: Vec<BeatObservation>,
    /// Annotations rejected as false positives.
    pub discarded: Vec<BeatAnnotation>,
    /// Annotations added by false-negative recovery.
    pub discovered: Vec<BeatAnnotation>,
    /// Indices (into `beats`) of ectopic/advanced beats.
    pub ectopics: Vec<usize>,
}

impl Interpretation {
    /// Segment kind of the beat, if any.
    pub fn kind_of_beat(&self, beat_idx: usize) -> Option<HypothesisKind> {
        self.segments
            .iter()
            .find(|s| s.member_beats.contains(&beat_idx))
            .map(|s| s.kind)
    }

    pub fn to_export(&self, r: &Record, include_corrections: bool) -> InterpretationExport {
        InterpretationExport {
            id: r.id.clone(),
            segments: self
                .segments
                .iter()
                .map(|s| SegmentExport {
                    kind: s.kind,
                    start_ms: r.sample_to_ms(s.start),
                    end_ms: r.sample_to_ms(s.end),
                    n_beats: s.member_beats.len(),
                    score: s.score,
                })
                .collect(),
            beats_ms: self
                .beats
                .iter()
                .map(|b| r.sample_to_ms(b.fiducial()))
                .collect(),
            discarded: include_corrections.then(|| self.discarded.clone()),
            discovered: include_corrections.then(|| self.discovered.clone()),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SegmentExport {
    pub kind: HypothesisKind,
    pub start_ms: f64,
    pub end_ms: f64,
    pub n_beats: usize,
    pub score: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InterpretationExport {
    pub id: String,
    pub segments: Vec<SegmentExport>,
    pub beats_ms: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub discarded: Option<Vec<BeatAnnotation>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub discovered: Option<Vec<BeatAnnotation>>,
}

const MAX_FIX_ITERS: usize = 10;
/// FN re-detection threshold as a fraction of the typical beat energy.
const FN_ENERGY_SCALE: f64 = 0.06;
/// Quality gate for discovered beats.
const FN_QUALITY_GATE: f64 = 0.2;
/// Quality gate below which a beat may be discarded as a false positive.
const FP_QUALITY_GATE: f64 = 0.5;
/// Segments scoring below this are eligible for false-positive fixing.
const TROUBLED_SCORE: f64 = 0.72;
/// A gap larger than this multiple of the segment median triggers probing.
const GAP_FACTOR: f64 = 1.7;

// ---------------------------------------------------------------------------
// Public operations
// ---------------------------------------------------------------------------

/// Interprets a record given its delineated beats. Zero beats yield a single
/// asystole segment covering the record (flagged, not an error).
pub fn interpret(r: &Record, obs: &[BeatObservation]) -> Interpretation {
    let sig = analyze(r);
    interpret_with(r, &sig, obs)
}

pub fn interpret_with(r: &Record, sig: &SignalEnv, obs: &[BeatObservation]) -> Interpretation {
    let mut anns: Vec<BeatAnnotation> = obs
        .iter()
        .map(|b| BeatAnnotation {
            sample_index: b.fiducial(),
            confidence: 1.0,
        })
        .collect();
    anns.sort_by_key(|a| a.sample_index);
    let mut discarded: Vec<BeatAnnotation> = Vec::new();
    let mut discovered: Vec<BeatAnnotation> = Vec::new();

    merge_refractory(r, sig, &mut anns, &mut discarded);
    let mut working: Vec<BeatObservation> = if anns.len() == obs.len() {
        obs.to_vec()
    } else {
        delineate_with(r, sig, &anns)
    };

    for _ in 0..MAX_FIX_ITERS {
        if working.is_empty() {
            break;
        }
        let (segments, _) = segment_pass(r, &working);

        // False positives first: cheap and quality-gated.
        let removed = fp_pass(r, &working, &segments);
        if !removed.is_empty() {
            apply_removals(&mut anns, &removed, &mut discarded, &mut discovered);
            working = delineate_with(r, sig, &anns);
            continue;
        }

        // Then look for missing beats inside suspicious gaps.
        let added = fn_pass(r, sig, &working, &segments);
        if !added.is_empty() {
            let mut changed = false;
            for a in added {
                if insert_annotation(&mut anns, a, r) {
                    discovered.push(a);
                    changed = true;
                }
            }
            if changed {
                working = delineate_with(r, sig, &anns);
                // Quality gate: drop discoveries that delineate poorly.
                let weak: Vec<usize> = working
                    .iter()
                    .enumerate()
                    .filter(|(_, b)| {
                        b.quality < FN_QUALITY_GATE
                            && discovered
                                .iter()
                                .any(|d| close(d.sample_index, b.fiducial(), r))
                    })
                    .map(|(i, _)| i)
                    .collect();
                if !weak.is_empty() {
                    let removed: Vec<BeatAnnotation> = weak
                        .iter()
                        .map(|&i| BeatAnnotation {
                            sample_index: working[i].fiducial(),
                            confidence: 0.0,
                        })
                        .collect();
                    apply_removals(&mut anns, &removed, &mut discarded, &mut discovered);
                    working = delineate_with(r, sig, &anns);
                }
                continue;
            }
        }
        break;
    }

    let n = r.samples.len();
    if working.is_empty() {
        return Interpretation {
            segments: vec![RhythmSegment {
                kind: HypothesisKind::Asystole,
                start: 0,
                end: n - 1,
                member_beats: vec![],
                score: 1.0,
            }],
            beats: working,
            discarded,
            discovered,
            ectopics: vec![],
        };
    }

    let (segments, ectopics) = segment_pass(r, &working);
    Interpretation {
        segments,
        beats: working,
        discarded,
        discovered,
        ectopics,
    }
}

fn close(a: usize, b: usize, r: &Record) -> bool {
    (a as isize - b as isize).unsigned_abs() <= r.samples_per_ms(60.0)
}

/// Outcome of a beat-list correction.
#[derive(Debug, Clone)]
pub struct FixOutcome {
    pub revised: Vec<BeatObservation>,
    /// Annotations removed (false-positive fixing) or added (false-negative
    /// recovery).
    pub changed: Vec<BeatAnnotation>,
}

/// Discards annotations whose removal makes the regular `hypothesis`
/// satisfiable, provided they score below the quality gate and their removal
/// leaves no gap longer than twice the median RR.
pub fn fix_false_positives(
    r: &Record,
    obs: &[BeatObservation],
    hypothesis: HypothesisKind,
) -> FixOutcome {
    let sig = analyze(r);
    let mut anns: Vec<BeatAnnotation> = obs
        .iter()
        .map(|b| BeatAnnotation {
            sample_index: b.fiducial(),
            confidence: 1.0,
        })
        .collect();
    let mut discarded = Vec::new();
    merge_refractory(r, &sig, &mut anns, &mut discarded);
    let working = if anns.len() == obs.len() {
        obs.to_vec()
    } else {
        delineate_with(r, &sig, &anns)
    };

    let removable = fp_removal_set(r, &working, &(0..working.len()).collect::<Vec<_>>(), hypothesis);
    if removable.is_empty() && discarded.is_empty() {
        return FixOutcome {
            revised: obs.to_vec(),
            changed: vec![],
        };
    }
    for &i in &removable {
        discarded.push(BeatAnnotation {
            sample_index: working[i].fiducial(),
            confidence: 0.0,
        });
    }
    let kept: Vec<BeatAnnotation> = working
        .iter()
        .enumerate()
        .filter(|(i, _)| !removable.contains(i))
        .map(|(_, b)| BeatAnnotation {
            sample_index: b.fiducial(),
            confidence: 1.0,
        })
        .collect();
    FixOutcome {
        revised: delineate_with(r, &sig, &kept),
        changed: discarded,
    }
}

/// Attempts windowed re-detection of expected-but-missing beats under the
/// given hypothesis. Discovered beats must delineate with quality >= 0.2.
pub fn fix_false_negatives(
    r: &Record,
    obs: &[BeatObservation],
    hypothesis: HypothesisKind,
) -> FixOutcome {
    let sig = analyze(r);
    let segments = vec![RhythmSegment {
        kind: hypothesis,
        start: 0,
        end: r.samples.len() - 1,
        member_beats: (0..obs.len()).collect(),
        score: 0.0,
    }];
    let added = fn_pass(r, &sig, obs, &segments);
    if added.is_empty() {
        return FixOutcome {
            revised: obs.to_vec(),
            changed: vec![],
        };
    }
    let mut anns: Vec<BeatAnnotation> = obs
        .iter()
        .map(|b| BeatAnnotation {
            sample_index: b.fiducial(),
            confidence: 1.0,
        })
        .collect();
    let mut discovered = Vec::new();
    for a in added {
        if insert_annotation(&mut anns, a, r) {
            discovered.push(a);
        }
    }
    let mut revised = delineate_with(r, &sig, &anns);
    // Enforce the quality gate on the discoveries.
    let weak: Vec<usize> = revised
        .iter()
        .enumerate()
        .filter(|(_, b)| {
            b.quality < FN_QUALITY_GATE
                && discovered.iter().any(|d| close(d.sample_index, b.fiducial(), r))
        })
        .map(|(i, _)| i)
        .collect();
    if !weak.is_empty() {
        discovered.retain(|d| {
            !weak
                .iter()
                .any(|&i| close(d.sample_index, revised[i].fiducial(), r))
        });
        let kept: Vec<BeatAnnotation> = revised
            .iter()
            .enumerate()
            .filter(|(i, _)| !weak.contains(i))
            .map(|(_, b)| BeatAnnotation {
                sample_index: b.fiducial(),
                confidence: 1.0,
            })
            .collect();
        revised = delineate_with(r, &sig, &kept);
    }
    FixOutcome {
        revised,
        changed: discovered,
    }
}

/// Scores how well a beat group supports a hypothesis, in [0, 1]. Monotone in
/// the constraint satisfaction margins; the normal hypothesis carries a +0.05
/// prior bonus.
pub fn score_hypothesis(
    kind: HypothesisKind,
    beats: &[BeatObservation],
    r: &Record,
) -> Result<f64> {
    if beats.is_empty() {
        return Err(CoreError::EmptyInput("score_hypothesis beat group"));
    }
    let fids: Vec<f64> = beats.iter().map(|b| r.sample_to_ms(b.fiducial())).collect();
    let rrs: Vec<f64> = fids.windows(2).map(|w| w[1] - w[0]).collect();
    let ctx = if rrs.is_empty() { 800.0 } else { median(&rrs) };
    Ok(score_internal(kind, beats, &rrs, ctx, None, None, r))
}

// ---------------------------------------------------------------------------
// Internal scoring
// ---------------------------------------------------------------------------

fn clamp01(v: f64) -> f64 {
    v.clamp(0.0, 1.0)
}

/// Median max-cross-correlation between consecutive QRS windows.
fn morphology_consistency(beats: &[BeatObservation], r: &Record, subset: Option<&[usize]>) -> f64 {
    let idxs: Vec<usize> = match subset {
        Some(s) => s.to_vec(),
        None => (0..beats.len()).collect(),
    };
    if idxs.len() < 2 {
        return 1.0;
    }
    let window = |b: &BeatObservation| -> Vec<f64> {
        let lo = b.qrs.onset;
        let hi = b.qrs.offset.min(r.samples.len() - 1);
        r.samples[lo..=hi].iter().map(|&v| v as f64).collect()
    };
    let mut xs = Vec::new();
    for w in idxs.windows(2) {
        let a = window(&beats[w[0]]);
        let b = window(&beats[w[1]]);
        if let Ok(x) = max_xcorr(&a, &b) {
            xs.push(x);
        }
    }
    if xs.is_empty() {
        1.0
    } else {
        median(&xs)
    }
}

fn regularity_score(rrs: &[f64]) -> f64 {
    if rrs.is_empty() {
        return 0.0;
    }
    let med = median(rrs);
    if med <= 0.0 {
        return 0.0;
    }
    let worst = rrs
        .iter()
        .map(|rr| (rr - med).abs() / med)
        .fold(0.0f64, f64::max);
    clamp01(1.0 - worst / grammar::REGULAR_TOL)
}

fn p_fraction(beats: &[BeatObservation]) -> f64 {
    if beats.is_empty() {
        return 0.0;
    }
    beats.iter().filter(|b| b.p.present).count() as f64 / beats.len() as f64
}

/// Irregularity of an RR series, normalized to roughly [0, 1]. Uses the
/// sample-entropy measure when enough intervals exist, otherwise a robust
/// dispersion ratio.
fn local_irregularity(rrs: &[f64]) -> f64 {
    if rrs.len() >= 9 {
        if let Ok((med_irr, _)) = rr_irregularity(rrs) {
            return med_irr;
        }
    }
    if rrs.len() < 2 {
        return 0.0;
    }
    let med = median(rrs).max(1e-9);
    // Scaled so that the AFIB gate constant stays meaningful for short runs.
    mad(rrs).unwrap_or(0.0) / med
}

#[allow(clippy::too_many_arguments)]
fn score_internal(
    kind: HypothesisKind,
    beats: &[BeatObservation],
    rrs: &[f64],
    ctx_rr: f64,
    prev_rr: Option<f64>,
    next_rr: Option<f64>,
    r: &Record,
) -> f64 {
    // A hypothesis is only as strong as the evidence carrying it.
    let mean_quality = if beats.is_empty() {
        0.0
    } else {
        beats.iter().map(|b| b.quality).sum::<f64>() / beats.len() as f64
    };
    let raw = score_structure(kind, beats, rrs, ctx_rr, prev_rr, next_rr, r);
    clamp01(raw * (0.45 + 0.55 * mean_quality))
}

#[allow(clippy::too_many_arguments)]
fn score_structure(
    kind: HypothesisKind,
    beats: &[BeatObservation],
    rrs: &[f64],
    ctx_rr: f64,
    prev_rr: Option<f64>,
    next_rr: Option<f64>,
    r: &Record,
) -> f64 {
    use HypothesisKind::*;
    match kind {
        Normal | Tachycardia | Bradycardia => {
            let med = if rrs.is_empty() { ctx_rr } else { median(rrs) };
            let band = match kind {
                Normal => {
                    let (lo, hi) = grammar::NORMAL_RR_MS;
                    if med < lo || med > hi {
                        0.0
                    } else {
                        clamp01((med - lo).min(hi - med) / 60.0)
                    }
                }
                Tachycardia => clamp01((grammar::TACHY_RR_MS - med) / 60.0),
                _ => clamp01((med - grammar::BRADY_RR_MS) / 120.0),
            };
            let reg = if rrs.is_empty() { 0.3 } else { regularity_score(rrs) };
            let morph = clamp01((morphology_consistency(beats, r, None) - 0.4) / 0.55);
            let prior = if kind == Normal { 0.05 } else { 0.0 };
            clamp01(0.45 * reg + 0.25 * band + 0.15 * morph + 0.10 * p_fraction(beats) + prior)
        }
        Afib => {
            let irr = clamp01(local_irregularity(rrs) / 0.6);
            let absent = 1.0 - p_fraction(beats);
            let morph = clamp01((morphology_consistency(beats, r, None) - 0.4) / 0.55);
            let evidence = clamp01(rrs.len() as f64 / 12.0);
            clamp01(0.40 * irr + 0.30 * absent + 0.15 * morph + 0.15 * evidence)
        }
        Extrasystole | Couplet => {
            let prem_in = prev_rr.map_or(0.0, |rr| {
                clamp01((grammar::ADVANCE_FRACTION * ctx_rr - rr) / (0.25 * ctx_rr))
            });
            let prem_within = if kind == Couplet {
                rrs.first().map_or(0.0, |&rr| {
                    clamp01((grammar::ADVANCE_FRACTION * ctx_rr - rr) / (0.25 * ctx_rr))
                })
            } else {
                prem_in
            };
            let comp = next_rr.map_or(0.4, |rr| clamp01((rr - 1.1 * ctx_rr) / (0.3 * ctx_rr)));
            clamp01(0.45 * prem_in + 0.25 * prem_within + 0.30 * comp)
        }
        Bigeminy | Trigeminy => {
            let period = if kind == Bigeminy { 2 } else { 3 };
            score_alternation(beats, rrs, period, r)
        }
        Asystole => 0.0,
    }
}

/// Scores an alternating normal/advanced pattern with the given period.
fn score_alternation(beats: &[BeatObservation], rrs: &[f64], period: usize, r: &Record) -> f64 {
    if rrs.len() < period {
        return 0.0;
    }
    // Cycle view: for bigeminy RRs alternate (short, long); for trigeminy
    // (base, short, long).
    let shorts: Vec<f64> = rrs.iter().skip(period - 2).step_by(period).cloned().collect();
    let longs: Vec<f64> = rrs.iter().skip(period - 1).step_by(period).cloned().collect();
    if shorts.is_empty() || longs.is_empty() {
        return 0.0;
    }
    let med_long = median(&longs);
    let ok = shorts
        .iter()
        .filter(|&&s| s < grammar::ADVANCE_FRACTION * med_long)
        .count();
    let alt = ok as f64 / shorts.len() as f64;
    // Cycle-to-cycle regularity of the full period length.
    let cycles: Vec<f64> = rrs.chunks_exact(period).map(|c| c.iter().sum()).collect();
    let cyc_reg = if cycles.len() >= 2 { regularity_score(&cycles) } else { 0.7 };
    let normals: Vec<usize> = (0..beats.len()).filter(|i| i % period != period - 1).collect();
    let morph = clamp01((morphology_consistency(beats, r, Some(&normals)) - 0.4) / 0.55);
    let evidence = clamp01(shorts.len() as f64 / 3.0);
    clamp01(0.50 * alt + 0.25 * cyc_reg + 0.15 * morph + 0.10 * evidence)
}

// ---------------------------------------------------------------------------
// Segmentation
// ---------------------------------------------------------------------------

fn kind_for_median_rr(med: f64) -> HypothesisKind {
    if med < grammar::TACHY_RR_MS {
        HypothesisKind::Tachycardia
    } else if med > grammar::BRADY_RR_MS {
        HypothesisKind::Bradycardia
    } else {
        HypothesisKind::Normal
    }
}

/// Extends a run from `start` while all its RR intervals stay within `tol`
/// of their running median. Returns the last beat index of the run.
fn maximal_regular_run(fids: &[f64], start: usize, tol: f64) -> usize {
    let n = fids.len();
    let mut rrs: Vec<f64> = Vec::new();
    let mut j = start;
    while j + 1 < n {
        rrs.push(fids[j + 1] - fids[j]);
        let med = median(&rrs);
        if rrs.iter().any(|&rr| (rr - med).abs() > tol * med) {
            rrs.pop();
            break;
        }
        j += 1;
    }
    j
}

fn shortcut_run(fids: &[f64], start: usize) -> Option<usize> {
    let end = maximal_regular_run(fids, start, grammar::SHORTCUT_TOL);
    if end - start + 1 < grammar::SHORTCUT_MIN_BEATS {
        return None;
    }
    let rrs: Vec<f64> = fids[start..=end].windows(2).map(|w| w[1] - w[0]).collect();
    let med = median(&rrs);
    let bpm = 60_000.0 / med;
    let (lo, hi) = grammar::SHORTCUT_BPM;
    (bpm >= lo && bpm <= hi).then_some(end)
}

struct Candidate {
    kind: HypothesisKind,
    last: usize,
    score: f64,
    /// Offsets of advanced beats within the member range.
    advanced: Vec<usize>,
}

/// One full left-to-right segmentation of the current beat list.
/// Returns the committed segments and the indices of ectopic beats.
fn segment_pass(r: &Record, beats: &[BeatObservation]) -> (Vec<RhythmSegment>, Vec<usize>) {
    let n = beats.len();
    let fids: Vec<f64> = beats.iter().map(|b| r.sample_to_ms(b.fiducial())).collect();
    let all_rrs: Vec<f64> = fids.windows(2).map(|w| w[1] - w[0]).collect();
    let global_med = if all_rrs.is_empty() { 800.0 } else { median(&all_rrs) };

    let mut segments: Vec<RhythmSegment> = Vec::new();
    let mut ectopics: Vec<usize> = Vec::new();
    let mut prev_seg_med: Option<f64> = None;
    let mut i = 0usize;
    while i < n {
        // Normal-rhythm shortcut: commit without scoring alternatives.
        if let Some(end) = shortcut_run(&fids, i) {
            let rrs: Vec<f64> = fids[i..=end].windows(2).map(|w| w[1] - w[0]).collect();
            let kind = kind_for_median_rr(median(&rrs));
            let score = score_internal(kind, &beats[i..=end], &rrs, median(&rrs), None, None, r);
            push_segment(&mut segments, beats, i, end, kind, score, r);
            prev_seg_med = Some(median(&rrs));
            i = end + 1;
            continue;
        }

        let ctx = prev_seg_med.unwrap_or(global_med);
        let mut cands: Vec<Candidate> = Vec::new();

        // Plain regular run at loose tolerance.
        let reg_end = maximal_regular_run(&fids, i, grammar::REGULAR_TOL);
        if reg_end - i + 1 >= grammar::MIN_REGULAR_BEATS {
            let rrs: Vec<f64> = fids[i..=reg_end].windows(2).map(|w| w[1] - w[0]).collect();
            let kind = kind_for_median_rr(median(&rrs));
            let score =
                score_internal(kind, &beats[i..=reg_end], &rrs, median(&rrs), None, None, r);
            cands.push(Candidate {
                kind,
                last: reg_end,
                score,
                advanced: vec![],
            });
        }

        // Alternating patterns.
        for (kind, period) in [
            (HypothesisKind::Bigeminy, 2usize),
            (HypothesisKind::Trigeminy, 3usize),
        ] {
            if let Some((end, advanced)) = alternation_run(&fids, i, period) {
                let rrs: Vec<f64> = fids[i..=end].windows(2).map(|w| w[1] - w[0]).collect();
                let score = score_internal(kind, &beats[i..=end], &rrs, ctx, None, None, r);
                cands.push(Candidate {
                    kind,
                    last: end,
                    score,
                    advanced,
                });
            }
        }

        // Atrial fibrillation: a sustained irregular stretch.
        if let Some(end) = afib_run(&fids, i) {
            let members = &beats[i..=end];
            let rrs: Vec<f64> = fids[i..=end].windows(2).map(|w| w[1] - w[0]).collect();
            let irregular_enough = local_irregularity(&rrs) > grammar::AFIB_IRREGULARITY;
            let p_absent = 1.0 - p_fraction(members);
            if irregular_enough && p_absent >= grammar::AFIB_ABSENT_P {
                let score = score_internal(HypothesisKind::Afib, members, &rrs, ctx, None, None, r);
                cands.push(Candidate {
                    kind: HypothesisKind::Afib,
                    last: end,
                    score,
                    advanced: vec![],
                });
            }
        }

        // Premature intrusions: only meaningful against a regular context.
        let local_ctx = regular_context_before(&fids, i);
        let prev_rr = (i > 0).then(|| fids[i] - fids[i - 1]);
        if let (Some(prr), Some(ctx)) = (prev_rr, local_ctx) {
            if prr < grammar::ADVANCE_FRACTION * ctx {
                let next_rr = (i + 1 < n).then(|| fids[i + 1] - fids[i]);
                let score = score_internal(
                    HypothesisKind::Extrasystole,
                    &beats[i..=i],
                    &[],
                    ctx,
                    prev_rr,
                    next_rr,
                    r,
                );
                cands.push(Candidate {
                    kind: HypothesisKind::Extrasystole,
                    last: i,
                    score,
                    advanced: vec![0],
                });
                // Couplet: the following beat is also premature.
                if let Some(nrr) = next_rr {
                    if nrr < grammar::ADVANCE_FRACTION * ctx {
                        let after = (i + 2 < n).then(|| fids[i + 2] - fids[i + 1]);
                        let rrs = vec![nrr];
                        let score = score_internal(
                            HypothesisKind::Couplet,
                            &beats[i..=i + 1],
                            &rrs,
                            ctx,
                            prev_rr,
                            after,
                            r,
                        );
                        cands.push(Candidate {
                            kind: HypothesisKind::Couplet,
                            last: i + 1,
                            score,
                            advanced: vec![0, 1],
                        });
                    }
                }
            }
        }

        let best = cands
            .into_iter()
            .max_by(|a, b| {
                a.score
                    .partial_cmp(&b.score)
                    .unwrap()
                    .then(b.kind.index().cmp(&a.kind.index()))
            })
            .unwrap_or_else(|| fallback_candidate(r, beats, &fids, i));

        for &off in &best.advanced {
            ectopics.push(i + off);
        }
        let rrs: Vec<f64> = fids[i..=best.last].windows(2).map(|w| w[1] - w[0]).collect();
        if !rrs.is_empty() && best.kind.is_regular() {
            prev_seg_med = Some(median(&rrs));
        }
        push_segment(&mut segments, beats, i, best.last, best.kind, best.score, r);
        i = best.last + 1;
    }
    (segments, ectopics)
}

/// Median of the RRs just before the frontier, provided they are mutually
/// regular; ectopic hypotheses are only meaningful against such a context.
fn regular_context_before(fids: &[f64], i: usize) -> Option<f64> {
    if i < 2 {
        return None;
    }
    let lo = i.saturating_sub(4);
    let rrs: Vec<f64> = fids[lo..=i].windows(2).map(|w| w[1] - w[0]).collect();
    let prev = &rrs[..rrs.len() - 1]; // the RR into the frontier beat excluded
    if prev.len() < 2 {
        return None;
    }
    let med = median(prev);
    prev.iter()
        .all(|&rr| (rr - med).abs() <= grammar::SHORTCUT_TOL * med)
        .then_some(med)
}

/// Fallback when no grammar pattern matches: a weak regular segment running
/// up to the next stable stretch.
fn fallback_candidate(
    r: &Record,
    beats: &[BeatObservation],
    fids: &[f64],
    i: usize,
) -> Candidate {
    let n = fids.len();
    let mut last = i;
    for j in i + 1..n {
        if shortcut_run(fids, j).is_some() {
            break;
        }
        last = j;
    }
    let rrs: Vec<f64> = fids[i..=last].windows(2).map(|w| w[1] - w[0]).collect();
    let med = if rrs.is_empty() { 800.0 } else { median(&rrs) };
    let kind = kind_for_median_rr(med);
    let score = score_internal(kind, &beats[i..=last], &rrs, med, None, None, r);
    Candidate {
        kind,
        last,
        score,
        advanced: vec![],
    }
}

/// Matches an alternating advanced-beat pattern starting at `i` with the
/// given period (2: bigeminy, 3: trigeminy). Returns the run end and the
/// offsets of the advanced beats.
fn alternation_run(fids: &[f64], i: usize, period: usize) -> Option<(usize, Vec<usize>)> {
    let n = fids.len();
    let rr = |k: usize| fids[k + 1] - fids[k];
    let mut advanced: Vec<usize> = Vec::new();
    let mut k = i;
    // One cycle consumes `period` beats: (period-2) base RRs, a short RR into
    // the advanced beat, and a long RR out of it. The long RR needs beat
    // k+period to exist.
    while k + period < n {
        let short = rr(k + period - 2);
        let long = rr(k + period - 1);
        if period == 3 {
            // The base RR must sit near the cycle scale.
            let base = rr(k);
            let half_cycle = (short + long) / 2.0;
            if !(base > 0.6 * half_cycle && base < 1.45 * half_cycle) {
                break;
            }
        }
        if short < grammar::ADVANCE_FRACTION * long {
            advanced.push(k + period - 1 - i);
            k += period;
        } else {
            break;
        }
    }
    let min_ectopics = if period == 2 {
        grammar::BIGEMINY_MIN_ECTOPICS
    } else {
        grammar::TRIGEMINY_MIN_ECTOPICS
    };
    if advanced.len() < min_ectopics {
        return None;
    }
    // Run ends at the beat after the last advanced one.
    let end = (i + (advanced.last().unwrap() + 1)).min(n - 1);
    Some((end, advanced))
}

/// An irregular stretch: extends until a sustained regular run begins.
fn afib_run(fids: &[f64], i: usize) -> Option<usize> {
    let n = fids.len();
    if n - i < 5 {
        return None;
    }
    let mut j = i + 1;
    let mut end = n - 1;
    while j < n - 1 {
        let reg_end = maximal_regular_run(fids, j, grammar::SHORTCUT_TOL);
        if reg_end - j + 1 >= grammar::SHORTCUT_MIN_BEATS {
            end = j - 1;
            break;
        }
        j += 1;
    }
    (end > i && end - i + 1 >= 5).then_some(end)
}

fn push_segment(
    segments: &mut Vec<RhythmSegment>,
    beats: &[BeatObservation],
    first: usize,
    last: usize,
    kind: HypothesisKind,
    score: f64,
    _r: &Record,
) {
    let fb = &beats[first];
    let lb = &beats[last];
    let mut start = if fb.p.present { fb.p.onset } else { fb.qrs.onset };
    let end = if lb.t.present {
        lb.t.offset.max(lb.qrs.offset)
    } else {
        lb.qrs.offset
    };
    if let Some(prev) = segments.last() {
        start = start.max(prev.end + 1);
    }
    let end = end.max(start + 1);
    segments.push(RhythmSegment {
        kind,
        start,
        end,
        member_beats: (first..=last).collect(),
        score,
    });
}

// ---------------------------------------------------------------------------
// False-positive fixing
// ---------------------------------------------------------------------------

/// Two annotations inside the refractory window cannot both be beats; the
/// one with the stronger local deflection wins.
fn merge_refractory(
    r: &Record,
    sig: &SignalEnv,
    anns: &mut Vec<BeatAnnotation>,
    discarded: &mut Vec<BeatAnnotation>,
) {
    let refractory = r.samples_per_ms(REFRACTORY_MS);
    let strength = |a: &BeatAnnotation| sig.detrended[a.sample_index.min(sig.detrended.len() - 1)].abs();
    let mut out: Vec<BeatAnnotation> = Vec::with_capacity(anns.len());
    for &ann in anns.iter() {
        match out.last() {
            Some(last) if ann.sample_index.saturating_sub(last.sample_index) < refractory => {
                if strength(&ann) > strength(last) {
                    discarded.push(*out.last().unwrap());
                    *out.last_mut().unwrap() = ann;
                } else {
                    discarded.push(ann);
                }
            }
            _ => out.push(ann),
        }
    }
    *anns = out;
}

/// Finds the low-quality beats whose removal makes `hypothesis` satisfiable
/// over the index window. Returns indices into `beats`; empty when the
/// hypothesis cannot be reached.
fn fp_removal_set(
    r: &Record,
    beats: &[BeatObservation],
    window: &[usize],
    hypothesis: HypothesisKind,
) -> Vec<usize> {
    let band = match hypothesis {
        HypothesisKind::Normal => grammar::NORMAL_RR_MS,
        HypothesisKind::Tachycardia => (200.0, grammar::TACHY_RR_MS),
        HypothesisKind::Bradycardia => (grammar::BRADY_RR_MS, 3000.0),
        _ => return vec![],
    };
    let fid_ms = |i: usize| r.sample_to_ms(beats[i].fiducial());
    let rrs_of = |kept: &[usize]| -> Vec<f64> {
        kept.windows(2)
            .map(|w| fid_ms(w[1]) - fid_ms(w[0]))
            .collect()
    };

    // The target RR comes from the trustworthy beats: the hypothesis the
    // removal is trying to satisfy lives at their rhythm, not at the rhythm
    // of the spurious intrusions.
    let good: Vec<usize> = window
        .iter()
        .cloned()
        .filter(|&i| beats[i].quality >= FP_QUALITY_GATE)
        .collect();
    let target_rrs = if good.len() >= 2 {
        rrs_of(&good)
    } else {
        rrs_of(window)
    };
    if target_rrs.is_empty() {
        return vec![];
    }
    let target = median(&target_rrs);
    if target < band.0 || target > band.1 {
        return vec![]; // the hypothesis cannot be satisfied at this rhythm
    }
    let violations = |kept: &[usize]| -> usize {
        rrs_of(kept)
            .iter()
            .filter(|&&rr| (rr - target).abs() > grammar::SHORTCUT_TOL * target)
            .count()
    };

    let mut kept: Vec<usize> = window.to_vec();
    let mut removed: Vec<usize> = Vec::new();
    loop {
        if kept.len() < grammar::MIN_REGULAR_BEATS {
            return vec![];
        }
        let v0 = violations(&kept);
        if v0 == 0 {
            // All-or-nothing acceptance: the final configuration must sit in
            // the hypothesis band with no gap beyond twice its median RR.
            let rrs = rrs_of(&kept);
            let med = median(&rrs);
            let max_rr = rrs.iter().cloned().fold(0.0f64, f64::max);
            if med < band.0 || med > band.1 || max_rr > 2.0 * med + 1e-9 {
                return vec![];
            }
            return removed;
        }
        // Remove the low-quality beat that best restores regularity.
        let mut best: Option<(usize, usize)> = None;
        for (pos, &bi) in kept.iter().enumerate() {
            if beats[bi].quality >= FP_QUALITY_GATE {
                continue;
            }
            let mut trial = kept.clone();
            trial.remove(pos);
            let v = violations(&trial);
            if v < v0 && best.map_or(true, |(_, bv)| v < bv) {
                best = Some((pos, v));
            }
        }
        match best {
            Some((pos, _)) => {
                removed.push(kept[pos]);
                kept.remove(pos);
            }
            None => return vec![],
        }
    }
}

/// Runs the false-positive fixer over troubled stretches of the current
/// segmentation. Returns the annotations to discard.
fn fp_pass(
    r: &Record,
    beats: &[BeatObservation],
    segments: &[RhythmSegment],
) -> Vec<BeatAnnotation> {
    // Collect maximal runs of troubled segments (plus one neighbor each side).
    let troubled: Vec<bool> = segments.iter().map(|s| s.score < TROUBLED_SCORE).collect();
    if !troubled.iter().any(|&t| t) {
        return vec![];
    }
    let mut out: Vec<BeatAnnotation> = Vec::new();
    let mut si = 0usize;
    while si < segments.len() {
        if !troubled[si] {
            si += 1;
            continue;
        }
        let mut sj = si;
        while sj + 1 < segments.len() && troubled[sj + 1] {
            sj += 1;
        }
        let lo_seg = si.saturating_sub(1);
        let hi_seg = (sj + 1).min(segments.len() - 1);
        let mut window: Vec<usize> = Vec::new();
        for s in &segments[lo_seg..=hi_seg] {
            window.extend(&s.member_beats);
        }
        window.sort_unstable();
        window.dedup();

        // Target band from the trustworthy beats in the window.
        let good_rrs: Vec<f64> = {
            let fids: Vec<f64> = window
                .iter()
                .filter(|&&i| beats[i].quality >= FP_QUALITY_GATE)
                .map(|&i| r.sample_to_ms(beats[i].fiducial()))
                .collect();
            fids.windows(2).map(|w| w[1] - w[0]).collect()
        };
        let target = if good_rrs.is_empty() {
            HypothesisKind::Normal
        } else {
            kind_for_median_rr(median(&good_rrs))
        };
        let removal = fp_removal_set(r, beats, &window, target);
        for bi in removal {
            out.push(BeatAnnotation {
                sample_index: beats[bi].fiducial(),
                confidence: 0.0,
            });
        }
        si = sj + 1;
    }
    out.sort_by_key(|a| a.sample_index);
    out.dedup_by_key(|a| a.sample_index);
    out
}

// ---------------------------------------------------------------------------
// False-negative recovery
// ---------------------------------------------------------------------------

/// Typical integrator energy of the confirmed beats.
fn reference_mwi(r: &Record, sig: &SignalEnv, beats: &[BeatObservation]) -> f64 {
    let half = r.samples_per_ms(100.0);
    let peaks: Vec<f64> = beats
        .iter()
        .map(|b| {
            let fid = b.fiducial();
            let lo = fid.saturating_sub(half);
            let hi = (fid + half).min(sig.mwi.len() - 1);
            sig.mwi[lo..=hi].iter().cloned().fold(0.0f64, f64::max)
        })
        .collect();
    median(&peaks)
}

/// Probes suspicious gaps for missed beats. Bradycardia hypotheses probe
/// every interval (apparent bradycardia is how missed beats present);
/// other regular and alternation hypotheses probe intervals well beyond the
/// segment median.
fn fn_pass(
    r: &Record,
    sig: &SignalEnv,
    beats: &[BeatObservation],
    segments: &[RhythmSegment],
) -> Vec<BeatAnnotation> {
    if beats.is_empty() {
        return vec![];
    }
    let refr = r.samples_per_ms(REFRACTORY_MS + 50.0);
    let ref_mwi = reference_mwi(r, sig, beats);
    if !(ref_mwi > 0.0) {
        return vec![];
    }
    let mut found: Vec<BeatAnnotation> = Vec::new();
    for seg in segments {
        let probe_all = seg.kind == HypothesisKind::Bradycardia;
        let relevant = probe_all
            || seg.kind.is_regular()
            || matches!(seg.kind, HypothesisKind::Bigeminy | HypothesisKind::Trigeminy);
        if !relevant || seg.member_beats.len() < 2 {
            continue;
        }
        let fids: Vec<usize> = seg.member_beats.iter().map(|&i| beats[i].fiducial()).collect();
        let rrs: Vec<f64> = fids
            .windows(2)
            .map(|w| (w[1] - w[0]) as f64 * 1000.0 / r.fs as f64)
            .collect();
        let med = median(&rrs);
        for (k, w) in fids.windows(2).enumerate() {
            let gap_ms = rrs[k];
            if !probe_all && gap_ms < GAP_FACTOR * med {
                continue;
            }
            let lo = w[0] + refr;
            let hi = w[1].saturating_sub(refr);
            if let Some(ann) = detect_in_window(r, sig, lo, hi, FN_ENERGY_SCALE, ref_mwi) {
                found.push(ann);
            }
        }
    }

    // Gaps between consecutive segments belong to neither, yet that is
    // exactly where a missed beat splits one rhythm in two.
    for w in segments.windows(2) {
        let (a, b) = (&w[0], &w[1]);
        if a.member_beats.is_empty() || b.member_beats.is_empty() {
            continue;
        }
        let last = beats[*a.member_beats.last().unwrap()].fiducial();
        let first = beats[b.member_beats[0]].fiducial();
        if first <= last {
            continue;
        }
        let gap_ms = (first - last) as f64 * 1000.0 / r.fs as f64;
        let med = {
            let mut rrs: Vec<f64> = Vec::new();
            for seg in [a, b] {
                let fids: Vec<usize> =
                    seg.member_beats.iter().map(|&i| beats[i].fiducial()).collect();
                rrs.extend(
                    fids.windows(2)
                        .map(|w| (w[1] - w[0]) as f64 * 1000.0 / r.fs as f64),
                );
            }
            if rrs.is_empty() {
                continue;
            }
            median(&rrs)
        };
        if gap_ms > GAP_FACTOR * med {
            let lo = last + refr;
            let hi = first.saturating_sub(refr);
            if let Some(ann) = detect_in_window(r, sig, lo, hi, FN_ENERGY_SCALE, ref_mwi) {
                found.push(ann);
            }
        }
    }
    found.sort_by_key(|a| a.sample_index);
    found.dedup_by_key(|a| a.sample_index);
    found
}

fn insert_annotation(anns: &mut Vec<BeatAnnotation>, ann: BeatAnnotation, r: &Record) -> bool {
    let refractory = r.samples_per_ms(REFRACTORY_MS);
    if anns
        .iter()
        .any(|a| (a.sample_index as isize - ann.sample_index as isize).unsigned_abs() < refractory)
    {
        return false;
    }
    let pos = anns.partition_point(|a| a.sample_index < ann.sample_index);
    anns.insert(pos, ann);
    true
}

fn apply_removals(
    anns: &mut Vec<BeatAnnotation>,
    removed: &[BeatAnnotation],
    discarded: &mut Vec<BeatAnnotation>,
    discovered: &mut Vec<BeatAnnotation>,
) {
    for rm in removed {
        if let Some(pos) = anns.iter().position(|a| a.sample_index == rm.sample_index) {
            let ann = anns.remove(pos);
            // A retracted discovery is neither discovered nor discarded.
            if let Some(dpos) = discovered.iter().position(|d| d.sample_index == ann.sample_index)
            {
                discovered.remove(dpos);
            } else {
                discarded.push(ann);
            }
        }
    }
}
