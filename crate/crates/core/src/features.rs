//! Feature extraction: the 42-dimensional global vector and the per-beat
//! feature sequence, plus the measures they are built from.
//!
//! Regular-rhythm-conditioned fields are computed over normal, tachycardia
//! and bradycardia segments only; their `o_`-prefixed counterparts over the
//! complement. Undefined proportions carry a 0 sentinel; undefined
//! continuous fields carry NaN and are replaced by training-set medians at
//! model-fit time.

use serde::{Deserialize, Serialize};

use crate::detect::{analyze, Morphology, SignalEnv};
use crate::error::{CoreError, Result};
use crate::interpret::{HypothesisKind, Interpretation};
use crate::record::Record;
use crate::stats::{median, std_dev};

// ---------------------------------------------------------------------------
// Elementary measures
// ---------------------------------------------------------------------------

/// Sum of the absolute value of the derivative signal; a signal-quality
/// indicator.
pub fn profile(x: &[f64]) -> Result<f64> {
    if x.len() < 2 {
        return Err(CoreError::EmptyInput("profile needs at least 2 samples"));
    }
    Ok(x.windows(2).map(|w| (w[1] - w[0]).abs()).sum())
}

/// Median absolute deviation.
pub fn mad(xs: &[f64]) -> Result<f64> {
    if xs.is_empty() {
        return Err(CoreError::EmptyInput("mad of empty sequence"));
    }
    let m = median(xs);
    let devs: Vec<f64> = xs.iter().map(|x| (x - m).abs()).collect();
    Ok(median(&devs))
}

/// Maximum over lags of the normalized cross-correlation between two
/// waveforms. The shorter waveform slides fully inside the longer one.
pub fn max_xcorr(a: &[f64], b: &[f64]) -> Result<f64> {
    let (s, l) = if a.len() <= b.len() { (a, b) } else { (b, a) };
    if s.len() < 2 {
        return Err(CoreError::EmptyInput("max_xcorr needs >= 2 samples"));
    }
    let is_constant = |x: &[f64]| x.iter().all(|&v| v == x[0]);
    if is_constant(s) || is_constant(l) {
        return Err(CoreError::Degenerate("max_xcorr of constant waveform"));
    }
    let m = s.len();
    let s_mean = s.iter().sum::<f64>() / m as f64;
    let s_dev: Vec<f64> = s.iter().map(|v| v - s_mean).collect();
    let s_norm = s_dev.iter().map(|v| v * v).sum::<f64>().sqrt();
    let mut best = f64::NEG_INFINITY;
    for off in 0..=(l.len() - m) {
        let seg = &l[off..off + m];
        let seg_mean = seg.iter().sum::<f64>() / m as f64;
        let (mut dot, mut nrm) = (0.0, 0.0);
        for (x, sd) in seg.iter().zip(&s_dev) {
            let d = x - seg_mean;
            dot += d * sd;
            nrm += d * d;
        }
        if nrm > 0.0 && s_norm > 0.0 {
            best = best.max(dot / (nrm.sqrt() * s_norm));
        }
    }
    if best.is_finite() {
        Ok(best.clamp(-1.0, 1.0))
    } else {
        Err(CoreError::Degenerate("max_xcorr found no valid alignment"))
    }
}

/// Heart-rate corrected QT (Bazett): qt / sqrt(rr in seconds).
pub fn qt_corrected(qt_ms: f64, rr_ms: f64) -> Result<f64> {
    if !(rr_ms > 0.0) {
        return Err(CoreError::Degenerate("qt_corrected with nonpositive RR"));
    }
    Ok(qt_ms / (rr_ms / 1000.0).sqrt())
}

/// Sample-entropy parameters for the RR irregularity measure.
pub mod sampen {
    /// Template length.
    pub const M: usize = 1;
    /// Match tolerance in ms.
    pub const R_MS: f64 = 30.0;
    /// Sliding-window length in RR intervals.
    pub const WINDOW: usize = 8;
    /// Cap when a window has no template matches: ln of the maximum
    /// possible template-pair count for an 8-value window.
    pub fn cap() -> f64 {
        28f64.ln()
    }
}

/// Sample entropy of one window (m = 1, Chebyshev distance, tolerance r).
/// Template pairs follow the convention that only templates with an (m+1)
/// extension are counted, so a constant window scores exactly 0.
fn sample_entropy_window(w: &[f64], r: f64) -> f64 {
    let n = w.len();
    let m = sampen::M;
    if n <= m + 1 {
        return sampen::cap();
    }
    let nt = n - m; // usable template starts
    let mut count_m = 0usize;
    let mut count_m1 = 0usize;
    for i in 0..nt {
        for j in (i + 1)..nt {
            if (w[i] - w[j]).abs() <= r {
                count_m += 1;
                if (w[i + 1] - w[j + 1]).abs() <= r {
                    count_m1 += 1;
                }
            }
        }
    }
    if count_m == 0 || count_m1 == 0 {
        return sampen::cap();
    }
    -((count_m1 as f64) / (count_m as f64)).ln()
}

/// Rhythm irregularity from per-window sample entropy over 8-interval
/// sliding windows. Returns (median, max) over windows.
pub fn rr_irregularity(rr_ms: &[f64]) -> Result<(f64, f64)> {
    if rr_ms.len() < sampen::WINDOW + 1 {
        return Err(CoreError::EmptyInput(
            "rr_irregularity needs at least 9 RR intervals",
        ));
    }
    let mut entropies = Vec::with_capacity(rr_ms.len() - sampen::WINDOW + 1);
    for w in rr_ms.windows(sampen::WINDOW) {
        entropies.push(sample_entropy_window(w, sampen::R_MS));
    }
    let max = entropies.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    Ok((median(&entropies), max))
}

/// Fraction of successive RR differences exceeding `threshold_ms`.
pub fn pnnx(rr_ms: &[f64], threshold_ms: f64) -> f64 {
    if rr_ms.len() < 2 {
        return 0.0;
    }
    let diffs: Vec<f64> = rr_ms.windows(2).map(|w| (w[1] - w[0]).abs()).collect();
    diffs.iter().filter(|&&d| d > threshold_ms).count() as f64 / diffs.len() as f64
}

/// Spectral summary of the TP intervals: per-window Hann periodogram zero-
/// padded to 256 points; prevailing frequency is the argmax in 0.5-40 Hz,
/// entropy is the Shannon entropy of the band-normalized spectrum. Returns
/// medians over windows.
pub fn tp_spectral(r: &Record, windows: &[(usize, usize)]) -> Result<(f64, f64)> {
    const NFFT: usize = 256;
    const BAND: (f64, f64) = (0.5, 40.0);
    let total: usize = windows
        .iter()
        .map(|&(lo, hi)| hi.saturating_sub(lo))
        .sum();
    if total < 64 {
        return Err(CoreError::EmptyInput("tp_spectral needs >= 64 TP samples"));
    }
    let fs = r.fs as f64;
    let x = r.samples_f64();
    let mut freqs_out = Vec::new();
    let mut ents_out = Vec::new();
    for &(lo, hi) in windows {
        if hi <= lo || hi > x.len() || hi - lo < 16 {
            continue;
        }
        let seg = &x[lo..hi];
        let (freqs, power) = crate::dsp::periodogram(seg, fs, NFFT);
        let band: Vec<(f64, f64)> = freqs
            .iter()
            .cloned()
            .zip(power.iter().cloned())
            .filter(|&(f, _)| f >= BAND.0 && f <= BAND.1)
            .collect();
        let total_power: f64 = band.iter().map(|&(_, p)| p).sum();
        if !(total_power > 0.0) {
            continue; // zero spectrum: window contributes nothing
        }
        let (peak_f, _) = band
            .iter()
            .cloned()
            .max_by(|a, b| a.1.partial_cmp(&b.1).unwrap())
            .unwrap();
        let entropy: f64 = -band
            .iter()
            .map(|&(_, p)| p / total_power)
            .filter(|&p| p > 0.0)
            .map(|p| p * p.ln())
            .sum::<f64>();
        freqs_out.push(peak_f);
        ents_out.push(entropy);
    }
    if freqs_out.is_empty() {
        return Err(CoreError::Degenerate("tp_spectral: all windows flat"));
    }
    Ok((median(&freqs_out), median(&ents_out)))
}

// ---------------------------------------------------------------------------
// Global features
// ---------------------------------------------------------------------------

/// Wide-QRS threshold (ms).
pub const WIDE_QRS_MS: f64 = 110.0;
/// Long-PR threshold (ms).
pub const LONG_PR_MS: f64 = 210.0;
/// Heart rate above which time counts toward the longest-tachycardia run.
pub const TACHY_RUN_BPM: f64 = 100.0;

/// How a feature responds to amplitude rescaling; also selects the
/// missing-value sentinel (proportions impute to 0, the rest to the
/// training-set median).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FeatureKind {
    Proportion,
    DurationMs,
    Amplitude,
    Dimensionless,
    Frequency,
}

macro_rules! global_features {
    ($(($field:ident, $name:literal, $kind:ident)),+ $(,)?) => {
        /// The 42 global features, in the canonical column order.
        #[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
        pub struct GlobalFeatures {
            $(pub $field: f64,)+
        }

        impl GlobalFeatures {
            pub const DIM: usize = [$(stringify!($field)),+].len();
            pub const NAMES: [&'static str; Self::DIM] = [$($name),+];
            pub const KINDS: [FeatureKind; Self::DIM] = [$(FeatureKind::$kind),+];

            pub fn as_vec(&self) -> Vec<f64> {
                vec![$(self.$field),+]
            }

            pub fn from_vec(v: &[f64]) -> GlobalFeatures {
                assert_eq!(v.len(), Self::DIM);
                let mut it = v.iter();
                GlobalFeatures {
                    $($field: *it.next().unwrap(),)+
                }
            }

            /// All-sentinel row: proportions 0, everything else NaN.
            pub fn sentinel() -> GlobalFeatures {
                let v: Vec<f64> = Self::KINDS
                    .iter()
                    .map(|k| match k {
                        FeatureKind::Proportion => 0.0,
                        _ => f64::NAN,
                    })
                    .collect();
                Self::from_vec(&v)
            }
        }
    };
}

global_features![
    (t_sr, "tSR", Proportion),
    (t1b, "t1b", DurationMs),
    (t_or, "tOR", DurationMs),
    (long_tch, "longTch", DurationMs),
    (rr, "RR", DurationMs),
    (rrd_std, "RRd_std", DurationMs),
    (rrd, "RRd", DurationMs),
    (mrrd, "MRRd", DurationMs),
    (rr_mirr, "RR_MIrr", Dimensionless),
    (rr_irr, "RR_Irr", Dimensionless),
    (pnn10, "PNN10", Proportion),
    (pnn50, "PNN50", Proportion),
    (pnn100, "PNN100", Proportion),
    (o_pnn50, "o_PNN50", Proportion),
    (m_rr, "mRR", DurationMs),
    (o_m_rr, "o_mRR", DurationMs),
    (n_np, "n_nP", Proportion),
    (n_at, "n_aT", Amplitude),
    (n_pr, "n_PR", DurationMs),
    (psmooth, "Psmooth", Dimensionless),
    (pdistd, "Pdistd", Dimensionless),
    (mpdist, "MPdist", Dimensionless),
    (prof, "prof", Amplitude),
    (pw_profd, "pw_profd", Amplitude),
    (xcorr, "xcorr", Dimensionless),
    (o_xcorr, "o_xcorr", Dimensionless),
    (prd, "PRd", DurationMs),
    (qt, "QT", DurationMs),
    (tp, "TP", Frequency),
    (tp_freq, "TPfreq", Dimensionless),
    (pw_prof, "pw_prof", Amplitude),
    (n_t, "nT", Proportion),
    (n_txcorr, "n_Txcorr", Dimensionless),
    (n_pxcorr, "n_Pxcorr", Dimensionless),
    (baseline, "baseline", Amplitude),
    (o_baseline, "o_baseline", Amplitude),
    (w_qrs, "wQRS", Proportion),
    (w_qrs_xc, "wQRS_xc", Dimensionless),
    (w_qrs_prof, "wQRS_prof", Amplitude),
    (w_pr, "w_PR", Proportion),
    (x_xc, "x_xc", Dimensionless),
    (x_rrel, "x_rrel", Dimensionless),
];

struct BeatCtx<'a> {
    r: &'a Record,
    itp: &'a Interpretation,
    /// Fiducial sample indices.
    fids: Vec<usize>,
    /// Fiducial times in ms.
    fids_ms: Vec<f64>,
    /// Segment index of each beat.
    seg_of: Vec<usize>,
}

impl<'a> BeatCtx<'a> {
    fn new(r: &'a Record, itp: &'a Interpretation) -> BeatCtx<'a> {
        let fids: Vec<usize> = itp.beats.iter().map(|b| b.fiducial()).collect();
        let fids_ms = fids.iter().map(|&f| r.sample_to_ms(f)).collect();
        let mut seg_of = vec![usize::MAX; itp.beats.len()];
        for (si, s) in itp.segments.iter().enumerate() {
            for &b in &s.member_beats {
                seg_of[b] = si;
            }
        }
        BeatCtx {
            r,
            itp,
            fids,
            fids_ms,
            seg_of,
        }
    }

    fn beat_is_regular(&self, i: usize) -> bool {
        self.itp.segments[self.seg_of[i]].kind.is_regular()
    }

    /// RR between beats a and b in ms, from integer sample differences so
    /// that identical gaps are bit-identical.
    fn rr_ms(&self, a: usize, b: usize) -> f64 {
        (self.fids[b] - self.fids[a]) as f64 * 1000.0 / self.r.fs as f64
    }

    /// RR before beat i (ms), when i > 0.
    fn rr_before(&self, i: usize) -> Option<f64> {
        (i > 0).then(|| self.rr_ms(i - 1, i))
    }

    /// Consecutive-beat RRs confined to segments matching `regular`.
    fn segment_rrs(&self, regular: bool) -> Vec<f64> {
        let mut out = Vec::new();
        for s in &self.itp.segments {
            if s.kind.is_regular() != regular {
                continue;
            }
            for w in s.member_beats.windows(2) {
                out.push(self.rr_ms(w[0], w[1]));
            }
        }
        out
    }

    fn all_rrs(&self) -> Vec<f64> {
        (1..self.fids.len()).map(|i| self.rr_ms(i - 1, i)).collect()
    }

    fn raw_window(&self, lo: usize, hi: usize) -> Vec<f64> {
        let hi = hi.min(self.r.samples.len());
        if hi <= lo {
            return Vec::new();
        }
        self.r.samples[lo..hi].iter().map(|&v| v as f64).collect()
    }

    fn qrs_window(&self, i: usize) -> Vec<f64> {
        let b = &self.itp.beats[i];
        self.raw_window(b.qrs.onset, b.qrs.offset + 1)
    }

    /// TP interval after beat i, if there is a following beat.
    fn tp_window(&self, i: usize) -> Option<(usize, usize)> {
        if i + 1 >= self.itp.beats.len() {
            return None;
        }
        let b = &self.itp.beats[i];
        let next = &self.itp.beats[i + 1];
        let margin = self.r.samples_per_ms(10.0);
        let lo = if b.t.present {
            b.t.offset + margin
        } else {
            b.qrs.offset + self.r.samples_per_ms(160.0)
        };
        let hi = if next.p.present {
            next.p.onset.saturating_sub(margin)
        } else {
            next.qrs.onset.saturating_sub(self.r.samples_per_ms(120.0))
        };
        (hi > lo + 8).then_some((lo, hi))
    }

    /// Median of consecutive-pair max cross-correlations of beat windows.
    fn pair_xcorr<F>(&self, idxs: &[usize], window: F) -> f64
    where
        F: Fn(usize) -> Vec<f64>,
    {
        let mut vals = Vec::new();
        for w in idxs.windows(2) {
            let a = window(w[0]);
            let b = window(w[1]);
            if a.len() >= 2 && b.len() >= 2 {
                if let Ok(x) = max_xcorr(&a, &b) {
                    vals.push(x);
                }
            }
        }
        if vals.is_empty() {
            f64::NAN
        } else {
            median(&vals)
        }
    }
}

fn nan_median(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        f64::NAN
    } else {
        median(xs)
    }
}

fn nan_mad(xs: &[f64]) -> f64 {
    mad(xs).unwrap_or(f64::NAN)
}

/// Computes the 42 global features from a record and its interpretation.
pub fn global_features(r: &Record, itp: &Interpretation) -> GlobalFeatures {
    let sig = analyze(r);
    global_features_with(r, &sig, itp)
}

pub fn global_features_with(r: &Record, sig: &SignalEnv, itp: &Interpretation) -> GlobalFeatures {
    if itp.beats.is_empty() {
        return GlobalFeatures::sentinel();
    }
    let ctx = BeatCtx::new(r, itp);
    let n_beats = itp.beats.len();
    let n_samples = r.samples.len();

    // Effective segment spans partition the record: the first segment
    // reaches back to the record start, the last to the end, and interior
    // boundaries sit halfway between neighbors.
    let spans: Vec<(usize, usize)> = {
        let segs = &itp.segments;
        let mid = |k: usize| (segs[k - 1].end + segs[k].start) / 2;
        (0..segs.len())
            .map(|k| {
                let lo = if k == 0 { 0 } else { mid(k) + 1 };
                let hi = if k + 1 == segs.len() {
                    n_samples - 1
                } else {
                    mid(k + 1)
                };
                (lo, hi.max(lo))
            })
            .collect()
    };
    let span_ms = |k: usize| (spans[k].1 - spans[k].0 + 1) as f64 * 1000.0 / r.fs as f64;
    let regular_ms: f64 = itp
        .segments
        .iter()
        .enumerate()
        .filter(|(_, s)| s.kind.is_regular())
        .map(|(k, _)| span_ms(k))
        .sum();
    let nonregular_ms: f64 = itp
        .segments
        .iter()
        .enumerate()
        .filter(|(_, s)| !s.kind.is_regular())
        .map(|(k, _)| span_ms(k))
        .sum();

    let all_rrs = ctx.all_rrs();
    let reg_rrs = ctx.segment_rrs(true);
    let nonreg_rrs = ctx.segment_rrs(false);

    // Longest stretch of instantaneous rate above 100 bpm.
    let tachy_rr = 60_000.0 / TACHY_RUN_BPM;
    let long_tch = {
        let mut best = 0.0f64;
        let mut run = 0.0f64;
        for &rr in &all_rrs {
            if rr < tachy_rr {
                run += rr;
                best = best.max(run);
            } else {
                run = 0.0;
            }
        }
        best
    };

    let rr_diffs: Vec<f64> = all_rrs.windows(2).map(|w| w[1] - w[0]).collect();
    let reg_diffs: Vec<f64> = {
        let mut out = Vec::new();
        for s in itp.segments.iter().filter(|s| s.kind.is_regular()) {
            let rrs: Vec<f64> = s
                .member_beats
                .windows(2)
                .map(|w| ctx.rr_ms(w[0], w[1]))
                .collect();
            out.extend(rrs.windows(2).map(|w| (w[1] - w[0]).abs()));
        }
        out
    };

    let (rr_irr, rr_mirr) = rr_irregularity(&all_rrs)
        .map(|(med, max)| (med, max))
        .unwrap_or((f64::NAN, f64::NAN));

    // Per-beat building blocks.
    let regular_beats: Vec<usize> = (0..n_beats).filter(|&i| ctx.beat_is_regular(i)).collect();
    let p_scores: Vec<f64> = itp.beats.iter().map(|b| b.p_score).collect();
    let pr_all: Vec<f64> = itp
        .beats
        .iter()
        .filter(|b| b.p.present)
        .map(|b| (b.qrs.onset - b.p.onset) as f64 * 1000.0 / r.fs as f64)
        .collect();
    let pr_reg: Vec<f64> = regular_beats
        .iter()
        .filter(|&&i| itp.beats[i].p.present)
        .map(|&i| (itp.beats[i].qrs.onset - itp.beats[i].p.onset) as f64 * 1000.0 / r.fs as f64)
        .collect();

    let pw_profiles: Vec<f64> = (0..n_beats)
        .filter_map(|i| {
            let (lo, hi) = itp.beats[i].p_window;
            let w = ctx.raw_window(lo, hi);
            profile(&w).ok()
        })
        .collect();

    // Psmooth: std/mean ratio of the P-wave derivative, clamped to [0, 100].
    let psmooth_vals: Vec<f64> = itp
        .beats
        .iter()
        .filter(|b| b.p.present && b.p.offset > b.p.onset + 2)
        .map(|b| {
            let seg = &sig.detrended[b.p.onset..=b.p.offset.min(sig.detrended.len() - 1)];
            let d: Vec<f64> = seg.windows(2).map(|w| w[1] - w[0]).collect();
            let m = d.iter().sum::<f64>() / d.len().max(1) as f64;
            let s = std_dev(&d);
            (s / m.abs().max(1e-12)).clamp(0.0, 100.0)
        })
        .collect();

    let qtc: Vec<f64> = (0..n_beats)
        .filter_map(|i| {
            let b = &itp.beats[i];
            if !b.t.present {
                return None;
            }
            let qt_ms = (b.t.offset.saturating_sub(b.qrs.onset)) as f64 * 1000.0 / r.fs as f64;
            let rr = ctx.rr_before(i).or_else(|| {
                if all_rrs.is_empty() {
                    None
                } else {
                    Some(median(&all_rrs))
                }
            })?;
            qt_corrected(qt_ms, rr).ok()
        })
        .collect();

    let tp_windows: Vec<(usize, usize)> = (0..n_beats).filter_map(|i| ctx.tp_window(i)).collect();
    let (tp, tp_freq) = tp_spectral(r, &tp_windows).unwrap_or((f64::NAN, f64::NAN));

    // Cross-correlation families.
    let nonregular_beats: Vec<usize> =
        (0..n_beats).filter(|&i| !ctx.beat_is_regular(i)).collect();
    let xcorr = ctx.pair_xcorr(&regular_beats, |i| ctx.qrs_window(i));
    let o_xcorr = ctx.pair_xcorr(&nonregular_beats, |i| ctx.qrs_window(i));
    let t_beats: Vec<usize> = regular_beats
        .iter()
        .cloned()
        .filter(|&i| itp.beats[i].t.present)
        .collect();
    let n_txcorr = ctx.pair_xcorr(&t_beats, |i| {
        let b = &itp.beats[i];
        ctx.raw_window(b.t.onset, b.t.offset + 1)
    });
    let p_beats: Vec<usize> = regular_beats
        .iter()
        .cloned()
        .filter(|&i| itp.beats[i].p.present)
        .collect();
    let n_pxcorr = ctx.pair_xcorr(&p_beats, |i| {
        let b = &itp.beats[i];
        ctx.raw_window(b.p.onset, b.p.offset + 1)
    });

    // Wide-QRS family.
    let wide: Vec<usize> = (0..n_beats)
        .filter(|&i| itp.beats[i].qrs.duration_ms(r.fs) > WIDE_QRS_MS)
        .collect();
    let w_qrs = wide.len() as f64 / n_beats as f64;
    let w_qrs_xc = ctx.pair_xcorr(&wide, |i| ctx.qrs_window(i));
    let w_qrs_prof = {
        let vals: Vec<f64> = wide
            .iter()
            .filter_map(|&i| {
                let b = &itp.beats[i];
                let lo = b.qrs.onset.saturating_sub(r.samples_per_ms(300.0));
                let w = ctx.raw_window(lo, b.qrs.onset);
                profile(&w).ok()
            })
            .collect();
        nan_median(&vals)
    };

    // Ectopic family.
    let x_xc = ctx.pair_xcorr(&itp.ectopics, |i| ctx.qrs_window(i));
    let x_rrel = {
        let vals: Vec<f64> = itp
            .ectopics
            .iter()
            .filter_map(|&i| {
                let prev = ctx.rr_before(i)?;
                let next = (i + 1 < n_beats).then(|| ctx.rr_ms(i, i + 1))?;
                (next > 0.0).then(|| prev / next)
            })
            .collect();
        nan_median(&vals)
    };

    // Baseline profile over regular / non-regular spans.
    let base_profile = |regular: bool| -> f64 {
        let mut total = 0.0;
        let mut any = false;
        for (k, s) in itp.segments.iter().enumerate() {
            if s.kind.is_regular() != regular {
                continue;
            }
            let (lo, hi) = spans[k];
            if hi > lo + 1 {
                if let Ok(p) = profile(&sig.baseline[lo..=hi]) {
                    total += p;
                    any = true;
                }
            }
        }
        if any {
            total
        } else {
            f64::NAN
        }
    };

    let t_amps_reg: Vec<f64> = regular_beats
        .iter()
        .filter(|&&i| itp.beats[i].t.present)
        .map(|&i| itp.beats[i].t.amplitude)
        .collect();

    let full: Vec<f64> = r.samples_f64();
    let duration_ms = r.duration_ms();

    GlobalFeatures {
        t_sr: (regular_ms / duration_ms).clamp(0.0, 1.0),
        t1b: ctx.fids_ms[0],
        t_or: nonregular_ms,
        long_tch,
        rr: nan_median(&reg_rrs),
        rrd_std: if rr_diffs.is_empty() {
            f64::NAN
        } else {
            std_dev(&rr_diffs)
        },
        rrd: nan_mad(&reg_rrs),
        mrrd: if reg_diffs.is_empty() {
            f64::NAN
        } else {
            reg_diffs.iter().cloned().fold(0.0, f64::max)
        },
        rr_mirr,
        rr_irr,
        pnn10: pnnx(&all_rrs, 10.0),
        pnn50: pnnx(&all_rrs, 50.0),
        pnn100: pnnx(&all_rrs, 100.0),
        o_pnn50: if nonreg_rrs.len() < 2 {
            0.0
        } else {
            pnnx(&nonreg_rrs, 50.0)
        },
        m_rr: if reg_rrs.is_empty() {
            f64::NAN
        } else {
            reg_rrs.iter().cloned().fold(f64::INFINITY, f64::min)
        },
        o_m_rr: if nonreg_rrs.is_empty() {
            f64::NAN
        } else {
            nonreg_rrs.iter().cloned().fold(f64::INFINITY, f64::min)
        },
        n_np: if regular_beats.is_empty() {
            0.0
        } else {
            regular_beats
                .iter()
                .filter(|&&i| itp.beats[i].p.present)
                .count() as f64
                / regular_beats.len() as f64
        },
        n_at: nan_median(&t_amps_reg),
        n_pr: nan_median(&pr_reg),
        psmooth: nan_median(&psmooth_vals),
        pdistd: nan_mad(&p_scores),
        mpdist: p_scores.iter().cloned().fold(f64::NAN, f64::max),
        prof: profile(&full).unwrap_or(f64::NAN),
        pw_profd: nan_mad(&pw_profiles),
        xcorr,
        o_xcorr,
        prd: nan_mad(&pr_all),
        qt: nan_median(&qtc),
        tp,
        tp_freq,
        pw_prof: nan_median(&pw_profiles),
        n_t: itp.beats.iter().filter(|b| b.t.present).count() as f64 / n_beats as f64,
        n_txcorr,
        n_pxcorr,
        baseline: base_profile(true),
        o_baseline: base_profile(false),
        w_qrs,
        w_qrs_xc,
        w_qrs_prof,
        w_pr: itp
            .beats
            .iter()
            .filter(|b| {
                b.p.present
                    && (b.qrs.onset - b.p.onset) as f64 * 1000.0 / r.fs as f64 > LONG_PR_MS
            })
            .count() as f64
            / n_beats as f64,
        x_xc,
        x_rrel,
    }
}

// ---------------------------------------------------------------------------
// Per-beat features
// ---------------------------------------------------------------------------

/// Layout of one beat-feature row.
pub const BEAT_FEATURE_DIM: usize = 41;

pub fn beat_feature_names() -> Vec<String> {
    let mut names: Vec<String> = [
        "rr_ms",
        "rr_irregularity",
        "pr_ms",
        "profile_local",
        "p_profile",
        "p_score",
        "qt_corrected",
        "tp_prevailing_freq",
        "tp_freq_entropy",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    for k in 1..=3 {
        names.push(format!("subwave{k}_duration_ms"));
        names.push(format!("subwave{k}_amplitude"));
        names.push(format!("subwave{k}_turning_ms"));
    }
    names.push("axis_proxy".into());
    names.push("p_duration_ms".into());
    names.push("p_amplitude".into());
    names.push("t_duration_ms".into());
    names.push("t_amplitude".into());
    names.push("st_deviation".into());
    for m in Morphology::ALL {
        names.push(format!("morph_{}", m.token().replace('\'', "p")));
    }
    for k in HypothesisKind::ALL {
        names.push(format!("rhythm_{k:?}").to_lowercase());
    }
    names.push("quality".into());
    debug_assert_eq!(names.len(), BEAT_FEATURE_DIM);
    names
}

/// Computes the per-beat feature sequence: one row per final beat,
/// chronological, all values finite after record-level imputation.
pub fn beat_features(r: &Record, itp: &Interpretation) -> Vec<Vec<f64>> {
    let sig = analyze(r);
    beat_features_with(r, &sig, itp)
}

pub fn beat_features_with(r: &Record, _sig: &SignalEnv, itp: &Interpretation) -> Vec<Vec<f64>> {
    let n = itp.beats.len();
    if n == 0 {
        return Vec::new();
    }
    let ctx = BeatCtx::new(r, itp);
    let all_rrs = ctx.all_rrs();
    let med_rr = if all_rrs.is_empty() {
        f64::NAN
    } else {
        median(&all_rrs)
    };
    let (global_irr, _) = rr_irregularity(&all_rrs).unwrap_or((f64::NAN, f64::NAN));

    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(n);
    for i in 0..n {
        let b = &itp.beats[i];
        let mut row: Vec<f64> = Vec::with_capacity(BEAT_FEATURE_DIM);

        row.push(ctx.rr_before(i).unwrap_or(med_rr)); // 0: rr_ms
        let local_irr = if i >= crate::features::sampen::WINDOW {
            let lo = i - crate::features::sampen::WINDOW;
            let w: Vec<f64> = all_rrs[lo..i].to_vec();
            sample_entropy_window(&w, sampen::R_MS)
        } else {
            global_irr
        };
        row.push(local_irr); // 1
        let pr = b
            .p
            .present
            .then(|| (b.qrs.onset - b.p.onset) as f64 * 1000.0 / r.fs as f64);
        row.push(pr.unwrap_or(f64::NAN)); // 2 (imputed below)

        let lo = b.qrs.onset.saturating_sub(r.samples_per_ms(250.0));
        let hi = b.qrs.offset + r.samples_per_ms(300.0);
        row.push(profile(&ctx.raw_window(lo, hi)).unwrap_or(f64::NAN)); // 3
        let (plo, phi) = b.p_window;
        row.push(profile(&ctx.raw_window(plo, phi)).unwrap_or(f64::NAN)); // 4
        row.push(b.p_score); // 5

        let qtc = b.t.present.then(|| {
            let qt_ms = (b.t.offset.saturating_sub(b.qrs.onset)) as f64 * 1000.0 / r.fs as f64;
            let rr = ctx.rr_before(i).unwrap_or(med_rr);
            qt_corrected(qt_ms, rr).unwrap_or(f64::NAN)
        });
        row.push(qtc.unwrap_or(f64::NAN)); // 6

        let tp = ctx
            .tp_window(i)
            .and_then(|w| tp_spectral(r, &[w]).ok())
            .unwrap_or((f64::NAN, f64::NAN));
        row.push(tp.0); // 7
        row.push(tp.1); // 8

        for k in 0..3 {
            match b.subwaves.get(k) {
                Some(sw) => {
                    row.push(sw.duration_ms);
                    row.push(sw.amplitude);
                    row.push(
                        (sw.turning_point.saturating_sub(b.qrs.onset)) as f64 * 1000.0
                            / r.fs as f64,
                    );
                }
                None => {
                    row.push(0.0);
                    row.push(0.0);
                    row.push(0.0);
                }
            }
        }

        row.push(b.axis_proxy); // 18
        row.push(if b.p.present { b.p.duration_ms(r.fs) } else { 0.0 });
        row.push(if b.p.present { b.p.amplitude } else { 0.0 });
        row.push(if b.t.present { b.t.duration_ms(r.fs) } else { 0.0 });
        row.push(if b.t.present { b.t.amplitude } else { 0.0 });
        row.push(b.st_deviation); // 23

        for m in Morphology::ALL {
            row.push(if b.morphology == m { 1.0 } else { 0.0 });
        }
        let kind = itp.segments[ctx.seg_of[i]].kind;
        for k in HypothesisKind::ALL {
            row.push(if kind == k { 1.0 } else { 0.0 });
        }
        row.push(b.quality); // 40
        debug_assert_eq!(row.len(), BEAT_FEATURE_DIM);
        rows.push(row);
    }

    // Record-level imputation: replace NaN with per-column medians of the
    // defined values, or 0 when a column is entirely undefined.
    for col in 0..BEAT_FEATURE_DIM {
        let defined: Vec<f64> = rows
            .iter()
            .map(|r| r[col])
            .filter(|v| v.is_finite())
            .collect();
        let fill = if defined.is_empty() {
            0.0
        } else {
            median(&defined)
        };
        for row in rows.iter_mut() {
            if !row[col].is_finite() {
                row[col] = fill;
            }
        }
    }
    rows
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detect::{delineate, detect_beats};
    use crate::interpret::interpret;
    use crate::record::RecordClass;
    use crate::synth::{corpus_spec, generate, GenSpec, DEFAULT_DURATION_S};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    fn full_features(r: &Record) -> (Interpretation, GlobalFeatures) {
        let anns = detect_beats(r).unwrap();
        let beats = delineate(r, &anns);
        let itp = interpret(r, &beats);
        let gf = global_features(r, &itp);
        (itp, gf)
    }

    #[test]
    fn profile_hand_cases() {
        assert_eq!(profile(&[0.0, 1.0, 0.0, 1.0]).unwrap(), 3.0);
        assert_eq!(profile(&[5.0; 10]).unwrap(), 0.0);
        assert!(profile(&[1.0]).is_err());
        // Independent brute force on a pseudo-random sequence.
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let xs: Vec<f64> = (0..100).map(|_| rng.gen_range(-5.0..5.0)).collect();
        let mut acc = 0.0;
        for i in 1..xs.len() {
            acc += (xs[i] - xs[i - 1]).abs();
        }
        assert!((profile(&xs).unwrap() - acc).abs() < 1e-12);
    }

    #[test]
    fn mad_hand_cases() {
        assert_eq!(mad(&[1.0, 2.0, 3.0, 4.0, 100.0]).unwrap(), 1.0);
        assert_eq!(mad(&[7.0; 5]).unwrap(), 0.0);
        assert_eq!(mad(&[3.0]).unwrap(), 0.0);
        assert!(mad(&[]).is_err());
    }

    #[test]
    fn max_xcorr_cases() {
        let a: Vec<f64> = (0..50).map(|i| ((i as f64) * 0.3).sin()).collect();
        assert!((max_xcorr(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        let neg: Vec<f64> = a.iter().map(|v| -v).collect();
        // Equal lengths allow only the zero-lag alignment.
        assert!((max_xcorr(&a, &neg).unwrap() + 1.0).abs() < 1e-12);
        // Shift oracle: a shifted copy correlates perfectly at some lag.
        let shifted: Vec<f64> = a[7..].to_vec();
        assert!((max_xcorr(&a, &shifted).unwrap() - 1.0).abs() < 1e-9);
        assert!(max_xcorr(&[1.0, 1.0, 1.0], &a).is_err());
    }

    #[test]
    fn qt_corrected_cases() {
        assert_eq!(qt_corrected(400.0, 1000.0).unwrap(), 400.0);
        assert!((qt_corrected(400.0, 640.0).unwrap() - 500.0).abs() < 1e-12);
        assert!(qt_corrected(400.0, 0.0).is_err());
    }

    /// Independent brute-force sample entropy used as the oracle.
    fn naive_sampen(w: &[f64], m: usize, r: f64) -> f64 {
        let n = w.len();
        let nt = n - m;
        let dist = |i: usize, j: usize, len: usize| -> f64 {
            (0..len)
                .map(|k| (w[i + k] - w[j + k]).abs())
                .fold(0.0, f64::max)
        };
        let mut bm = 0usize;
        let mut am = 0usize;
        for i in 0..nt {
            for j in (i + 1)..nt {
                if dist(i, j, m) <= r {
                    bm += 1;
                }
                if dist(i, j, m + 1) <= r {
                    am += 1;
                }
            }
        }
        if am == 0 || bm == 0 {
            return 28f64.ln();
        }
        -((am as f64) / (bm as f64)).ln()
    }

    #[test]
    fn rr_irregularity_cases() {
        let constant = vec![800.0; 12];
        let (med, max) = rr_irregularity(&constant).unwrap();
        assert_eq!(med, 0.0);
        assert_eq!(max, 0.0);

        let alternating: Vec<f64> = (0..12)
            .map(|i| if i % 2 == 0 { 600.0 } else { 1000.0 })
            .collect();
        let (med, _) = rr_irregularity(&alternating).unwrap();
        let mut oracle = Vec::new();
        for w in alternating.windows(8) {
            oracle.push(naive_sampen(w, 1, 30.0));
        }
        oracle.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let omed = 0.5 * (oracle[oracle.len() / 2 - 1] + oracle[oracle.len() / 2]);
        assert!((med - omed).abs() < 1e-12, "{med} vs oracle {omed}");

        assert!(rr_irregularity(&[800.0; 8]).is_err());
    }

    #[test]
    fn pnnx_hand_case() {
        let rr = [800.0, 860.0, 805.0, 900.0];
        assert_eq!(pnnx(&rr, 50.0), 1.0);
        assert_eq!(pnnx(&rr, 100.0), 0.0);
        assert_eq!(pnnx(&rr, 10.0), 1.0);
        assert_eq!(pnnx(&[800.0], 50.0), 0.0);
    }

    #[test]
    fn tp_spectral_tone_flat_noise() {
        // Tone at 7 Hz in three windows.
        let fs = 300u32;
        let n = 3000usize;
        let x: Vec<i16> = (0..n)
            .map(|i| {
                (300.0 * (2.0 * std::f64::consts::PI * 7.0 * i as f64 / fs as f64).sin()) as i16
            })
            .collect();
        let r = Record::new("T", fs, 1000.0, x).unwrap();
        let windows = vec![(100usize, 400usize), (500, 800), (900, 1200)];
        let (freq, tone_entropy) = tp_spectral(&r, &windows).unwrap();
        assert!((freq - 7.0).abs() <= 0.6, "prevailing {freq}");

        let flat = Record::new("F", fs, 1000.0, vec![0i16; n]).unwrap();
        assert!(tp_spectral(&flat, &windows).is_err());
        assert!(tp_spectral(&r, &[(0, 30)]).is_err());

        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let noise: Vec<i16> = (0..n).map(|_| rng.gen_range(-300..300) as i16).collect();
        let rn = Record::new("N", fs, 1000.0, noise).unwrap();
        let (_, noise_entropy) = tp_spectral(&rn, &windows).unwrap();
        assert!(
            noise_entropy > tone_entropy,
            "noise {noise_entropy} vs tone {tone_entropy}"
        );
    }

    #[test]
    fn names_are_unique_and_complete() {
        assert_eq!(GlobalFeatures::DIM, 42);
        assert_eq!(GlobalFeatures::NAMES.len(), 42);
        assert_eq!(GlobalFeatures::KINDS.len(), 42);
        let mut names = GlobalFeatures::NAMES.to_vec();
        names.sort_unstable();
        names.dedup();
        assert_eq!(names.len(), 42, "duplicate feature names");
        let gf = GlobalFeatures::sentinel();
        assert_eq!(gf.as_vec().len(), 42);
    }

    #[test]
    fn clean_normal_record_features() {
        let mut spec = GenSpec::normal(75.0, 17);
        spec.rr_jitter_pct = 0.0;
        let (r, _) = generate(&spec).unwrap();
        let (itp, gf) = full_features(&r);
        assert_eq!(itp.segments.len(), 1);
        assert_eq!(gf.t_sr, 1.0, "tSR should cover the whole record");
        assert!((gf.rr - 800.0).abs() <= 4.0, "RR {}", gf.rr);
        assert_eq!(gf.rrd, 0.0);
        assert_eq!(gf.pnn50, 0.0);
        assert_eq!(gf.mrrd, 0.0);
        assert!(gf.n_np > 0.8);
        assert_eq!(gf.w_qrs, 0.0);
        assert_eq!(gf.t_or, 0.0);
    }

    #[test]
    fn one_wide_qrs_of_ten() {
        // Hand-built train: 10 complexes, one 150 ms wide, rest 80 ms.
        let fs = 300.0;
        let n = (10.5 * 800.0 * fs / 1000.0) as usize;
        let mut x = vec![0.0f64; n];
        let add = |x: &mut [f64], mu: f64, sigma: f64, amp: f64| {
            let lo = ((mu - 4.0 * sigma) * fs / 1000.0).max(0.0) as usize;
            let hi = (((mu + 4.0 * sigma) * fs / 1000.0) as usize).min(x.len() - 1);
            for i in lo..=hi {
                let t = i as f64 * 1000.0 / fs;
                let d = (t - mu) / sigma;
                x[i] += amp * (-0.5 * d * d).exp();
            }
        };
        for k in 0..10 {
            let c = 500.0 + k as f64 * 800.0;
            let width: f64 = if k == 4 { 150.0 } else { 80.0 };
            let sq = width / 14.0;
            add(&mut x, c - (width / 2.0 - 3.0 * sq), sq, -150.0);
            add(&mut x, c, width / 10.0, 1400.0);
            add(&mut x, c + (width / 2.0 - 3.0 * sq), sq, -300.0);
            add(&mut x, c + width / 2.0 + 150.0, 30.0, 450.0);
        }
        let samples: Vec<i16> = x.iter().map(|&v| v.round() as i16).collect();
        let r = Record::new("W", 300, 1000.0, samples).unwrap();
        let (_, gf) = full_features(&r);
        assert!(
            (gf.w_qrs - 0.1).abs() < 1e-9,
            "wQRS {} (expected exactly one wide beat of ten)",
            gf.w_qrs
        );
    }

    #[test]
    fn pnn_monotonicity_across_corpus() {
        for class in RecordClass::ALL {
            for idx in 0..3 {
                let spec = corpus_spec(class, idx, 77, DEFAULT_DURATION_S);
                let (r, _) = generate(&spec).unwrap();
                let (_, gf) = full_features(&r);
                assert!(gf.pnn10 >= gf.pnn50 && gf.pnn50 >= gf.pnn100);
                if gf.rr.is_finite() && gf.m_rr.is_finite() {
                    assert!(gf.m_rr <= gf.rr + 1e-9);
                }
            }
        }
    }

    #[test]
    fn scale_covariance_field_by_field() {
        let spec = corpus_spec(RecordClass::Normal, 0, 6, DEFAULT_DURATION_S);
        let (r, _) = generate(&spec).unwrap();
        let mut scaled = r.clone();
        for s in scaled.samples.iter_mut() {
            *s *= 2;
        }
        let (_, gf1) = full_features(&r);
        let (_, gf2) = full_features(&scaled);
        let (v1, v2) = (gf1.as_vec(), gf2.as_vec());
        for k in 0..GlobalFeatures::DIM {
            let (a, b) = (v1[k], v2[k]);
            let name = GlobalFeatures::NAMES[k];
            if a.is_nan() && b.is_nan() {
                continue;
            }
            let expect = match GlobalFeatures::KINDS[k] {
                FeatureKind::Amplitude => 2.0 * a,
                _ => a,
            };
            let tol = 1e-9 * expect.abs().max(1.0);
            assert!(
                (b - expect).abs() <= tol,
                "{name}: {a} scaled to {b}, expected {expect}"
            );
        }
    }

    #[test]
    fn beat_feature_rows() {
        let spec = corpus_spec(RecordClass::Afib, 2, 31, DEFAULT_DURATION_S);
        let (r, _) = generate(&spec).unwrap();
        let anns = detect_beats(&r).unwrap();
        let beats = delineate(&r, &anns);
        let itp = interpret(&r, &beats);
        let rows = beat_features(&r, &itp);
        assert_eq!(rows.len(), itp.beats.len());
        assert_eq!(beat_feature_names().len(), BEAT_FEATURE_DIM);
        let afib_onehot = 24 + 7 + HypothesisKind::Afib.index();
        let mut afib_beats = 0usize;
        for row in &rows {
            assert_eq!(row.len(), BEAT_FEATURE_DIM);
            assert!(row.iter().all(|v| v.is_finite()), "non-finite row {row:?}");
            let morph_sum: f64 = row[24..31].iter().sum();
            let rhythm_sum: f64 = row[31..40].iter().sum();
            assert_eq!(morph_sum, 1.0);
            assert_eq!(rhythm_sum, 1.0);
            if row[afib_onehot] == 1.0 {
                afib_beats += 1;
            }
        }
        assert!(afib_beats * 2 > rows.len(), "majority of beats in AFIB");

        // First-beat RR imputation: equals median of the remaining RRs.
        let fids: Vec<f64> = itp.beats.iter().map(|b| r.sample_to_ms(b.fiducial())).collect();
        let rrs: Vec<f64> = fids.windows(2).map(|w| w[1] - w[0]).collect();
        assert!((rows[0][0] - crate::stats::median(&rrs)).abs() < 1e-9);
    }
}
