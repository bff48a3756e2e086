//! Beat detection and tentative P/QRS/T delineation.
//!
//! The detector is a classic energy chain: 5-25 Hz linear-phase band-pass,
//! squared derivative, 150 ms moving-window integral, adaptive threshold
//! initialized from the 98th percentile of the first two seconds, with a
//! 200 ms refractory period. Squaring makes it polarity-insensitive by
//! construction. Everything downstream works on amplitude ratios, never on
//! absolute units, so detection and delineation commute with positive
//! rescaling of the signal.

use serde::{Deserialize, Serialize};

use crate::dsp;
use crate::error::{CoreError, Result};
use crate::record::Record;
use crate::stats::{median, quantile};

/// Refractory period between accepted beats.
pub const REFRACTORY_MS: f64 = 200.0;
const MIN_RECORD_MS: f64 = 2000.0;

/// One detected QRS fiducial.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BeatAnnotation {
    pub sample_index: usize,
    /// Detection confidence in [0, 1].
    pub confidence: f64,
}

/// Bounds and signed peak amplitude of one wave.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct WaveBounds {
    pub present: bool,
    pub onset: usize,
    pub peak: usize,
    pub offset: usize,
    /// Signed amplitude at the peak, relative to the local baseline.
    pub amplitude: f64,
}

impl WaveBounds {
    pub fn absent() -> WaveBounds {
        WaveBounds {
            present: false,
            onset: 0,
            peak: 0,
            offset: 0,
            amplitude: 0.0,
        }
    }

    pub fn duration_ms(&self, fs: u32) -> f64 {
        if !self.present {
            return 0.0;
        }
        (self.offset.saturating_sub(self.onset)) as f64 * 1000.0 / fs as f64
    }
}

/// One deflection inside the QRS complex.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct Subwave {
    /// Signed amplitude at the extremum.
    pub amplitude: f64,
    pub duration_ms: f64,
    /// Sample index of the extremum.
    pub turning_point: usize,
}

/// QRS morphology tag. Lower-case letters denote small deflections
/// (below half the dominant amplitude), upper-case dominant ones.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Morphology {
    /// qRs: small negative, dominant positive, small negative.
    QRs,
    /// QS: single dominant negative deflection.
    Qs,
    /// rSr': positive, negative, positive triphasic.
    Rsr,
    /// R: single dominant positive deflection.
    R,
    /// rS: small positive then dominant negative.
    RS,
    /// Rs: dominant positive then small negative.
    Rs,
    Other,
}

impl Morphology {
    pub const ALL: [Morphology; 7] = [
        Morphology::QRs,
        Morphology::Qs,
        Morphology::Rsr,
        Morphology::R,
        Morphology::RS,
        Morphology::Rs,
        Morphology::Other,
    ];

    pub fn token(self) -> &'static str {
        match self {
            Morphology::QRs => "qRs",
            Morphology::Qs => "QS",
            Morphology::Rsr => "rSr'",
            Morphology::R => "R",
            Morphology::RS => "rS",
            Morphology::Rs => "Rs",
            Morphology::Other => "other",
        }
    }

    pub fn index(self) -> usize {
        Morphology::ALL.iter().position(|&m| m == self).unwrap()
    }
}

/// One delineated heartbeat.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BeatObservation {
    pub qrs: WaveBounds,
    pub p: WaveBounds,
    pub t: WaveBounds,
    /// Up to three alternating-sign deflections, left to right.
    pub subwaves: Vec<Subwave>,
    pub morphology: Morphology,
    /// Net signed area of the QRS window (single-lead stand-in for the axis).
    pub axis_proxy: f64,
    /// Deviation 60 ms after the QRS offset relative to the PR baseline.
    pub st_deviation: f64,
    /// Signal-quality score in [0, 1].
    pub quality: f64,
    /// P-likeness score of the P search window, in [0, 1].
    pub p_score: f64,
    /// The P search window used (sample range).
    pub p_window: (usize, usize),
}

impl BeatObservation {
    /// QRS fiducial sample index.
    pub fn fiducial(&self) -> usize {
        self.qrs.peak
    }
}

/// Precomputed per-record signal views shared by detection, delineation and
/// the interpreter's windowed re-detection.
pub struct SignalEnv {
    /// 5-25 Hz band-passed signal, delay-compensated.
    pub bp: Vec<f64>,
    /// Smoothed absolute band-pass envelope (24 ms moving average).
    pub env: Vec<f64>,
    /// Moving-window integral of the squared derivative (150 ms).
    pub mwi: Vec<f64>,
    /// Running-median baseline (200 ms window).
    pub baseline: Vec<f64>,
    /// Signal minus baseline.
    pub detrended: Vec<f64>,
    /// Smoothed absolute detrended signal (12 ms moving average); sharp
    /// around the QRS, used for wave-boundary walks.
    pub denv: Vec<f64>,
}

/// Computes the shared signal views for a record.
pub fn analyze(r: &Record) -> SignalEnv {
    let fs = r.fs as f64;
    let x = r.samples_f64();
    let taps = dsp::bandpass_taps(fs, 5.0, 25.0, odd(r.samples_per_ms(350.0)));
    let bp = dsp::filtfilt_aligned(&x, &taps);
    let env = dsp::moving_average(&abs_vec(&bp), r.samples_per_ms(24.0).max(1));
    let d = dsp::derivative(&bp);
    let sq: Vec<f64> = d.iter().map(|v| v * v).collect();
    let mwi = dsp::moving_average(&sq, r.samples_per_ms(150.0).max(1));
    let baseline = dsp::median_filter(&x, odd(r.samples_per_ms(200.0)));
    let detrended: Vec<f64> = x.iter().zip(&baseline).map(|(a, b)| a - b).collect();
    let denv = dsp::moving_average(&abs_vec(&detrended), r.samples_per_ms(12.0).max(1));
    SignalEnv {
        bp,
        env,
        mwi,
        baseline,
        detrended,
        denv,
    }
}

fn odd(n: usize) -> usize {
    if n % 2 == 0 {
        n + 1
    } else {
        n.max(1)
    }
}

fn abs_vec(x: &[f64]) -> Vec<f64> {
    x.iter().map(|v| v.abs()).collect()
}

/// Detects QRS fiducials. Annotations are strictly increasing with no two
/// inside the refractory window.
pub fn detect_beats(r: &Record) -> Result<Vec<BeatAnnotation>> {
    let env = analyze(r);
    detect_beats_with(r, &env)
}

pub fn detect_beats_with(r: &Record, sig: &SignalEnv) -> Result<Vec<BeatAnnotation>> {
    if r.duration_ms() < MIN_RECORD_MS {
        return Err(CoreError::TooShort {
            actual_ms: r.duration_ms(),
            min_ms: MIN_RECORD_MS,
        });
    }
    let n = r.samples.len();
    let refractory = r.samples_per_ms(REFRACTORY_MS);
    let head = &sig.mwi[..r.samples_per_ms(2000.0).min(n)];
    let mut spk = quantile(head, 0.98);
    let mut npk = quantile(head, 0.50);
    let mut thr = npk + 0.25 * (spk - npk);

    let mut accepted: Vec<(usize, f64)> = Vec::new(); // (mwi peak index, confidence)
    let mut i = 1usize;
    while i + 1 < n {
        if sig.mwi[i] > sig.mwi[i - 1] && sig.mwi[i] >= sig.mwi[i + 1] {
            let peak = sig.mwi[i];
            let in_refractory = accepted
                .last()
                .is_some_and(|&(last, _)| i - last < refractory);
            if !in_refractory {
                if peak > thr && peak > 0.0 {
                    let conf = if thr > 0.0 {
                        (0.5 * peak / thr).clamp(0.0, 1.0)
                    } else {
                        1.0
                    };
                    accepted.push((i, conf));
                    spk = 0.125 * peak + 0.875 * spk;
                } else {
                    npk = 0.125 * peak + 0.875 * npk;
                }
                thr = npk + 0.25 * (spk - npk);
            }
        }
        i += 1;
    }

    // Refine each fiducial to the strongest band-pass deflection nearby.
    let half = r.samples_per_ms(120.0);
    let mut refined: Vec<BeatAnnotation> = Vec::new();
    for (idx, conf) in accepted {
        let lo = idx.saturating_sub(half);
        let hi = (idx + half).min(n - 1);
        let best = (lo..=hi)
            .max_by(|&a, &b| sig.bp[a].abs().partial_cmp(&sig.bp[b].abs()).unwrap())
            .unwrap_or(idx);
        refined.push(BeatAnnotation {
            sample_index: best,
            confidence: conf,
        });
    }
    refined.sort_by_key(|a| a.sample_index);

    // Deduplicate: refinement may map two integrator peaks onto one complex.
    let mut out: Vec<BeatAnnotation> = Vec::new();
    for ann in refined {
        match out.last_mut() {
            Some(last) if ann.sample_index - last.sample_index < refractory => {
                if sig.env[ann.sample_index] > sig.env[last.sample_index] {
                    *last = ann;
                }
            }
            _ => out.push(ann),
        }
    }
    Ok(out)
}

/// Windowed re-detection at a reduced threshold, used by the interpreter to
/// look for beats the main pass missed. `reference_mwi` is the typical
/// integrator energy of confirmed beats; a candidate must reach
/// `scale * reference_mwi` to qualify.
pub fn detect_in_window(
    r: &Record,
    sig: &SignalEnv,
    lo: usize,
    hi: usize,
    scale: f64,
    reference_mwi: f64,
) -> Option<BeatAnnotation> {
    let n = r.samples.len();
    if lo >= hi || hi > n {
        return None;
    }
    let peak_idx = (lo..hi).max_by(|&a, &b| sig.mwi[a].partial_cmp(&sig.mwi[b]).unwrap())?;
    if sig.mwi[peak_idx] < scale * reference_mwi || sig.mwi[peak_idx] <= 0.0 {
        return None;
    }
    let half = r.samples_per_ms(100.0);
    let slo = peak_idx.saturating_sub(half).max(lo);
    let shi = (peak_idx + half).min(hi - 1);
    let best = (slo..=shi)
        .max_by(|&a, &b| sig.bp[a].abs().partial_cmp(&sig.bp[b].abs()).unwrap())?;
    Some(BeatAnnotation {
        sample_index: best,
        confidence: (sig.mwi[peak_idx] / reference_mwi).clamp(0.0, 1.0),
    })
}

// ---------------------------------------------------------------------------
// Delineation
// ---------------------------------------------------------------------------

/// P search window: 250 ms ending 40 ms before the QRS onset.
const P_WINDOW_MS: f64 = 250.0;
const P_GAP_MS: f64 = 40.0;
/// T search window starts 60 ms after the QRS offset.
const T_GAP_MS: f64 = 60.0;
const T_MAX_MS: f64 = 450.0;

/// Delineates one beat per annotation. Absent waves are flagged, never an
/// error.
pub fn delineate(r: &Record, anns: &[BeatAnnotation]) -> Vec<BeatObservation> {
    let sig = analyze(r);
    delineate_with(r, &sig, anns)
}

pub fn delineate_with(r: &Record, sig: &SignalEnv, anns: &[BeatAnnotation]) -> Vec<BeatObservation> {
    let n = r.samples.len();
    if anns.is_empty() {
        return Vec::new();
    }
    debug_assert!(anns.windows(2).all(|w| w[0].sample_index < w[1].sample_index));

    // Noise floor on the envelope keeps QRS boundary walks off the baseline.
    let env_floor = median(&sig.denv);

    let mut beats: Vec<BeatObservation> = Vec::with_capacity(anns.len());
    for (k, ann) in anns.iter().enumerate() {
        let fid = ann.sample_index.min(n - 1);
        let prev_fid = if k > 0 { Some(anns[k - 1].sample_index) } else { None };
        let next_fid = if k + 1 < anns.len() {
            Some(anns[k + 1].sample_index)
        } else {
            None
        };
        beats.push(delineate_one(r, sig, fid, prev_fid, next_fid, env_floor));
    }

    // True P waves keep a consistent PR interval across beats; candidates at
    // scattered offsets are atrial oscillation or noise, not P waves.
    let prs: Vec<f64> = beats
        .iter()
        .filter(|b| b.p.present)
        .map(|b| (b.qrs.onset.saturating_sub(b.p.peak)) as f64 * 1000.0 / r.fs as f64)
        .collect();
    if prs.len() >= 4 {
        let med = median(&prs);
        let devs: Vec<f64> = prs.iter().map(|v| (v - med).abs()).collect();
        if median(&devs) > 25.0 {
            for b in beats.iter_mut() {
                b.p = WaveBounds::absent();
            }
        }
    }

    score_quality(r, sig, &mut beats);
    beats
}

fn delineate_one(
    r: &Record,
    sig: &SignalEnv,
    fid: usize,
    prev_fid: Option<usize>,
    next_fid: Option<usize>,
    env_floor: f64,
) -> BeatObservation {
    let n = r.samples.len();
    let fs = r.fs;
    let ms = |v: f64| r.samples_per_ms(v);

    // -- QRS bounds: walk the detrended envelope away from the fiducial.
    let guard = ms(40.0);
    let peak_env = (fid.saturating_sub(guard)..=(fid + guard).min(n - 1))
        .map(|i| sig.denv[i])
        .fold(0.0f64, f64::max);
    let thr = (0.035 * peak_env).max((2.2 * env_floor).min(0.4 * peak_env));
    let reach = ms(130.0);
    let mut onset = fid.saturating_sub(reach);
    for i in (fid.saturating_sub(reach)..fid).rev() {
        if sig.denv[i] < thr {
            onset = i;
            break;
        }
    }
    let mut offset = (fid + reach).min(n - 1);
    for i in fid..=(fid + reach).min(n - 1) {
        if i > fid && sig.denv[i] < thr {
            offset = i;
            break;
        }
    }
    // Never overlap neighbor fiducials.
    if let Some(p) = prev_fid {
        onset = onset.max(p + ms(60.0).min(fid.saturating_sub(p) / 2));
    }
    if let Some(nx) = next_fid {
        offset = offset.min(nx - ms(60.0).min((nx - fid) / 2));
    }
    let onset = onset.min(fid);
    let offset = offset.max(fid);

    // Dominant signed amplitude inside the QRS.
    let qrs_peak = (onset..=offset)
        .max_by(|&a, &b| {
            sig.detrended[a]
                .abs()
                .partial_cmp(&sig.detrended[b].abs())
                .unwrap()
        })
        .unwrap_or(fid);
    let qrs_amp_signed = sig.detrended[qrs_peak];
    let qrs_amp = qrs_amp_signed.abs().max(1e-12);

    let qrs = WaveBounds {
        present: true,
        onset,
        peak: fid,
        offset,
        amplitude: qrs_amp_signed,
    };

    // -- Subwaves inside the QRS.
    let subwaves = extract_subwaves(&sig.detrended[onset..=offset], onset, fs);
    let morphology = classify_morphology(&subwaves);

    // -- Axis proxy: net signed area of the QRS window.
    let axis_proxy: f64 = sig.detrended[onset..=offset].iter().sum();

    // -- P wave.
    let p_hi = onset.saturating_sub(ms(P_GAP_MS));
    let mut p_lo = p_hi.saturating_sub(ms(P_WINDOW_MS));
    if let Some(p) = prev_fid {
        p_lo = p_lo.max(p + ms(80.0));
    }
    let (p, p_score) = delineate_p(r, sig, p_lo, p_hi, onset, qrs_amp);

    // -- T wave.
    let t_lo = (offset + ms(T_GAP_MS)).min(n - 1);
    let mut t_hi = (offset + ms(T_MAX_MS)).min(n - 1);
    if let Some(nx) = next_fid {
        // Stop well before the next complex; its own onset is unknown yet.
        t_hi = t_hi.min(nx.saturating_sub(ms(80.0 + 60.0)));
    }
    let t = delineate_t(r, sig, t_lo, t_hi, qrs_amp);

    // -- ST deviation: 60 ms after the QRS offset vs the PR baseline mean.
    let st_at = (offset + ms(T_GAP_MS)).min(n - 1);
    let st_lo = st_at.saturating_sub(ms(10.0));
    let st_hi = (st_at + ms(10.0)).min(n - 1);
    let pr_lo = onset.saturating_sub(ms(50.0));
    let pr_hi = onset.saturating_sub(ms(10.0)).max(pr_lo);
    let st_level = mean_range(&sig.detrended, st_lo, st_hi);
    let pr_level = mean_range(&sig.detrended, pr_lo, pr_hi);
    let st_deviation = st_level - pr_level;

    BeatObservation {
        qrs,
        p,
        t,
        subwaves,
        morphology,
        axis_proxy,
        st_deviation,
        quality: 0.0, // filled by score_quality
        p_score,
        p_window: (p_lo, p_hi),
    }
}

fn mean_range(x: &[f64], lo: usize, hi: usize) -> f64 {
    if hi <= lo || lo >= x.len() {
        return 0.0;
    }
    let hi = hi.min(x.len() - 1);
    let s: f64 = x[lo..=hi].iter().sum();
    s / (hi - lo + 1) as f64
}

/// Finds up to three alternating-sign deflections inside the QRS window.
fn extract_subwaves(y: &[f64], offset0: usize, fs: u32) -> Vec<Subwave> {
    if y.len() < 3 {
        return Vec::new();
    }
    let maxabs = y.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if maxabs <= 0.0 {
        return Vec::new();
    }
    let min_amp = 0.12 * maxabs;

    // Local extrema above the significance floor.
    let mut raw: Vec<(usize, f64)> = Vec::new();
    for i in 1..y.len() - 1 {
        let is_max = y[i] >= y[i - 1] && y[i] > y[i + 1] && y[i] > min_amp;
        let is_min = y[i] <= y[i - 1] && y[i] < y[i + 1] && y[i] < -min_amp;
        if is_max || is_min {
            raw.push((i, y[i]));
        }
    }
    // Enforce sign alternation, keeping the larger of same-sign neighbors.
    let mut alt: Vec<(usize, f64)> = Vec::new();
    for (i, v) in raw {
        match alt.last_mut() {
            Some((_, lv)) if lv.signum() == v.signum() => {
                if v.abs() > lv.abs() {
                    *alt.last_mut().unwrap() = (i, v);
                }
            }
            _ => alt.push((i, v)),
        }
    }
    // Keep at most three, always including the dominant deflection.
    if alt.len() > 3 {
        let dom = alt
            .iter()
            .enumerate()
            .max_by(|a, b| a.1 .1.abs().partial_cmp(&b.1 .1.abs()).unwrap())
            .unwrap()
            .0;
        let start = dom.saturating_sub(1).min(alt.len() - 3);
        alt = alt[start..start + 3].to_vec();
    }

    // Duration from surrounding zero crossings.
    let mut out = Vec::with_capacity(alt.len());
    for &(i, v) in &alt {
        let mut lo = 0usize;
        for j in (0..i).rev() {
            if y[j].signum() != v.signum() || y[j] == 0.0 {
                lo = j;
                break;
            }
        }
        let mut hi = y.len() - 1;
        for (j, yj) in y.iter().enumerate().skip(i + 1) {
            if yj.signum() != v.signum() || *yj == 0.0 {
                hi = j;
                break;
            }
        }
        out.push(Subwave {
            amplitude: v,
            duration_ms: (hi - lo) as f64 * 1000.0 / fs as f64,
            turning_point: offset0 + i,
        });
    }
    out
}

fn classify_morphology(subwaves: &[Subwave]) -> Morphology {
    let amps: Vec<f64> = subwaves.iter().map(|s| s.amplitude).collect();
    let maxabs = amps.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if maxabs <= 0.0 {
        return Morphology::Other;
    }
    let big = |a: f64| a.abs() >= 0.5 * maxabs;
    match amps.as_slice() {
        [a] if *a > 0.0 => Morphology::R,
        [a] if *a < 0.0 => Morphology::Qs,
        [a, b] if *a > 0.0 && *b < 0.0 && big(*a) && !big(*b) => Morphology::Rs,
        [a, b] if *a > 0.0 && *b < 0.0 && !big(*a) && big(*b) => Morphology::RS,
        [a, b, c] if *a < 0.0 && *b > 0.0 && *c < 0.0 && big(*b) && !big(*a) && !big(*c) => {
            Morphology::QRs
        }
        [a, b, c] if *a > 0.0 && *b < 0.0 && *c > 0.0 => Morphology::Rsr,
        _ => Morphology::Other,
    }
}

fn delineate_p(
    r: &Record,
    sig: &SignalEnv,
    lo: usize,
    hi: usize,
    qrs_onset: usize,
    qrs_amp: f64,
) -> (WaveBounds, f64) {
    let min_len = r.samples_per_ms(70.0);
    if hi <= lo || hi - lo < min_len {
        return (WaveBounds::absent(), 0.0);
    }
    let win = &sig.detrended[lo..hi];
    let (score, center_rel, sigma_ms) = p_score_window(win, r.fs);
    let peak = lo + center_rel;
    let ptp = win.iter().cloned().fold(f64::MIN, f64::max)
        - win.iter().cloned().fold(f64::MAX, f64::min);
    // A P wave is a single isolated bump. Several comparable extrema in the
    // window, or power concentrated in the fibrillatory band, mean periodic
    // activity (f waves, noise) that can still correlate well with a lone
    // Gaussian template locally.
    let periodic = strong_extrema_count(win, r.fs) >= 3 || fibrillatory_band_dominates(win, r.fs);
    let present = score >= 0.60 && ptp >= 0.04 * qrs_amp && !periodic;
    if !present {
        return (WaveBounds::absent(), score);
    }
    let half_span = r.samples_per_ms(3.0 * sigma_ms);
    let onset = peak.saturating_sub(half_span).max(lo);
    let offset = (peak + half_span).min(qrs_onset);
    (
        WaveBounds {
            present: true,
            onset,
            peak,
            offset: offset.max(peak),
            amplitude: sig.detrended[peak.min(sig.detrended.len() - 1)],
        },
        score,
    )
}

/// Number of local extrema reaching 35% of the window's dominant deflection.
fn strong_extrema_count(win: &[f64], fs: u32) -> usize {
    let w = (fs as f64 * 0.010).round().max(1.0) as usize;
    let smooth = dsp::moving_average(win, w);
    let maxabs = smooth.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if maxabs <= 0.0 {
        return 0;
    }
    let thr = 0.35 * maxabs;
    let mut count = 0usize;
    for i in 1..smooth.len().saturating_sub(1) {
        let v = smooth[i];
        if v.abs() < thr {
            continue;
        }
        if (v >= smooth[i - 1] && v > smooth[i + 1]) || (v <= smooth[i - 1] && v < smooth[i + 1]) {
            count += 1;
        }
    }
    count
}

/// True when the window's spectrum concentrates in the fibrillatory band
/// (5.5-10.5 Hz), the signature of atrial fibrillation f waves.
fn fibrillatory_band_dominates(win: &[f64], fs: u32) -> bool {
    if win.len() < 32 {
        return false;
    }
    let (freqs, power) = dsp::periodogram(win, fs as f64, 256);
    let mut total = 0.0;
    let mut fib = 0.0;
    for (f, p) in freqs.iter().zip(&power) {
        if *f >= 0.5 && *f <= 20.0 {
            total += p;
            if *f >= 5.5 && *f <= 10.5 {
                fib += p;
            }
        }
    }
    total > 0.0 && fib / total >= 0.5
}

fn delineate_t(r: &Record, sig: &SignalEnv, lo: usize, hi: usize, qrs_amp: f64) -> WaveBounds {
    let n = sig.detrended.len();
    let min_len = r.samples_per_ms(60.0);
    if hi <= lo || hi >= n || hi - lo < min_len {
        return WaveBounds::absent();
    }
    let smooth = dsp::moving_average(&sig.detrended[lo..=hi], r.samples_per_ms(30.0).max(1));
    let rel_peak = smooth
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.abs().partial_cmp(&b.1.abs()).unwrap())
        .map(|(i, _)| i)
        .unwrap_or(0);
    let amp = smooth[rel_peak];
    if amp.abs() < 0.05 * qrs_amp {
        return WaveBounds::absent();
    }
    // Bounds at the 25% crossings of the smoothed bump.
    let thr = 0.25 * amp.abs();
    let mut on_rel = 0usize;
    for i in (0..rel_peak).rev() {
        if smooth[i].abs() < thr || smooth[i].signum() != amp.signum() {
            on_rel = i;
            break;
        }
    }
    let mut off_rel = smooth.len() - 1;
    for (i, v) in smooth.iter().enumerate().skip(rel_peak + 1) {
        if v.abs() < thr || v.signum() != amp.signum() {
            off_rel = i;
            break;
        }
    }
    WaveBounds {
        present: true,
        onset: lo + on_rel,
        peak: lo + rel_peak,
        offset: lo + off_rel,
        amplitude: sig.detrended[lo + rel_peak],
    }
}

// ---------------------------------------------------------------------------
// P-likeness scoring
// ---------------------------------------------------------------------------

/// Builds one asymmetric-Gaussian P template (fall 1.35x slower than rise).
fn p_template(fs: u32, sigma_ms: f64) -> Vec<f64> {
    let rise = sigma_ms * fs as f64 / 1000.0;
    let fall = 1.35 * rise;
    let left = (3.0 * rise).ceil() as isize;
    let right = (3.0 * fall).ceil() as isize;
    let mut t = Vec::with_capacity((left + right + 1) as usize);
    for i in -left..=right {
        let s = if i < 0 { rise } else { fall };
        let d = i as f64 / s;
        t.push((-0.5 * d * d).exp());
    }
    t
}

const P_TEMPLATE_SIGMAS_MS: [f64; 3] = [12.0, 16.0, 22.0];

/// Maximum |normalized cross-correlation| of a window against the P template
/// bank. Polarity-insensitive so that lead inversion does not change P
/// counts. Returns (score, best center offset, best sigma).
fn p_score_window(win: &[f64], fs: u32) -> (f64, usize, f64) {
    let n = win.len();
    let mut best = (0.0f64, n / 2, P_TEMPLATE_SIGMAS_MS[1]);
    for &s in &P_TEMPLATE_SIGMAS_MS {
        let tpl = p_template(fs, s);
        let m = tpl.len();
        if m >= n {
            continue;
        }
        let t_mean = tpl.iter().sum::<f64>() / m as f64;
        let t_dev: Vec<f64> = tpl.iter().map(|v| v - t_mean).collect();
        let t_norm = t_dev.iter().map(|v| v * v).sum::<f64>().sqrt();
        if t_norm <= 0.0 {
            continue;
        }
        for off in 0..=(n - m) {
            let seg = &win[off..off + m];
            let s_mean = seg.iter().sum::<f64>() / m as f64;
            let mut dot = 0.0;
            let mut s_norm2 = 0.0;
            for (a, b) in seg.iter().zip(&t_dev) {
                let d = a - s_mean;
                dot += d * b;
                s_norm2 += d * d;
            }
            if s_norm2 <= 0.0 {
                continue;
            }
            let ncc = (dot / (s_norm2.sqrt() * t_norm)).abs();
            if ncc > best.0 {
                let rise = s * fs as f64 / 1000.0;
                let center = off + (3.0 * rise).ceil() as usize;
                best = (ncc.min(1.0), center.min(n - 1), s);
            }
        }
    }
    best
}

/// How much a window of the record looks like a P wave, in [0, 1].
/// A flat window scores exactly 0.
pub fn p_wave_score(r: &Record, window: std::ops::Range<usize>) -> Result<f64> {
    if window.is_empty() {
        return Err(CoreError::EmptyInput("p_wave_score window"));
    }
    if window.end > r.samples.len() {
        return Err(CoreError::EmptyInput("p_wave_score window out of bounds"));
    }
    // Detrend locally so boundary effects of the full-record baseline do not
    // depend on context outside the window.
    let x: Vec<f64> = r.samples[window.clone()].iter().map(|&v| v as f64).collect();
    let base = dsp::median_filter(&x, odd(r.samples_per_ms(200.0)));
    let det: Vec<f64> = x.iter().zip(&base).map(|(a, b)| a - b).collect();
    Ok(p_score_window(&det, r.fs).0)
}

// ---------------------------------------------------------------------------
// Quality
// ---------------------------------------------------------------------------

/// Assigns each beat a quality score from the local band-pass profile: the
/// peak-to-peak envelope relative to the record's beats, blended with the
/// correlation against the pointwise-median beat template.
fn score_quality(r: &Record, sig: &SignalEnv, beats: &mut [BeatObservation]) {
    let n = sig.bp.len();
    let half = r.samples_per_ms(60.0);
    let len = 2 * half + 1;

    let mut windows: Vec<Vec<f64>> = Vec::with_capacity(beats.len());
    for b in beats.iter() {
        let fid = b.fiducial();
        let mut w = vec![0.0f64; len];
        for (j, w_j) in w.iter_mut().enumerate() {
            let idx = fid as isize - half as isize + j as isize;
            if idx >= 0 && (idx as usize) < n {
                *w_j = sig.bp[idx as usize];
            }
        }
        windows.push(w);
    }
    let ptps: Vec<f64> = windows
        .iter()
        .map(|w| w.iter().cloned().fold(f64::MIN, f64::max) - w.iter().cloned().fold(f64::MAX, f64::min))
        .collect();
    let ptp_med = median(&ptps);
    if !(ptp_med > 0.0) {
        for b in beats.iter_mut() {
            b.quality = 0.0;
        }
        return;
    }

    // Pointwise median template.
    let mut template = vec![0.0f64; len];
    let mut col = vec![0.0f64; windows.len()];
    for (j, t_j) in template.iter_mut().enumerate() {
        for (k, w) in windows.iter().enumerate() {
            col[k] = w[j];
        }
        *t_j = median(&col);
    }

    let lag = r.samples_per_ms(27.0) as isize;
    for (k, b) in beats.iter_mut().enumerate() {
        let amp_term = (ptps[k] / ptp_med).min(1.0);
        let corr = max_corr_small_lag(&windows[k], &template, lag).max(0.0);
        b.quality = (0.55 * amp_term + 0.45 * corr).clamp(0.0, 1.0);
    }
}

/// Max Pearson correlation over lags in [-max_lag, max_lag].
fn max_corr_small_lag(a: &[f64], b: &[f64], max_lag: isize) -> f64 {
    let n = a.len() as isize;
    let mut best = -1.0f64;
    for lag in -max_lag..=max_lag {
        let lo = lag.max(0);
        let hi = (n + lag.min(0)).max(lo);
        let m = (hi - lo) as usize;
        if m < 8 {
            continue;
        }
        let (mut sa, mut sb) = (0.0, 0.0);
        for i in lo..hi {
            sa += a[i as usize];
            sb += b[(i - lag) as usize];
        }
        let (ma, mb) = (sa / m as f64, sb / m as f64);
        let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
        for i in lo..hi {
            let da = a[i as usize] - ma;
            let db = b[(i - lag) as usize] - mb;
            dot += da * db;
            na += da * da;
            nb += db * db;
        }
        if na > 0.0 && nb > 0.0 {
            best = best.max(dot / (na * nb).sqrt());
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::record::RecordClass;
    use crate::synth::{corpus_spec, generate, GenSpec, DEFAULT_DURATION_S};

    fn spec_30s(rate: f64, seed: u64) -> GenSpec {
        let mut s = GenSpec::normal(rate, seed);
        s.duration_s = 30.0;
        s
    }

    #[test]
    fn detects_beats_within_20ms_of_truth() {
        let (r, truth) = generate(&spec_30s(75.0, 21)).unwrap();
        let anns = detect_beats(&r).unwrap();
        let expected = truth.beats.len();
        assert!(
            (anns.len() as isize - expected as isize).abs() <= 1,
            "got {} beats, truth {}",
            anns.len(),
            expected
        );
        let tol = r.samples_per_ms(20.0);
        let mut matched = 0;
        for tb in &truth.beats {
            if anns
                .iter()
                .any(|a| (a.sample_index as isize - tb.fiducial as isize).unsigned_abs() <= tol)
            {
                matched += 1;
            }
        }
        assert!(
            matched >= expected - 1,
            "only {matched}/{expected} fiducials within 20 ms"
        );
    }

    #[test]
    fn all_zero_signal_yields_no_beats() {
        let r = Record::new("Z", 300, 1000.0, vec![0i16; 3000]).unwrap();
        assert!(detect_beats(&r).unwrap().is_empty());
    }

    #[test]
    fn too_short_record_errors() {
        let r = Record::new("Z", 300, 1000.0, vec![0i16; 300]).unwrap();
        assert!(matches!(detect_beats(&r), Err(CoreError::TooShort { .. })));
    }

    #[test]
    fn polarity_insensitive_beat_count() {
        for seed in [3u64, 4, 5, 6] {
            let (r, _) = generate(&spec_30s(80.0, seed)).unwrap();
            let neg = r.negated();
            let a = detect_beats(&r).unwrap();
            let b = detect_beats(&neg).unwrap();
            assert_eq!(a.len(), b.len(), "seed {seed}");
        }
    }

    #[test]
    fn annotations_strictly_increasing_and_refractory() {
        for class in RecordClass::ALL {
            for idx in 0..4 {
                let spec = corpus_spec(class, idx, 13, DEFAULT_DURATION_S);
                let (r, _) = generate(&spec).unwrap();
                let anns = detect_beats(&r).unwrap();
                let refractory = r.samples_per_ms(REFRACTORY_MS);
                for w in anns.windows(2) {
                    assert!(w[1].sample_index - w[0].sample_index >= refractory);
                }
            }
        }
    }

    #[test]
    fn qrs_duration_within_15ms() {
        let mut spec = GenSpec::normal(70.0, 31);
        spec.noise_snr_db = 40.0;
        let (r, truth) = generate(&spec).unwrap();
        let anns = detect_beats(&r).unwrap();
        let beats = delineate(&r, &anns);
        let mut errs: Vec<f64> = Vec::new();
        for b in &beats {
            // Match to the closest truth beat.
            let tb = truth
                .beats
                .iter()
                .min_by_key(|t| (t.fiducial as isize - b.fiducial() as isize).abs())
                .unwrap();
            let measured = b.qrs.duration_ms(r.fs);
            let actual = (tb.qrs.offset - tb.qrs.onset) as f64 * 1000.0 / r.fs as f64;
            errs.push((measured - actual).abs());
        }
        let med = crate::stats::median(&errs);
        assert!(med <= 15.0, "median QRS duration error {med} ms");
    }

    #[test]
    fn absent_p_is_flagged() {
        let mut spec = GenSpec::normal(75.0, 41);
        spec.p_present = false;
        let (r, _) = generate(&spec).unwrap();
        let anns = detect_beats(&r).unwrap();
        let beats = delineate(&r, &anns);
        let with_p = beats.iter().filter(|b| b.p.present).count();
        assert!(
            with_p * 3 <= beats.len(),
            "{} of {} beats claim a P wave",
            with_p,
            beats.len()
        );

        let spec = GenSpec::normal(75.0, 41);
        let (r, _) = generate(&spec).unwrap();
        let anns = detect_beats(&r).unwrap();
        let beats = delineate(&r, &anns);
        let with_p = beats.iter().filter(|b| b.p.present).count();
        assert!(
            with_p * 10 >= beats.len() * 8,
            "only {} of {} beats found their P wave",
            with_p,
            beats.len()
        );
    }

    #[test]
    fn monophasic_positive_qrs_is_r_with_positive_axis() {
        // Hand-built record: a train of single positive Gaussians.
        let fs = 300u32;
        let n = 3000usize;
        let mut x = vec![0.0f64; n];
        let mut centers = Vec::new();
        let mut c = 250.0;
        while c < n as f64 - 250.0 {
            centers.push(c);
            c += 240.0; // 800 ms
        }
        for &c in &centers {
            for i in 0..n {
                let d = (i as f64 - c) / 7.0;
                x[i] += 1200.0 * (-0.5 * d * d).exp();
            }
        }
        let samples: Vec<i16> = x.iter().map(|&v| v.round() as i16).collect();
        let r = Record::new("M", fs, 1000.0, samples).unwrap();
        let anns = detect_beats(&r).unwrap();
        assert_eq!(anns.len(), centers.len());
        let beats = delineate(&r, &anns);
        for b in &beats {
            assert_eq!(b.morphology, Morphology::R, "subwaves {:?}", b.subwaves);
            assert!(b.axis_proxy > 0.0);
        }
    }

    #[test]
    fn p_wave_score_baseline_and_template() {
        // Flat window scores exactly 0.
        let r = Record::new("F", 300, 1000.0, vec![100i16; 3000]).unwrap();
        assert_eq!(p_wave_score(&r, 100..400).unwrap(), 0.0);
        assert!(p_wave_score(&r, 0..0).is_err());

        // A synthetic P bump scores >= 0.9; white noise scores lower.
        let fs = 300u32;
        let n = 600usize;
        let mut x = vec![0.0f64; n];
        for i in 0..n {
            let d = (i as f64 - 300.0) / 4.8; // sigma = 16 ms at 300 Hz
            x[i] += 400.0 * (-0.5 * d * d).exp();
        }
        let samples: Vec<i16> = x.iter().map(|&v| v.round() as i16).collect();
        let rp = Record::new("P", fs, 1000.0, samples).unwrap();
        let tpl_score = p_wave_score(&rp, 150..450).unwrap();
        assert!(tpl_score >= 0.9, "template self-score {tpl_score}");

        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(5);
        let mut worse = 0usize;
        let trials = 20;
        for _ in 0..trials {
            let noise: Vec<i16> = (0..n).map(|_| rng.gen_range(-400..400) as i16).collect();
            let rn = Record::new("N", fs, 1000.0, noise).unwrap();
            if p_wave_score(&rn, 150..450).unwrap() < tpl_score {
                worse += 1;
            }
        }
        assert!(worse >= trials - 1, "{worse}/{trials} noise windows below template score");
    }

    #[test]
    fn delineation_is_deterministic() {
        let (r, _) = generate(&GenSpec::normal(75.0, 77)).unwrap();
        let a1 = detect_beats(&r).unwrap();
        let a2 = detect_beats(&r).unwrap();
        assert_eq!(a1, a2);
        let b1 = delineate(&r, &a1);
        let b2 = delineate(&r, &a2);
        assert_eq!(b1.len(), b2.len());
        for (x, y) in b1.iter().zip(&b2) {
            assert_eq!(x.qrs.onset, y.qrs.onset);
            assert_eq!(x.quality, y.quality);
        }
    }

    #[test]
    fn wave_bounds_do_not_overlap_next_beat() {
        for idx in 0..4 {
            let spec = corpus_spec(RecordClass::Other, idx, 23, DEFAULT_DURATION_S);
            let (r, _) = generate(&spec).unwrap();
            let anns = detect_beats(&r).unwrap();
            let beats = delineate(&r, &anns);
            for k in 0..beats.len().saturating_sub(1) {
                let next_onset = beats[k + 1].qrs.onset;
                assert!(beats[k].qrs.offset <= next_onset);
                if beats[k].t.present {
                    assert!(beats[k].t.offset <= next_onset + 1);
                }
                if beats[k].p.present {
                    assert!(beats[k].p.offset <= beats[k].qrs.onset);
                }
            }
        }
    }
}
