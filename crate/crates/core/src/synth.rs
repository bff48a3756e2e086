//! Deterministic synthetic single-lead ECG generator with analytic ground
//! truth.
//!
//! Beats are rendered as Gaussian-mixture PQRST complexes, so every wave
//! boundary is known in closed form (component mean ± 3 sigma). Rhythm
//! schedules cover the grammar kinds the interpreter understands, and the
//! four-class corpus spans the anomaly subtypes that drive the Other class:
//! tachycardia, bradycardia, wide QRS, long PR, extrasystole and bigeminy.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::features::rr_irregularity;
use crate::interpret::HypothesisKind;
use crate::record::{Record, RecordClass};
use crate::rng::mix_seed;

/// Default corpus sampling rate (the handheld device rate).
pub const DEFAULT_FS: u32 = 300;
/// Default corpus record duration in seconds.
pub const DEFAULT_DURATION_S: f64 = 15.0;
/// Nominal R peak amplitude in raw analog units.
const R_AMP: f64 = 1500.0;

/// Parameters for one synthetic record.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GenSpec {
    pub class: RecordClass,
    pub rhythm: HypothesisKind,
    pub rate_bpm: f64,
    pub rr_jitter_pct: f64,
    pub qrs_width_ms: f64,
    pub pr_ms: f64,
    pub p_present: bool,
    pub noise_snr_db: f64,
    pub invert: bool,
    pub duration_s: f64,
    pub seed: u64,
}

impl GenSpec {
    /// A clean normal-rhythm spec; adjust fields as needed.
    pub fn normal(rate_bpm: f64, seed: u64) -> GenSpec {
        GenSpec {
            class: RecordClass::Normal,
            rhythm: HypothesisKind::Normal,
            rate_bpm,
            rr_jitter_pct: 2.0,
            qrs_width_ms: 80.0,
            pr_ms: 160.0,
            p_present: true,
            noise_snr_db: 30.0,
            invert: false,
            duration_s: DEFAULT_DURATION_S,
            seed,
        }
    }
}

/// Ground-truth bounds of one wave (sample indices).
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct TruthWave {
    pub present: bool,
    pub onset: usize,
    pub peak: usize,
    pub offset: usize,
}

impl TruthWave {
    fn absent() -> TruthWave {
        TruthWave {
            present: false,
            onset: 0,
            peak: 0,
            offset: 0,
        }
    }
}

/// Ground truth for one rendered heartbeat.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TruthBeat {
    /// R-peak sample index.
    pub fiducial: usize,
    pub p: TruthWave,
    pub qrs: TruthWave,
    pub t: TruthWave,
    pub ectopic: bool,
}

/// Ground-truth rhythm segment over beat indices.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TruthSegment {
    pub kind: HypothesisKind,
    pub start: usize,
    pub end: usize,
    pub beat_indices: Vec<usize>,
}

/// Everything the generator knows about the record it emitted.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GroundTruth {
    pub class: RecordClass,
    pub beats: Vec<TruthBeat>,
    pub segments: Vec<TruthSegment>,
    /// True RR intervals in milliseconds (between consecutive fiducials).
    pub rr_ms: Vec<f64>,
    pub inverted: bool,
}

/// One scheduled beat before rendering.
#[derive(Debug, Clone, Copy)]
struct ScheduledBeat {
    /// Fiducial time in ms from record start.
    time_ms: f64,
    ectopic: bool,
}

fn validate(spec: &GenSpec) -> Result<()> {
    if !(spec.rate_bpm > 0.0) {
        return Err(CoreError::InfeasibleSpec("rate_bpm must be positive".into()));
    }
    if !(spec.duration_s > 0.0) {
        return Err(CoreError::InfeasibleSpec(
            "duration_s must be positive".into(),
        ));
    }
    if spec.rr_jitter_pct < 0.0 {
        return Err(CoreError::InfeasibleSpec(
            "rr_jitter_pct must be nonnegative".into(),
        ));
    }
    let base_rr = 60_000.0 / spec.rate_bpm;
    if spec.qrs_width_ms >= 0.6 * base_rr {
        return Err(CoreError::InfeasibleSpec(format!(
            "qrs_width_ms {} does not fit the {} ms RR interval",
            spec.qrs_width_ms, base_rr
        )));
    }
    if !(spec.qrs_width_ms > 0.0) {
        return Err(CoreError::InfeasibleSpec(
            "qrs_width_ms must be positive".into(),
        ));
    }
    Ok(())
}

/// Truncated standard normal draw (clipped at ±2.5 sigma).
fn jitter_z(rng: &mut ChaCha20Rng) -> f64 {
    // Box-Muller from two uniforms; deterministic per rng stream.
    let u1: f64 = rng.gen_range(1e-12..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    let z = (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
    z.clamp(-2.5, 2.5)
}

/// Builds the beat schedule for the requested rhythm. Returns beat times and
/// ectopic flags; an empty schedule encodes asystole.
fn schedule(spec: &GenSpec, rng: &mut ChaCha20Rng) -> Result<Vec<ScheduledBeat>> {
    let base = 60_000.0 / spec.rate_bpm;
    let total_ms = spec.duration_s * 1000.0;
    let lead_in = rng.gen_range(450.0..850.0);
    // Leave room for the T wave of the last beat.
    let horizon = total_ms - 400.0;
    let jit = |rng: &mut ChaCha20Rng| 1.0 + spec.rr_jitter_pct / 100.0 * jitter_z(rng);

    let mut beats: Vec<ScheduledBeat> = Vec::new();
    match spec.rhythm {
        HypothesisKind::Asystole => {}
        HypothesisKind::Afib => {
            // Lognormal RRs, redrawn until the sample-entropy irregularity
            // measure confirms the series is genuinely irregular.
            let sigma = 0.22;
            for _attempt in 0..24 {
                beats.clear();
                let mut t = lead_in;
                while t < horizon {
                    beats.push(ScheduledBeat {
                        time_ms: t,
                        ectopic: false,
                    });
                    let z = jitter_z(rng) / 2.5 * 3.0; // widen back to ~N(0,1.2)
                    let rr = (base.ln() + sigma * z).exp().clamp(350.0, 1800.0);
                    t += rr;
                }
                let rr: Vec<f64> = beats.windows(2).map(|w| w[1].time_ms - w[0].time_ms).collect();
                if rr.len() < 9 {
                    break; // record too short to verify; accept as-is
                }
                let (median_irr, _) = rr_irregularity(&rr).unwrap_or((0.0, 0.0));
                if median_irr > 0.25 {
                    break;
                }
            }
        }
        HypothesisKind::Bigeminy => {
            let short = 0.66 * base;
            let long = 1.34 * base;
            let mut t = lead_in;
            let mut next_ectopic = false;
            while t < horizon {
                beats.push(ScheduledBeat {
                    time_ms: t,
                    ectopic: next_ectopic,
                });
                let rr = if next_ectopic { long } else { short };
                t += rr * jit(rng);
                next_ectopic = !next_ectopic;
            }
        }
        HypothesisKind::Trigeminy => {
            let mut t = lead_in;
            let mut phase = 0usize; // 0: normal, 1: normal, 2: ectopic
            while t < horizon {
                beats.push(ScheduledBeat {
                    time_ms: t,
                    ectopic: phase == 2,
                });
                let rr = match phase {
                    0 => base,
                    1 => 0.66 * base,
                    _ => 1.34 * base,
                };
                t += rr * jit(rng);
                phase = (phase + 1) % 3;
            }
        }
        HypothesisKind::Extrasystole | HypothesisKind::Couplet => {
            // Regular rhythm with one premature intrusion (two for couplet).
            let mut rrs: Vec<(f64, bool)> = Vec::new();
            let mut t = lead_in;
            while t < horizon {
                rrs.push((base * jit(rng), false));
                t += rrs.last().unwrap().0;
            }
            let n = rrs.len();
            if n >= 6 {
                let k = rng.gen_range(2..n - 3);
                if spec.rhythm == HypothesisKind::Extrasystole {
                    rrs[k] = (0.62 * base, true);
                    rrs[k + 1] = (1.38 * base, false);
                } else {
                    rrs[k] = (0.62 * base, true);
                    rrs[k + 1] = (0.64 * base, true);
                    rrs[k + 2] = (1.74 * base, false);
                }
            }
            let mut t = lead_in;
            for (rr, ectopic) in rrs {
                if t >= horizon {
                    break;
                }
                beats.push(ScheduledBeat {
                    time_ms: t,
                    ectopic,
                });
                t += rr;
            }
        }
        _ => {
            // Normal, tachycardia, bradycardia: plain jittered schedule.
            let mut t = lead_in;
            while t < horizon {
                beats.push(ScheduledBeat {
                    time_ms: t,
                    ectopic: false,
                });
                t += base * jit(rng);
            }
        }
    }
    Ok(beats)
}

/// Adds a Gaussian deflection to the waveform.
fn add_gaussian(x: &mut [f64], fs: f64, center_ms: f64, sigma_ms: f64, amp: f64) {
    let n = x.len() as isize;
    let center = center_ms * fs / 1000.0;
    let sigma = sigma_ms * fs / 1000.0;
    let lo = ((center - 4.0 * sigma).floor() as isize).max(0);
    let hi = ((center + 4.0 * sigma).ceil() as isize).min(n - 1);
    for i in lo..=hi {
        let d = (i as f64 - center) / sigma;
        x[i as usize] += amp * (-0.5 * d * d).exp();
    }
}

fn ms_to_sample(ms: f64, fs: f64, n: usize) -> usize {
    ((ms * fs / 1000.0).round() as isize).clamp(0, n as isize - 1) as usize
}

/// Renders one beat into the waveform and returns its ground truth.
#[allow(clippy::too_many_arguments)]
fn render_beat(
    x: &mut [f64],
    fs: f64,
    n: usize,
    time_ms: f64,
    spec: &GenSpec,
    ectopic: bool,
    rr_next_ms: f64,
    amp_scale: f64,
) -> TruthBeat {
    let width = if ectopic {
        (1.5 * spec.qrs_width_ms).max(120.0)
    } else {
        spec.qrs_width_ms
    };
    let amp = R_AMP * amp_scale * if ectopic { 0.85 } else { 1.0 };

    // QRS spans exactly [time - width/2, time + width/2]: boundary components
    // sit 3 sigma inside the edges.
    let sig_r = width / 10.0;
    let sig_qs = width / 14.0;
    let q_mu = time_ms - (width / 2.0 - 3.0 * sig_qs);
    let s_mu = time_ms + (width / 2.0 - 3.0 * sig_qs);
    if ectopic {
        // Broad monophasic-leaning complex with a deep terminal deflection.
        add_gaussian(x, fs, q_mu, sig_qs, -0.08 * amp);
        add_gaussian(x, fs, time_ms, sig_r * 1.15, amp);
        add_gaussian(x, fs, s_mu, sig_qs * 1.2, -0.45 * amp);
    } else {
        add_gaussian(x, fs, q_mu, sig_qs, -0.11 * amp);
        add_gaussian(x, fs, time_ms, sig_r, amp);
        add_gaussian(x, fs, s_mu, sig_qs, -0.22 * amp);
    }
    let qrs_onset_ms = time_ms - width / 2.0;
    let qrs_offset_ms = time_ms + width / 2.0;

    // P wave: onset exactly pr_ms before QRS onset.
    let p = if spec.p_present && !ectopic {
        let sig_p = 16.0;
        let p_onset_ms = qrs_onset_ms - spec.pr_ms;
        let p_mu = p_onset_ms + 3.0 * sig_p;
        add_gaussian(x, fs, p_mu, sig_p, 0.17 * amp);
        TruthWave {
            present: true,
            onset: ms_to_sample(p_onset_ms, fs, n),
            peak: ms_to_sample(p_mu, fs, n),
            offset: ms_to_sample(p_mu + 3.0 * sig_p, fs, n),
        }
    } else {
        TruthWave::absent()
    };

    // T wave: lag and width adapt to the coming RR so waves never collide.
    let t_sig = (0.06 * rr_next_ms).clamp(18.0, 30.0);
    let t_lag = (0.28 * rr_next_ms).clamp(90.0, 150.0);
    let t_mu = qrs_offset_ms + t_lag;
    let t_amp = if ectopic { -0.30 } else { 0.33 } * amp;
    add_gaussian(x, fs, t_mu, t_sig, t_amp);
    let t = TruthWave {
        present: true,
        onset: ms_to_sample(t_mu - 3.0 * t_sig, fs, n),
        peak: ms_to_sample(t_mu, fs, n),
        offset: ms_to_sample(t_mu + 3.0 * t_sig, fs, n),
    };

    TruthBeat {
        fiducial: ms_to_sample(time_ms, fs, n),
        p,
        qrs: TruthWave {
            present: true,
            onset: ms_to_sample(qrs_onset_ms, fs, n),
            peak: ms_to_sample(time_ms, fs, n),
            offset: ms_to_sample(qrs_offset_ms, fs, n),
        },
        t,
        ectopic,
    }
}

/// Splits the beat schedule into ground-truth rhythm segments.
fn truth_segments(spec: &GenSpec, beats: &[TruthBeat], n: usize) -> Vec<TruthSegment> {
    if beats.is_empty() {
        return vec![TruthSegment {
            kind: HypothesisKind::Asystole,
            start: 0,
            end: n - 1,
            beat_indices: vec![],
        }];
    }
    let seg = |kind, idxs: Vec<usize>| {
        let start = beats[idxs[0]].fiducial.saturating_sub(1);
        let end = beats[*idxs.last().unwrap()].fiducial;
        TruthSegment {
            kind,
            start,
            end,
            beat_indices: idxs,
        }
    };
    match spec.rhythm {
        HypothesisKind::Extrasystole | HypothesisKind::Couplet => {
            // Normal context around the premature group.
            let mut segments = Vec::new();
            let mut run: Vec<usize> = Vec::new();
            let mut i = 0;
            while i < beats.len() {
                if beats[i].ectopic {
                    if !run.is_empty() {
                        segments.push(seg(HypothesisKind::Normal, std::mem::take(&mut run)));
                    }
                    let mut grp = vec![i];
                    while i + 1 < beats.len() && beats[i + 1].ectopic {
                        i += 1;
                        grp.push(i);
                    }
                    let kind = if grp.len() > 1 {
                        HypothesisKind::Couplet
                    } else {
                        HypothesisKind::Extrasystole
                    };
                    segments.push(seg(kind, grp));
                } else {
                    run.push(i);
                }
                i += 1;
            }
            if !run.is_empty() {
                segments.push(seg(HypothesisKind::Normal, run));
            }
            segments
        }
        _ => vec![seg(spec.rhythm, (0..beats.len()).collect())],
    }
}

/// Generates one record plus its ground truth. Identical spec (including
/// seed) yields byte-identical output.
pub fn generate(spec: &GenSpec) -> Result<(Record, GroundTruth)> {
    validate(spec)?;
    let fs = DEFAULT_FS as f64;
    let n = (spec.duration_s * fs).round() as usize;
    let mut rng = ChaCha20Rng::seed_from_u64(spec.seed);

    let sched = schedule(spec, &mut rng)?;
    let amp_scale = rng.gen_range(0.85..1.15);

    let mut clean = vec![0.0f64; n];
    let mut beats = Vec::with_capacity(sched.len());
    for (k, sb) in sched.iter().enumerate() {
        let rr_next = if k + 1 < sched.len() {
            sched[k + 1].time_ms - sb.time_ms
        } else {
            60_000.0 / spec.rate_bpm
        };
        beats.push(render_beat(
            &mut clean, fs, n, sb.time_ms, spec, sb.ectopic, rr_next, amp_scale,
        ));
    }

    // Fibrillatory oscillation for AF records: low-amplitude 6-9 Hz waves.
    if spec.rhythm == HypothesisKind::Afib {
        let f1 = rng.gen_range(6.0..7.5);
        let f2 = rng.gen_range(7.5..9.0);
        let ph1 = rng.gen_range(0.0..std::f64::consts::TAU);
        let ph2 = rng.gen_range(0.0..std::f64::consts::TAU);
        let a = 0.045 * R_AMP * amp_scale;
        for i in 0..n {
            let t = i as f64 / fs;
            clean[i] += a * ((std::f64::consts::TAU * f1 * t + ph1).sin()
                + 0.8 * (std::f64::consts::TAU * f2 * t + ph2).sin());
        }
    }

    // Mild baseline wander on every record.
    let wander_ph = rng.gen_range(0.0..std::f64::consts::TAU);
    for i in 0..n {
        let t = i as f64 / fs;
        clean[i] += 0.015 * R_AMP * (std::f64::consts::TAU * 0.25 * t + wander_ph).sin();
    }

    // Band-limited additive noise at the requested SNR.
    let sig_rms = (clean.iter().map(|v| v * v).sum::<f64>() / n as f64).sqrt();
    let mut x = clean;
    if spec.noise_snr_db < 120.0 && sig_rms > 0.0 {
        let raw: Vec<f64> = (0..n).map(|_| jitter_z(&mut rng)).collect();
        let taps = crate::dsp::bandpass_taps(fs, 0.5, 40.0, 81);
        let shaped = crate::dsp::filtfilt_aligned(&raw, &taps);
        let noise_rms =
            (shaped.iter().map(|v| v * v).sum::<f64>() / n as f64).sqrt().max(1e-12);
        let scale = sig_rms / (noise_rms * 10f64.powf(spec.noise_snr_db / 20.0));
        for i in 0..n {
            x[i] += scale * shaped[i];
        }
    }

    if spec.invert {
        for v in x.iter_mut() {
            *v = -*v;
        }
    }

    let samples: Vec<i16> = x
        .iter()
        .map(|&v| v.round().clamp(-32000.0, 32000.0) as i16)
        .collect();

    let rr_ms: Vec<f64> = sched.windows(2).map(|w| w[1].time_ms - w[0].time_ms).collect();
    let segments = truth_segments(spec, &beats, n);
    let mut record = Record::new(format!("G{:010}", spec.seed % 10_000_000_000), DEFAULT_FS, 1000.0, samples)?;
    record.label = Some(spec.class);
    Ok((
        record,
        GroundTruth {
            class: spec.class,
            beats,
            segments,
            rr_ms,
            inverted: spec.invert,
        },
    ))
}

/// The Other-class anomaly subtypes the corpus cycles through.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OtherSubtype {
    Tachycardia,
    Bradycardia,
    WideQrs,
    LongPr,
    Extrasystole,
    Bigeminy,
}

const OTHER_SUBTYPES: [OtherSubtype; 6] = [
    OtherSubtype::Tachycardia,
    OtherSubtype::Bradycardia,
    OtherSubtype::WideQrs,
    OtherSubtype::LongPr,
    OtherSubtype::Extrasystole,
    OtherSubtype::Bigeminy,
];

/// Builds the GenSpec for corpus record number `idx` of `class`.
pub fn corpus_spec(class: RecordClass, idx: usize, seed: u64, duration_s: f64) -> GenSpec {
    let record_seed = mix_seed(seed, class.index() as u64, idx as u64);
    let mut rng = ChaCha20Rng::seed_from_u64(mix_seed(record_seed, 17, 0));
    let mut spec = GenSpec {
        class,
        rhythm: HypothesisKind::Normal,
        rate_bpm: rng.gen_range(55.0..95.0),
        rr_jitter_pct: rng.gen_range(1.0..3.0),
        qrs_width_ms: rng.gen_range(70.0..95.0),
        pr_ms: rng.gen_range(140.0..195.0),
        p_present: true,
        noise_snr_db: rng.gen_range(24.0..36.0),
        invert: false,
        duration_s,
        seed: record_seed,
    };
    match class {
        RecordClass::Normal => {}
        RecordClass::Afib => {
            spec.rhythm = HypothesisKind::Afib;
            spec.rate_bpm = rng.gen_range(80.0..110.0);
            spec.p_present = false;
        }
        RecordClass::Other => match OTHER_SUBTYPES[idx % OTHER_SUBTYPES.len()] {
            OtherSubtype::Tachycardia => {
                spec.rhythm = HypothesisKind::Tachycardia;
                spec.rate_bpm = rng.gen_range(115.0..140.0);
                spec.rr_jitter_pct = rng.gen_range(1.0..2.5);
                spec.pr_ms = 140.0;
            }
            OtherSubtype::Bradycardia => {
                spec.rhythm = HypothesisKind::Bradycardia;
                spec.rate_bpm = rng.gen_range(42.0..47.0);
                spec.rr_jitter_pct = rng.gen_range(1.0..2.0);
            }
            OtherSubtype::WideQrs => {
                spec.qrs_width_ms = rng.gen_range(125.0..150.0);
            }
            OtherSubtype::LongPr => {
                spec.pr_ms = rng.gen_range(230.0..280.0);
            }
            OtherSubtype::Extrasystole => {
                spec.rhythm = HypothesisKind::Extrasystole;
                spec.rate_bpm = rng.gen_range(60.0..90.0);
            }
            OtherSubtype::Bigeminy => {
                spec.rhythm = HypothesisKind::Bigeminy;
                spec.rate_bpm = rng.gen_range(68.0..85.0);
            }
        },
        RecordClass::Noisy => {
            spec.noise_snr_db = rng.gen_range(-3.0..4.0);
        }
    }
    spec
}

/// Generates a balanced labeled corpus: `n_per_class` records for each of
/// the four classes, deterministic by seed. Record ids are `S<number>`,
/// zero-padded, assigned class-interleaved so sorted-id order mixes classes.
pub fn generate_corpus(n_per_class: usize, seed: u64) -> Vec<(Record, GroundTruth)> {
    generate_corpus_with_duration(n_per_class, seed, DEFAULT_DURATION_S)
}

pub fn generate_corpus_with_duration(
    n_per_class: usize,
    seed: u64,
    duration_s: f64,
) -> Vec<(Record, GroundTruth)> {
    let mut out = Vec::with_capacity(4 * n_per_class);
    let mut counter = 0usize;
    for idx in 0..n_per_class {
        for class in RecordClass::ALL {
            let spec = corpus_spec(class, idx, seed, duration_s);
            let (mut record, truth) =
                generate(&spec).expect("corpus specs are feasible by construction");
            record.id = format!("S{counter:05}");
            counter += 1;
            out.push((record, truth));
        }
    }
    out
}

/// Generates the lead-inversion corpus: `n` records (mixed N/A/O), the
/// second half negated. Returns each record with its inversion flag.
pub fn generate_inversion_corpus(n: usize, seed: u64) -> Vec<(Record, bool)> {
    let classes = [RecordClass::Normal, RecordClass::Afib, RecordClass::Other];
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let class = classes[i % classes.len()];
        let mut spec = corpus_spec(class, i, mix_seed(seed, 91, i as u64), DEFAULT_DURATION_S);
        let invert = i >= n / 2;
        spec.invert = invert;
        let (mut record, _) = generate(&spec).expect("feasible spec");
        record.id = format!("I{i:05}");
        record.label = None;
        out.push((record, invert));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stats::median;

    #[test]
    fn normal_spec_rr_matches_rate() {
        let spec = GenSpec::normal(75.0, 42);
        let (r, t) = generate(&spec).unwrap();
        assert!(r.duration_ms() >= 14_999.0);
        let med = median(&t.rr_ms);
        assert!((med - 800.0).abs() < 0.02 * 800.0, "median RR {med}");
    }

    #[test]
    fn tachycardia_spec_crosses_boundary() {
        let mut spec = GenSpec::normal(130.0, 7);
        spec.rhythm = HypothesisKind::Tachycardia;
        spec.class = RecordClass::Other;
        let (_, t) = generate(&spec).unwrap();
        assert!(median(&t.rr_ms) < 600.0);
    }

    #[test]
    fn determinism_byte_identical() {
        let spec = GenSpec::normal(80.0, 99);
        let (a, _) = generate(&spec).unwrap();
        let (b, _) = generate(&spec).unwrap();
        assert_eq!(a.samples, b.samples);
    }

    #[test]
    fn corpus_is_balanced_and_deterministic() {
        let c1 = generate_corpus(6, 5);
        let c2 = generate_corpus(6, 5);
        assert_eq!(c1.len(), 24);
        for class in RecordClass::ALL {
            assert_eq!(c1.iter().filter(|(r, _)| r.label == Some(class)).count(), 6);
        }
        for ((r1, _), (r2, _)) in c1.iter().zip(&c2) {
            assert_eq!(r1.samples, r2.samples);
            assert_eq!(r1.id, r2.id);
        }
    }

    #[test]
    fn truth_fiducials_inside_record_and_segments_partition() {
        for seed in 0..8 {
            for class in RecordClass::ALL {
                let spec = corpus_spec(class, seed as usize, 3, DEFAULT_DURATION_S);
                let (r, t) = generate(&spec).unwrap();
                for b in &t.beats {
                    assert!(b.fiducial < r.samples.len());
                }
                let mut seen = vec![false; t.beats.len()];
                for s in &t.segments {
                    for &bi in &s.beat_indices {
                        assert!(!seen[bi], "beat in two segments");
                        seen[bi] = true;
                    }
                }
                assert!(seen.iter().all(|&s| s), "beat not covered by segments");
            }
        }
    }

    #[test]
    fn afib_is_more_irregular_than_normal() {
        let mut afib_irr = Vec::new();
        let mut normal_irr = Vec::new();
        for i in 0..12 {
            let spec = corpus_spec(RecordClass::Afib, i, 11, DEFAULT_DURATION_S);
            let (_, t) = generate(&spec).unwrap();
            if let Ok((m, _)) = rr_irregularity(&t.rr_ms) {
                afib_irr.push(m);
            }
            let spec = corpus_spec(RecordClass::Normal, i, 11, DEFAULT_DURATION_S);
            let (_, t) = generate(&spec).unwrap();
            if let Ok((m, _)) = rr_irregularity(&t.rr_ms) {
                normal_irr.push(m);
            }
        }
        assert!(!afib_irr.is_empty() && !normal_irr.is_empty());
        assert!(
            median(&afib_irr) > median(&normal_irr),
            "afib {} vs normal {}",
            median(&afib_irr),
            median(&normal_irr)
        );
    }

    #[test]
    fn infeasible_specs_rejected() {
        let mut spec = GenSpec::normal(75.0, 1);
        spec.qrs_width_ms = 600.0;
        assert!(generate(&spec).is_err());
        let mut spec = GenSpec::normal(75.0, 1);
        spec.duration_s = 0.0;
        assert!(generate(&spec).is_err());
    }
}
