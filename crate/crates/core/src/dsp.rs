//! Signal-processing primitives: linear-phase FIR filtering, moving windows,
//! running median baseline, and a Hann-windowed periodogram.

use std::f64::consts::PI;

/// Designs a linear-phase band-pass FIR by the windowed-sinc method
/// (Hann window, odd tap count).
pub fn bandpass_taps(fs: f64, lo_hz: f64, hi_hz: f64, n_taps: usize) -> Vec<f64> {
    let n = if n_taps % 2 == 0 { n_taps + 1 } else { n_taps };
    let mid = (n / 2) as isize;
    let f_lo = lo_hz / fs;
    let f_hi = hi_hz / fs;
    let mut taps = Vec::with_capacity(n);
    for i in 0..n as isize {
        let k = (i - mid) as f64;
        // Ideal band-pass = difference of two low-pass sincs.
        let ideal = if k == 0.0 {
            2.0 * (f_hi - f_lo)
        } else {
            ((2.0 * PI * f_hi * k).sin() - (2.0 * PI * f_lo * k).sin()) / (PI * k)
        };
        let w = 0.5 - 0.5 * (2.0 * PI * i as f64 / (n as f64 - 1.0)).cos();
        taps.push(ideal * w);
    }
    taps
}

/// Convolves with a linear-phase kernel and compensates the group delay, so
/// the output is time-aligned with the input. Edges are zero-padded.
pub fn filtfilt_aligned(x: &[f64], taps: &[f64]) -> Vec<f64> {
    let n = x.len();
    let half = taps.len() / 2;
    let mut y = vec![0.0; n];
    for i in 0..n {
        let mut acc = 0.0;
        for (j, &t) in taps.iter().enumerate() {
            let k = i as isize + half as isize - j as isize;
            if k >= 0 && (k as usize) < n {
                acc += t * x[k as usize];
            }
        }
        y[i] = acc;
    }
    y
}

/// Centered moving average over a window of `w` samples (`w >= 1`).
pub fn moving_average(x: &[f64], w: usize) -> Vec<f64> {
    let n = x.len();
    let w = w.max(1);
    let half = w / 2;
    let mut prefix = vec![0.0; n + 1];
    for i in 0..n {
        prefix[i + 1] = prefix[i] + x[i];
    }
    let mut y = vec![0.0; n];
    for i in 0..n {
        let lo = i.saturating_sub(half);
        let hi = (i + half + 1).min(n);
        y[i] = (prefix[hi] - prefix[lo]) / (hi - lo) as f64;
    }
    y
}

/// Running median over a centered window of `w` samples. Used as a baseline
/// estimator: with `w` around 200 ms the QRS deflections are rejected while
/// slow drift is tracked.
pub fn median_filter(x: &[f64], w: usize) -> Vec<f64> {
    let n = x.len();
    let w = w.max(1);
    let half = w / 2;
    let mut y = vec![0.0; n];
    let mut buf: Vec<f64> = Vec::with_capacity(w);
    for i in 0..n {
        let lo = i.saturating_sub(half);
        let hi = (i + half + 1).min(n);
        buf.clear();
        buf.extend_from_slice(&x[lo..hi]);
        buf.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let m = buf.len();
        y[i] = if m % 2 == 1 {
            buf[m / 2]
        } else {
            0.5 * (buf[m / 2 - 1] + buf[m / 2])
        };
    }
    y
}

/// Central-difference derivative, same length as the input.
pub fn derivative(x: &[f64]) -> Vec<f64> {
    let n = x.len();
    let mut y = vec![0.0; n];
    if n < 2 {
        return y;
    }
    y[0] = x[1] - x[0];
    y[n - 1] = x[n - 1] - x[n - 2];
    for i in 1..n - 1 {
        y[i] = 0.5 * (x[i + 1] - x[i - 1]);
    }
    y
}

/// Hann-windowed periodogram, zero-padded to `nfft` (power of two).
/// Returns (frequencies_hz, power) for the one-sided spectrum.
pub fn periodogram(x: &[f64], fs: f64, nfft: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(nfft.is_power_of_two(), "nfft must be a power of two");
    let n = x.len().min(nfft);
    let mut re = vec![0.0; nfft];
    let mut im = vec![0.0; nfft];
    let mean = if n > 0 {
        x[..n].iter().sum::<f64>() / n as f64
    } else {
        0.0
    };
    for i in 0..n {
        let w = if n > 1 {
            0.5 - 0.5 * (2.0 * PI * i as f64 / (n as f64 - 1.0)).cos()
        } else {
            1.0
        };
        re[i] = (x[i] - mean) * w;
    }
    fft_in_place(&mut re, &mut im);
    let half = nfft / 2;
    let mut freqs = Vec::with_capacity(half + 1);
    let mut power = Vec::with_capacity(half + 1);
    for k in 0..=half {
        freqs.push(k as f64 * fs / nfft as f64);
        power.push(re[k] * re[k] + im[k] * im[k]);
    }
    (freqs, power)
}

/// Iterative radix-2 Cooley-Tukey FFT.
fn fft_in_place(re: &mut [f64], im: &mut [f64]) {
    let n = re.len();
    debug_assert!(n.is_power_of_two());
    // Bit-reversal permutation.
    let mut j = 0usize;
    for i in 1..n {
        let mut bit = n >> 1;
        while j & bit != 0 {
            j ^= bit;
            bit >>= 1;
        }
        j |= bit;
        if i < j {
            re.swap(i, j);
            im.swap(i, j);
        }
    }
    let mut len = 2;
    while len <= n {
        let ang = -2.0 * PI / len as f64;
        let (wr, wi) = (ang.cos(), ang.sin());
        let mut i = 0;
        while i < n {
            let (mut cur_r, mut cur_i) = (1.0f64, 0.0f64);
            for k in 0..len / 2 {
                let (ur, ui) = (re[i + k], im[i + k]);
                let (vr, vi) = (
                    re[i + k + len / 2] * cur_r - im[i + k + len / 2] * cur_i,
                    re[i + k + len / 2] * cur_i + im[i + k + len / 2] * cur_r,
                );
                re[i + k] = ur + vr;
                im[i + k] = ui + vi;
                re[i + k + len / 2] = ur - vr;
                im[i + k + len / 2] = ui - vi;
                let next_r = cur_r * wr - cur_i * wi;
                cur_i = cur_r * wi + cur_i * wr;
                cur_r = next_r;
            }
            i += len;
        }
        len <<= 1;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bandpass_passes_band_and_rejects_outside() {
        let fs = 300.0;
        let taps = bandpass_taps(fs, 5.0, 25.0, 105);
        let n = 1500;
        let tone = |f: f64| -> f64 {
            let x: Vec<f64> = (0..n)
                .map(|i| (2.0 * PI * f * i as f64 / fs).sin())
                .collect();
            let y = filtfilt_aligned(&x, &taps);
            // RMS over the middle to avoid edge effects.
            let mid = &y[n / 4..3 * n / 4];
            (mid.iter().map(|v| v * v).sum::<f64>() / mid.len() as f64).sqrt()
        };
        let in_band = tone(12.0);
        assert!(in_band > 0.5, "in-band RMS {in_band}");
        assert!(tone(0.5) < 0.15 * in_band);
        assert!(tone(60.0) < 0.15 * in_band);
    }

    #[test]
    fn moving_average_of_constant() {
        let y = moving_average(&[2.0; 50], 15);
        assert!(y.iter().all(|&v| (v - 2.0).abs() < 1e-12));
    }

    #[test]
    fn median_filter_rejects_impulse() {
        let mut x = vec![0.0; 101];
        x[50] = 100.0;
        let y = median_filter(&x, 21);
        assert_eq!(y[50], 0.0);
    }

    #[test]
    fn periodogram_finds_tone() {
        let fs = 300.0;
        let x: Vec<f64> = (0..256)
            .map(|i| (2.0 * PI * 7.0 * i as f64 / fs).sin())
            .collect();
        let (freqs, power) = periodogram(&x, fs, 256);
        let peak = power
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap()
            .0;
        assert!((freqs[peak] - 7.0).abs() <= fs / 256.0);
    }

    #[test]
    fn fft_matches_naive_dft() {
        let n = 64;
        let x: Vec<f64> = (0..n).map(|i| ((i * 37 + 11) % 17) as f64 - 8.0).collect();
        let mut re = x.clone();
        let mut im = vec![0.0; n];
        fft_in_place(&mut re, &mut im);
        for k in 0..n {
            let (mut nr, mut ni) = (0.0, 0.0);
            for (i, &v) in x.iter().enumerate() {
                let ang = -2.0 * PI * (k * i) as f64 / n as f64;
                nr += v * ang.cos();
                ni += v * ang.sin();
            }
            assert!((re[k] - nr).abs() < 1e-8, "k={k}");
            assert!((im[k] - ni).abs() < 1e-8, "k={k}");
        }
    }
}
