//! Linear-phase FIR preprocessing: band-pass, rational resampling and epoch
//! cropping.

use crate::error::{ensure, Error, Result};
use crate::numerics::Tensor;

use super::trial::Trial;

/// Tap count used at the reference rate of 128 Hz.
pub const BASE_TAPS: usize = 101;
const BASE_RATE_HZ: f64 = 128.0;
/// Anti-alias cutoff as a fraction of the target rate (below Nyquist = 0.5).
const ANTI_ALIAS_FRACTION: f64 = 0.45;

/// Odd tap count keeping the transition width of a 101-tap filter at 128 Hz.
pub fn taps_for_rate(fs_hz: f64) -> usize {
    let half = ((BASE_TAPS - 1) as f64 / 2.0 * fs_hz / BASE_RATE_HZ).round().max(1.0) as usize;
    2 * half + 1
}

fn hamming(n: usize, len: usize) -> f64 {
    0.54 - 0.46 * (2.0 * std::f64::consts::PI * n as f64 / (len - 1) as f64).cos()
}

/// Hamming-windowed sinc low-pass with unit DC gain; `cutoff` in cycles/sample.
pub fn lowpass_taps(cutoff: f64, len: usize) -> Vec<f64> {
    let m = (len - 1) as f64 / 2.0;
    let mut h: Vec<f64> = (0..len)
        .map(|n| {
            let x = n as f64 - m;
            let s = if x == 0.0 {
                2.0 * cutoff
            } else {
                (2.0 * std::f64::consts::PI * cutoff * x).sin() / (std::f64::consts::PI * x)
            };
            s * hamming(n, len)
        })
        .collect();
    let dc: f64 = h.iter().sum();
    h.iter_mut().for_each(|v| *v /= dc);
    h
}

/// Band-pass taps as the difference of two unit-gain low-passes.
pub fn bandpass_taps(lo_hz: f64, hi_hz: f64, fs_hz: f64, len: usize) -> Vec<f64> {
    let hi = lowpass_taps(hi_hz / fs_hz, len);
    let lo = lowpass_taps(lo_hz / fs_hz, len);
    hi.iter().zip(&lo).map(|(a, b)| a - b).collect()
}

fn odd_extend(x: &[f64], pad: usize) -> Vec<f64> {
    let n = x.len();
    let mut out = Vec::with_capacity(n + 2 * pad);
    for i in (1..=pad).rev() {
        out.push(2.0 * x[0] - x[i]);
    }
    out.extend_from_slice(x);
    for i in 1..=pad {
        out.push(2.0 * x[n - 1] - x[n - 1 - i]);
    }
    out
}

fn causal_fir(h: &[f64], x: &[f64]) -> Vec<f64> {
    (0..x.len())
        .map(|n| {
            let kmax = h.len().min(n + 1);
            (0..kmax).map(|k| h[k] * x[n - k]).sum()
        })
        .collect()
}

/// Forward-backward application with odd-extension padding.
fn filtfilt(h: &[f64], x: &[f64]) -> Vec<f64> {
    let n = x.len();
    if n < 2 {
        return x.to_vec();
    }
    let pad = (3 * (h.len() - 1)).min(n - 1);
    let ext = odd_extend(x, pad);
    let mut y = causal_fir(h, &ext);
    y.reverse();
    let mut y = causal_fir(h, &y);
    y.reverse();
    y[pad..pad + n].to_vec()
}

fn map_rows(trial: &Trial, f: impl Fn(&[f64]) -> Vec<f64>) -> Result<Tensor> {
    let (c, _) = trial.signal.dims2()?;
    let mut out = Vec::new();
    let mut width = 0;
    for ch in 0..c {
        let row: Vec<f64> = trial.signal.row(ch).iter().map(|&v| f64::from(v)).collect();
        let y = f(&row);
        width = y.len();
        out.extend(y.into_iter().map(|v| v as f32));
    }
    Tensor::new(vec![c, width], out)
}

/// Zero-phase band-pass filter applied independently to every channel.
pub fn bandpass(trial: &Trial, lo_hz: f64, hi_hz: f64) -> Result<Trial> {
    let fs = f64::from(trial.sample_rate_hz);
    ensure!(
        lo_hz > 0.0 && lo_hz < hi_hz && hi_hz < fs / 2.0,
        Validation,
        "band [{lo_hz}, {hi_hz}] Hz invalid for sample rate {fs} Hz"
    );
    let h = bandpass_taps(lo_hz, hi_hz, fs, taps_for_rate(fs));
    let sig = map_rows(trial, |row| filtfilt(&h, row))?;
    Ok(trial.with_signal(sig))
}

fn gcd(a: u64, b: u64) -> u64 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

fn integral_rate(hz: f64) -> Result<u64> {
    ensure!(
        hz > 0.0 && hz.fract() == 0.0,
        Unsupported,
        "only integral sample rates are supported, got {hz}"
    );
    Ok(hz as u64)
}

/// Rational down-sampling: zero-stuff by `up`, anti-alias low-pass, keep every
/// `down`-th sample.
pub fn resample(trial: &Trial, target_hz: f64) -> Result<Trial> {
    let src_hz = f64::from(trial.sample_rate_hz);
    if target_hz > src_hz {
        return Err(Error::Unsupported(format!(
            "upsampling from {src_hz} Hz to {target_hz} Hz is not supported"
        )));
    }
    ensure!(target_hz > 0.0, Validation, "target rate must be positive");
    if target_hz == src_hz {
        return Ok(trial.clone());
    }
    let (src, dst) = (integral_rate(src_hz)?, integral_rate(target_hz)?);
    let g = gcd(src, dst);
    let (up, down) = ((dst / g) as usize, (src / g) as usize);
    let fs_up = src_hz * up as f64;
    let taps = taps_for_rate(fs_up);
    let h = lowpass_taps(ANTI_ALIAS_FRACTION * target_hz / fs_up, taps);
    let half = (taps - 1) / 2;
    let t = trial.n_timepoints();
    let n_out = (t as f64 * target_hz / src_hz).round() as usize;
    ensure!(n_out >= 1, Validation, "resampled trial would be empty");
    // Padding (in input samples) must be a multiple of `down` to keep the
    // output grid aligned with the original first sample.
    let need = half.div_ceil(up) + 1;
    let pad = need.div_ceil(down) * down;
    let pad = pad.min((t - 1) / down * down);
    let m0 = pad * up / down;
    let sig = map_rows(trial, |row| {
        let ext = odd_extend(row, pad);
        let len_up = ext.len() * up;
        (0..n_out)
            .map(|m| {
                let center = (m0 + m) * down;
                // y_up[center] = up · Σ_k h[k] · x_up[center + half - k]
                let mut s = 0.0;
                let lo = (center + half).saturating_sub(taps - 1);
                let hi = (center + half).min(len_up - 1);
                let mut j = lo.div_ceil(up) * up;
                while j <= hi {
                    let k = center + half - j;
                    s += h[k] * ext[j / up];
                    j += up;
                }
                s * up as f64
            })
            .collect()
    })?;
    let mut out = trial.with_signal(sig);
    out.sample_rate_hz = target_hz as f32;
    Ok(out)
}

/// Keeps samples in `[start_s, end_s)` seconds of the trial.
pub fn crop_epoch(trial: &Trial, start_s: f64, end_s: f64) -> Result<Trial> {
    let fs = f64::from(trial.sample_rate_hz);
    let a = (start_s * fs).round();
    let b = (end_s * fs).round();
    ensure!(
        a >= 0.0 && b > a && b as usize <= trial.n_timepoints(),
        Validation,
        "epoch window [{start_s}, {end_s}) s outside trial of {} samples",
        trial.n_timepoints()
    );
    let (a, b) = (a as usize, b as usize);
    let c = trial.n_channels();
    let mut data = Vec::with_capacity(c * (b - a));
    for ch in 0..c {
        data.extend_from_slice(&trial.signal.row(ch)[a..b]);
    }
    Ok(trial.with_signal(Tensor::new(vec![c, b - a], data)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sine_trial(freq: f64, fs: f64, n: usize) -> Trial {
        let data: Vec<f32> = (0..n)
            .map(|i| (2.0 * std::f64::consts::PI * freq * i as f64 / fs).sin() as f32)
            .collect();
        Trial::new(Tensor::new(vec![1, n], data).unwrap(), 1, 1, fs as f32).unwrap()
    }

    #[test]
    fn zero_in_zero_out() {
        let tr = Trial::new(Tensor::zeros(&[3, 256]), 1, 1, 128.0).unwrap();
        assert_eq!(bandpass(&tr, 8.0, 32.0).unwrap().signal, tr.signal);
    }

    #[test]
    fn invalid_band_rejected() {
        let tr = sine_trial(10.0, 128.0, 256);
        for (lo, hi) in [(0.0, 30.0), (20.0, 10.0), (8.0, 64.0)] {
            assert!(matches!(bandpass(&tr, lo, hi), Err(Error::Validation(_))));
        }
    }

    #[test]
    fn tap_count_is_101_at_128_hz() {
        assert_eq!(taps_for_rate(128.0), 101);
        assert_eq!(taps_for_rate(256.0), 201);
    }

    #[test]
    fn resample_lengths_and_identity() {
        let tr = sine_trial(10.0, 256.0, 1024);
        let out = resample(&tr, 128.0).unwrap();
        assert_eq!(out.n_timepoints(), 512);
        assert_eq!(out.sample_rate_hz, 128.0);
        assert_eq!(resample(&tr, 256.0).unwrap(), tr);
        let tr200 = sine_trial(10.0, 200.0, 800);
        assert_eq!(resample(&tr200, 128.0).unwrap().n_timepoints(), 512);
    }

    #[test]
    fn upsampling_unsupported() {
        let tr = sine_trial(10.0, 128.0, 64);
        assert!(matches!(resample(&tr, 256.0), Err(Error::Unsupported(_))));
    }

    #[test]
    fn crop_four_seconds() {
        let tr = sine_trial(10.0, 128.0, 700);
        let out = crop_epoch(&tr, 0.0, 4.0).unwrap();
        assert_eq!(out.n_timepoints(), 512);
        assert_eq!(out.signal.data(), &tr.signal.data()[..512]);
        assert!(crop_epoch(&tr, 0.0, 6.0).is_err());
    }
}
