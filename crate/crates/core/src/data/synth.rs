//! Synthetic multi-user motor-imagery-like EEG.
//!
//! Every latent channel carries unit-variance pink plus white background and
//! ongoing oscillations in each class band (mu- and beta-like rhythms at a
//! user-specific peak frequency, random phase per trial). Imagining class `k`
//! suppresses the rhythm of band `k` on a class-specific channel pair by a
//! jittered fraction (event-related desynchronisation), so class information
//! lives mostly in relative band power. A weak phase-locked evoked response
//! per class (a Gabor burst with a fixed spatial pattern) adds a second cue
//! that is predictive but small next to the channel std, the kind of feature
//! a clean-trained network leans on and a small attack erases.
//!
//! Users differ by a spatial mixing `M_u = I + user_offset_scale · G_u`
//! applied to the latent channels (what Euclidean alignment largely undoes),
//! by their rhythm peak frequencies, and by an additive user rhythm at a
//! user-specific frequency and spatial pattern (what makes identity learnable).

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::numerics::Tensor;
use crate::seed::SeedKey;

use super::trial::{Trial, TrialSet};

const TWO_PI: f64 = 2.0 * std::f64::consts::PI;
/// Output scale, roughly microvolt-like.
const AMPLITUDE_UNITS: f64 = 10.0;
/// Per-trial, per-channel spread of ongoing rhythm amplitude.
const RHYTHM_AMPLITUDE_JITTER: f64 = 0.15;
const PEAK_JITTER_HZ: f64 = 0.3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub n_channels: usize,
    pub n_timepoints: usize,
    pub n_classes: usize,
    pub n_users: usize,
    pub trials_per_class_per_user: usize,
    pub sample_rate_hz: f32,
    /// Band whose rhythm class `k` suppresses, `(lo, hi)` Hz.
    pub class_band_hz: Vec<(f32, f32)>,
    /// RMS of each ongoing band rhythm relative to the unit background.
    pub rhythm_scale: f32,
    /// Mean fractional amplitude drop of the class rhythm on its channels.
    pub erd_depth: f32,
    /// Relative per-trial spread of the drop: `depth · max(0, 1 + jitter · N(0, 1))`,
    /// capped at full suppression.
    pub erd_jitter: f32,
    /// RMS of the class-locked evoked response relative to the unit background.
    #[serde(default)]
    pub evoked_scale: f32,
    /// Strength of the per-user spatial mixing distortion.
    pub user_offset_scale: f32,
    /// RMS of the per-user additive rhythm relative to the unit background.
    pub user_rhythm_scale: f32,
    pub seed: u64,
}

fn default_bands(k: usize) -> Vec<(f32, f32)> {
    (0..k)
        .map(|i| if (i / 2) % 2 == 0 { (8.0, 13.0) } else { (16.0, 26.0) })
        .collect()
}

impl SynthSpec {
    /// Desk-scale benchmark: 6 source users plus 1 target user, 8 channels,
    /// 512 samples at 128 Hz, 4 classes, 40 trials per class per user.
    pub fn desk(seed: u64) -> Self {
        SynthSpec {
            n_channels: 8,
            n_timepoints: 512,
            n_classes: 4,
            n_users: 7,
            trials_per_class_per_user: 40,
            sample_rate_hz: 128.0,
            class_band_hz: default_bands(4),
            rhythm_scale: 1.0,
            erd_depth: 0.7,
            erd_jitter: 0.5,
            evoked_scale: 0.1,
            user_offset_scale: 0.3,
            user_rhythm_scale: 0.5,
            seed,
        }
    }

    /// Shapes of a BNCI2014001-like recording: 22 channels, 512 samples, 4 classes.
    pub fn bnci_like(seed: u64) -> Self {
        SynthSpec {
            n_channels: 22,
            n_users: 9,
            trials_per_class_per_user: 144,
            ..Self::desk(seed)
        }
    }

    pub fn preset(name: &str, seed: u64) -> Option<Self> {
        match name {
            "desk" => Some(Self::desk(seed)),
            "bnci-like" => Some(Self::bnci_like(seed)),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.n_channels >= 1
                && self.n_timepoints >= 1
                && self.n_classes >= 1
                && self.n_users >= 1
                && self.trials_per_class_per_user >= 1,
            Validation,
            "all synthetic counts must be >= 1"
        );
        ensure!(
            self.sample_rate_hz > 0.0,
            Validation,
            "sample rate must be positive"
        );
        ensure!(
            self.class_band_hz.len() == self.n_classes,
            Validation,
            "{} class bands for {} classes",
            self.class_band_hz.len(),
            self.n_classes
        );
        let nyq = self.sample_rate_hz / 2.0;
        for &(lo, hi) in &self.class_band_hz {
            ensure!(
                lo > 0.0 && lo < hi && hi < nyq,
                Validation,
                "class band [{lo}, {hi}] invalid for Nyquist {nyq} Hz"
            );
        }
        ensure!(
            self.rhythm_scale > 0.0 && (0.0..=1.0).contains(&self.erd_depth) && self.erd_depth > 0.0,
            Validation,
            "rhythm scale must be positive and ERD depth in (0, 1]"
        );
        ensure!(
            self.erd_jitter >= 0.0
                && self.evoked_scale >= 0.0
                && self.user_offset_scale >= 0.0
                && self.user_rhythm_scale >= 0.0,
            Validation,
            "jitter and user scales must be non-negative"
        );
        Ok(())
    }

    /// Distinct class bands in first-use order, with each class's band index.
    fn band_table(&self) -> (Vec<(f32, f32)>, Vec<usize>) {
        let mut bands: Vec<(f32, f32)> = Vec::new();
        let mut of_class = Vec::with_capacity(self.n_classes);
        for &b in &self.class_band_hz {
            let i = match bands.iter().position(|&x| x == b) {
                Some(i) => i,
                None => {
                    bands.push(b);
                    bands.len() - 1
                }
            };
            of_class.push(i);
        }
        (bands, of_class)
    }
}

/// Channels whose rhythm class `k` suppresses.
fn class_channels(c: usize, k: usize) -> Vec<usize> {
    let n = (c / 4).max(1).min(c);
    (0..n).map(|j| (k * n + j) % c).collect()
}

struct UserModel {
    mixing: Vec<f64>,
    peak_hz: Vec<f64>,
    rhythm_freq: f64,
    rhythm_spatial: Vec<f64>,
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

fn unit_vector(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..n).map(|_| gaussian(rng)).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    v.into_iter().map(|x| x / norm).collect()
}

fn user_model(spec: &SynthSpec, bands: &[(f32, f32)], user: usize) -> UserModel {
    let c = spec.n_channels;
    let mut rng = SeedKey::new(spec.seed).with_str("user-model").with(user as u64).rng();
    let scale = f64::from(spec.user_offset_scale) / (c as f64).sqrt();
    let mut mixing = vec![0.0; c * c];
    for i in 0..c {
        for j in 0..c {
            mixing[i * c + j] = if i == j { 1.0 } else { 0.0 } + scale * gaussian(&mut rng);
        }
    }
    let peak_hz = bands
        .iter()
        .map(|&(lo, hi)| {
            let (lo, hi) = (f64::from(lo), f64::from(hi));
            lo + (hi - lo) * rng.gen_range(0.25..0.75)
        })
        .collect();
    let nyq = f64::from(spec.sample_rate_hz) / 2.0;
    let rhythm_freq = rng.gen_range(6.0f64.min(nyq * 0.5)..(34.0f64).min(nyq * 0.9));
    let rhythm_spatial = unit_vector(&mut rng, c);
    UserModel {
        mixing,
        peak_hz,
        rhythm_freq,
        rhythm_spatial,
    }
}

/// Class-locked evoked template of unit RMS, shared by every user: two
/// Gabor bursts in 8-30 Hz (capped below Nyquist) with fixed phase and
/// spatial pattern.
fn evoked_template(spec: &SynthSpec, class: usize) -> Vec<f64> {
    let (c, t) = (spec.n_channels, spec.n_timepoints);
    let fs = f64::from(spec.sample_rate_hz);
    let mut rng = SeedKey::new(spec.seed).with_str("evoked").with(class as u64).rng();
    let hi = 30.0f64.min(0.45 * fs);
    let lo = 8.0f64.min(0.5 * hi);
    let mut out = vec![0.0f64; c * t];
    for _ in 0..2 {
        let f = rng.gen_range(lo..hi);
        let phase = rng.gen_range(0.0..TWO_PI);
        let centre = rng.gen_range(0.3..0.7) * t as f64;
        let width = 0.2 * t as f64;
        let spatial = unit_vector(&mut rng, c);
        for (ch, &s) in spatial.iter().enumerate() {
            for k in 0..t {
                let z = (k as f64 - centre) / width;
                out[ch * t + k] += s * (-0.5 * z * z).exp() * (TWO_PI * f * k as f64 / fs + phase).sin();
            }
        }
    }
    let rms = (out.iter().map(|v| v * v).sum::<f64>() / out.len() as f64).sqrt().max(1e-12);
    out.iter_mut().for_each(|v| *v /= rms);
    out
}

/// Pink (1/f) noise via Kellet's filter bank, normalised to unit variance.
fn pink_noise(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let mut b = [0.0f64; 7];
    let burn = 256;
    let mut out = Vec::with_capacity(n);
    for i in 0..n + burn {
        let w = gaussian(rng);
        b[0] = 0.99886 * b[0] + w * 0.0555179;
        b[1] = 0.99332 * b[1] + w * 0.0750759;
        b[2] = 0.96900 * b[2] + w * 0.1538520;
        b[3] = 0.86650 * b[3] + w * 0.3104856;
        b[4] = 0.55000 * b[4] + w * 0.5329522;
        b[5] = -0.7616 * b[5] - w * 0.0168980;
        let p = b.iter().sum::<f64>() + w * 0.5362;
        b[6] = w * 0.115926;
        if i >= burn {
            out.push(p);
        }
    }
    let mean = out.iter().sum::<f64>() / n as f64;
    let sd = (out.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64)
        .sqrt()
        .max(1e-12);
    out.iter_mut().for_each(|v| *v = (*v - mean) / sd);
    out
}

/// Narrow-band rhythm of unit RMS: two beating components around `peak`.
fn rhythm(rng: &mut ChaCha8Rng, t: usize, fs: f64, peak: f64) -> Vec<f64> {
    let f0 = peak + PEAK_JITTER_HZ * gaussian(rng);
    let spread = rng.gen_range(0.2..0.8);
    let (f1, f2) = (f0 - spread / 2.0, f0 + spread / 2.0);
    let (p1, p2) = (rng.gen_range(0.0..TWO_PI), rng.gen_range(0.0..TWO_PI));
    (0..t)
        .map(|i| {
            let tt = i as f64 / fs;
            (TWO_PI * f1 * tt + p1).sin() + (TWO_PI * f2 * tt + p2).sin()
        })
        .collect()
}

fn synth_trial(
    spec: &SynthSpec,
    class_band: &[usize],
    n_bands: usize,
    user: &UserModel,
    evoked: &[f64],
    class: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<f32> {
    let (c, t) = (spec.n_channels, spec.n_timepoints);
    let fs = f64::from(spec.sample_rate_hz);
    let depth = (f64::from(spec.erd_depth) * (1.0 + f64::from(spec.erd_jitter) * gaussian(rng)).max(0.0)).min(1.0);
    let suppressed = class_channels(c, class);
    let mut latent = vec![0.0f64; c * t];
    for ch in 0..c {
        let pink = pink_noise(rng, t);
        let row = &mut latent[ch * t..(ch + 1) * t];
        for (i, v) in row.iter_mut().enumerate() {
            *v = 0.8 * pink[i] + 0.6 * gaussian(rng);
        }
        for band in 0..n_bands {
            let mut amp = f64::from(spec.rhythm_scale) * (1.0 + RHYTHM_AMPLITUDE_JITTER * gaussian(rng)).max(0.0);
            if class_band[class] == band && suppressed.contains(&ch) {
                amp *= 1.0 - depth;
            }
            // Two unit sinusoids have RMS 1 together.
            let wave = rhythm(rng, t, fs, user.peak_hz[band]);
            for (v, w) in row.iter_mut().zip(&wave) {
                *v += amp * w;
            }
        }
    }
    let ev = f64::from(spec.evoked_scale) * (1.0 + 0.2 * gaussian(rng));
    if ev != 0.0 {
        latent.iter_mut().zip(evoked).for_each(|(v, e)| *v += ev * e);
    }
    let mut out = vec![0.0f64; c * t];
    for i in 0..c {
        for j in 0..c {
            let m = user.mixing[i * c + j];
            if m == 0.0 {
                continue;
            }
            for k in 0..t {
                out[i * t + k] += m * latent[j * t + k];
            }
        }
    }
    let rhythm_amp = f64::from(spec.user_rhythm_scale)
        * (c as f64).sqrt()
        * std::f64::consts::SQRT_2
        * (1.0 + 0.1 * gaussian(rng));
    let rhythm_phase = rng.gen_range(0.0..TWO_PI);
    for i in 0..c {
        let s = rhythm_amp * user.rhythm_spatial[i];
        for k in 0..t {
            out[i * t + k] += s * (TWO_PI * user.rhythm_freq * k as f64 / fs + rhythm_phase).sin();
        }
    }
    out.into_iter().map(|v| (v * AMPLITUDE_UNITS) as f32).collect()
}

/// Deterministic synthetic trial set; trials are user-major and, within a
/// user, in a seeded random class order.
pub fn generate_synthetic(spec: &SynthSpec) -> Result<TrialSet> {
    spec.validate()?;
    let (bands, class_band) = spec.band_table();
    let evoked: Vec<Vec<f64>> = (0..spec.n_classes).map(|k| evoked_template(spec, k)).collect();
    let mut trials = Vec::with_capacity(spec.n_users * spec.n_classes * spec.trials_per_class_per_user);
    for u in 0..spec.n_users {
        let model = user_model(spec, &bands, u);
        let mut rng = SeedKey::new(spec.seed).with_str("user-trials").with(u as u64).rng();
        let mut order: Vec<usize> = (0..spec.n_classes)
            .flat_map(|k| std::iter::repeat(k).take(spec.trials_per_class_per_user))
            .collect();
        order.shuffle(&mut rng);
        for k in order {
            let data = synth_trial(spec, &class_band, bands.len(), &model, &evoked[k], k, &mut rng);
            let signal = Tensor::new(vec![spec.n_channels, spec.n_timepoints], data)?;
            trials.push(Trial::new(signal, (k + 1) as u16, (u + 1) as u16, spec.sample_rate_hz)?);
        }
    }
    TrialSet::new(
        format!("synthetic-seed{}", spec.seed),
        trials,
        spec.n_classes,
        spec.n_users,
    )
}

/// Class-to-channel layout of the generator, for documentation and tests.
pub fn class_channel_map(spec: &SynthSpec) -> BTreeMap<u16, Vec<usize>> {
    (0..spec.n_classes)
        .map(|k| ((k + 1) as u16, class_channels(spec.n_channels, k)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(seed: u64) -> SynthSpec {
        SynthSpec {
            n_users: 2,
            trials_per_class_per_user: 3,
            n_timepoints: 256,
            ..SynthSpec::desk(seed)
        }
    }

    #[test]
    fn deterministic_for_seed() {
        let a = generate_synthetic(&small(7)).unwrap();
        let b = generate_synthetic(&small(7)).unwrap();
        assert_eq!(a, b);
        let c = generate_synthetic(&small(8)).unwrap();
        assert_ne!(a.trials()[0].signal, c.trials()[0].signal);
    }

    #[test]
    fn bnci_like_shapes() {
        let s = SynthSpec::bnci_like(0);
        assert_eq!((s.n_channels, s.n_timepoints, s.n_classes), (22, 512, 4));
    }

    #[test]
    fn counts_and_labels() {
        let ts = generate_synthetic(&small(1)).unwrap();
        assert_eq!(ts.len(), 2 * 4 * 3);
        assert_eq!(ts.users(), vec![1, 2]);
        for k in 1..=4u16 {
            assert_eq!(ts.trials().iter().filter(|t| t.label == k).count(), 6);
        }
        // user-major ordering
        assert!(ts.trials()[..12].iter().all(|t| t.user == 1));
    }

    #[test]
    fn invalid_specs_rejected() {
        let mut s = small(0);
        s.erd_depth = 0.0;
        assert!(generate_synthetic(&s).is_err());
        let mut s = small(0);
        s.class_band_hz.pop();
        assert!(generate_synthetic(&s).is_err());
        let mut s = small(0);
        s.n_users = 0;
        assert!(generate_synthetic(&s).is_err());
    }
}
