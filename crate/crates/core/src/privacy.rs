//! User-wise source perturbations and the user-identity probe.
//!
//! Every trial of source user `u` receives the same additive pattern `Δ_u`.
//! Because `Δ_u` is perfectly consistent within a user and unrelated to the
//! task label, a model asked to recognise users latches onto it, while a task
//! classifier has no reason to use it.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::adversarial::channel_std;
use crate::data::{split_calibration, TrialSet};
use crate::error::{ensure, Error, Result};
use crate::model::{Classifier, ModelConfig};
use crate::numerics::Tensor;
use crate::seed::SeedKey;
use crate::training::{train_model, Start, TrainConfig};

const TWO_PI: f64 = 2.0 * std::f64::consts::PI;
const N_COMPONENTS: usize = 3;

/// Default perturbation amplitude relative to the median channel std.
pub const DEFAULT_RHO: f32 = 0.3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserPerturbation {
    pub deltas: BTreeMap<u16, Tensor>,
    pub rho: f32,
    /// The elementwise bound `rho · median channel std` every `Δ_u` obeys.
    pub bound: f32,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerturbConfig {
    pub rho: f32,
    /// Band the sinusoid frequencies are drawn from, Hz.
    pub band_hz: (f32, f32),
    pub seed: u64,
}

impl PerturbConfig {
    pub fn new(seed: u64) -> Self {
        PerturbConfig {
            rho: DEFAULT_RHO,
            band_hz: (8.0, 30.0),
            seed,
        }
    }
}

/// Median over channels of the per-channel std, pooled over all trials.
fn median_channel_std(ts: &TrialSet) -> Result<f64> {
    let c = ts.n_channels();
    let mut acc = vec![0.0f64; c];
    for tr in ts.trials() {
        for (a, s) in acc.iter_mut().zip(channel_std(&tr.signal)?.data()) {
            *a += f64::from(*s).powi(2);
        }
    }
    let mut sd: Vec<f64> = acc.into_iter().map(|v| (v / ts.len() as f64).sqrt()).collect();
    sd.sort_by(f64::total_cmp);
    Ok(if c % 2 == 1 {
        sd[c / 2]
    } else {
        0.5 * (sd[c / 2 - 1] + sd[c / 2])
    })
}

fn user_pattern(c: usize, t: usize, fs: f64, band: (f32, f32), seed: u64, user: u16) -> Vec<f64> {
    let mut rng = SeedKey::new(seed).with_str("user-perturbation").with(u64::from(user)).rng();
    let mut out = vec![0.0f64; c * t];
    for _ in 0..N_COMPONENTS {
        let f = rng.gen_range(f64::from(band.0)..f64::from(band.1));
        let phase = rng.gen_range(0.0..TWO_PI);
        let spatial: Vec<f64> = (0..c).map(|_| rng.sample(StandardNormal)).collect();
        for (ch, &s) in spatial.iter().enumerate() {
            for k in 0..t {
                out[ch * t + k] += s * (TWO_PI * f * k as f64 / fs + phase).sin();
            }
        }
    }
    out
}

/// One structured pattern per source user: three sinusoids at user-derived
/// frequencies with random spatial weights, scaled so that
/// `max |Δ_u| = rho · median channel std` of `source`.
pub fn generate_user_perturbations(source: &TrialSet, cfg: &PerturbConfig) -> Result<UserPerturbation> {
    ensure!(!source.is_empty(), Validation, "source set is empty");
    ensure!(
        cfg.rho.is_finite() && cfg.rho > 0.0,
        Validation,
        "rho must be positive, got {}",
        cfg.rho
    );
    let fs = f64::from(source.sample_rate_hz().unwrap_or(0.0));
    let (lo, hi) = cfg.band_hz;
    ensure!(
        lo > 0.0 && lo < hi && f64::from(hi) < fs / 2.0,
        Validation,
        "perturbation band [{lo}, {hi}] Hz invalid for sample rate {fs}"
    );
    let (c, t) = (source.n_channels(), source.n_timepoints());
    let bound64 = f64::from(cfg.rho) * median_channel_std(source)?;
    ensure!(bound64 > 0.0, Numeric, "source channels have zero variance");
    let bound = bound64 as f32;
    let mut deltas = BTreeMap::new();
    for u in source.users() {
        let p = user_pattern(c, t, fs, cfg.band_hz, cfg.seed, u);
        let peak = p.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(f64::MIN_POSITIVE);
        let data = p
            .iter()
            .map(|v| ((v / peak * bound64) as f32).clamp(-bound, bound))
            .collect();
        deltas.insert(u, Tensor::from_parts(vec![c, t], data)?);
    }
    Ok(UserPerturbation {
        deltas,
        rho: cfg.rho,
        bound,
        seed: cfg.seed,
    })
}

/// `X̃ = X + Δ_u` for every trial.
pub fn apply_perturbations(source: &TrialSet, p: &UserPerturbation) -> Result<TrialSet> {
    let trials = source
        .trials()
        .iter()
        .map(|tr| {
            let d = p
                .deltas
                .get(&tr.user)
                .ok_or_else(|| Error::Validation(format!("no perturbation for user {}", tr.user)))?;
            Ok(tr.with_signal(tr.signal.add(d)?))
        })
        .collect::<Result<Vec<_>>>()?;
    source.derive(format!("{}-perturbed", source.name()), trials)
}

/// Per-user chronological split into `(first half, second half)`.
pub fn split_per_user(ts: &TrialSet, fraction: f64) -> Result<(TrialSet, TrialSet)> {
    let (mut a, mut b) = (Vec::new(), Vec::new());
    for u in ts.users() {
        let own: Vec<_> = ts.trials().iter().filter(|t| t.user == u).cloned().collect();
        let (x, y) = split_calibration(&ts.derive("user", own)?, fraction)?;
        a.extend(x.into_trials());
        b.extend(y.into_trials());
    }
    Ok((
        ts.derive(format!("{}-first", ts.name()), a)?,
        ts.derive(format!("{}-rest", ts.name()), b)?,
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    /// Architecture template; the class count is replaced by the number of users.
    pub model: ModelConfig,
    pub train: TrainConfig,
}

/// Trains the standard network to predict user identity on `train` and
/// returns its accuracy (%) on `test`.
pub fn user_id_probe(train: &TrialSet, test: &TrialSet, cfg: &ProbeConfig) -> Result<f64> {
    let users = train.users();
    ensure!(users.len() >= 2, Validation, "user probe needs at least 2 users, got {}", users.len());
    ensure!(!test.is_empty(), Validation, "probe test set is empty");
    let index: BTreeMap<u16, u16> = users.iter().enumerate().map(|(i, &u)| (u, i as u16 + 1)).collect();
    for tr in test.trials() {
        ensure!(
            index.contains_key(&tr.user),
            Validation,
            "test user {} is not present in the probe training set",
            tr.user
        );
    }
    let k = users.len();
    let relabel = |ts: &TrialSet, name: &str| ts.relabel(name, |t| index[&t.user], k);
    let train_ids = relabel(train, "probe-train")?;
    let test_ids = relabel(test, "probe-test")?;
    let mut mc = cfg.model.clone();
    mc.n_classes = k;
    let model = train_model(Start::Fresh(&mc), &train_ids, &cfg.train, None)?.model;
    let (x, _) = test_ids.full_batch()?;
    let pred = model.predict(&x)?;
    let hits = pred.iter().zip(test_ids.trials()).filter(|(p, t)| **p == t.label).count();
    Ok(100.0 * hits as f64 / test_ids.len() as f64)
}
