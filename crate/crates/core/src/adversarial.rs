//! Projected gradient descent attacks inside per-channel ℓ∞ balls, and the
//! uniform-noise perturbation used for robustness evaluation.
//!
//! Radii are expressed in units of each channel's standard deviation in the
//! benign trial: channel `i` may move by at most `ε·σ_i`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::model::{Classifier, EVAL_BATCH};
use crate::numerics::{sign, GradTape, Tensor};
use crate::seed::SeedKey;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    pub epsilon: f32,
    /// Step size; `None` means `epsilon / 4`.
    #[serde(default)]
    pub alpha: Option<f32>,
    pub steps: usize,
    pub random_start: bool,
    pub seed: u64,
}

impl AttackConfig {
    /// Ten steps of size `ε/4` from a uniform random start.
    pub fn pgd(epsilon: f32, seed: u64) -> Self {
        AttackConfig {
            epsilon,
            alpha: None,
            steps: 10,
            random_start: true,
            seed,
        }
    }

    pub fn step_size(&self) -> f32 {
        self.alpha.unwrap_or(self.epsilon / 4.0)
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        AttackConfig { seed, ..self.clone() }
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.epsilon.is_finite() && self.epsilon >= 0.0,
            Validation,
            "epsilon must be a finite non-negative number, got {}",
            self.epsilon
        );
        let a = self.step_size();
        ensure!(
            a.is_finite() && a >= 0.0 && a <= self.epsilon,
            Validation,
            "step size {a} must lie in [0, epsilon = {}]",
            self.epsilon
        );
        ensure!(self.steps >= 1, Validation, "PGD needs at least one step");
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseConfig {
    pub eta: f32,
    pub seed: u64,
}

impl NoiseConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.eta.is_finite() && self.eta >= 0.0,
            Validation,
            "eta must be a finite non-negative number, got {}",
            self.eta
        );
        Ok(())
    }
}

/// Population standard deviation of each row of a `c × t` trial.
pub fn channel_std(x: &Tensor) -> Result<Tensor> {
    let (c, t) = x.dims2()?;
    ensure!(t >= 2, Validation, "channel std needs at least 2 samples, got {t}");
    let std = (0..c)
        .map(|i| {
            let row = x.row(i);
            let mean = row.iter().map(|&v| f64::from(v)).sum::<f64>() / t as f64;
            let var = row.iter().map(|&v| (f64::from(v) - mean).powi(2)).sum::<f64>() / t as f64;
            var.sqrt() as f32
        })
        .collect();
    Tensor::from_parts(vec![c], std)
}

/// Per-channel radius `scale · σ_i`, rounded to `f32` once and used for
/// both sampling and containment.
pub fn channel_radii(x: &Tensor, scale: f32) -> Result<Vec<f32>> {
    Ok(channel_std(x)?.data().iter().map(|&s| scale * s).collect())
}

/// Clamps `v` into `[x − r, x + r]` such that `|out − x| ≤ r` holds exactly
/// when evaluated in `f64`; `x ± r` itself may round outside the ball.
pub fn project(v: f32, x: f32, r: f32) -> f32 {
    let mut out = v.clamp(x - r, x + r);
    while (f64::from(out) - f64::from(x)).abs() > f64::from(r) {
        out = if out > x { out.next_down() } else { out.next_up() };
    }
    out
}

fn attack_chunk(
    model: &dyn Classifier,
    x: &[f32],
    b: usize,
    targets: &[usize],
    atk: &AttackConfig,
    first_index: usize,
) -> Result<Vec<f32>> {
    let (c, t) = model.input_shape();
    let per = c * t;
    let mut radius = Vec::with_capacity(b * c);
    let mut step = Vec::with_capacity(b * c);
    for i in 0..b {
        let trial = Tensor::from_parts(vec![c, t], x[i * per..(i + 1) * per].to_vec())?;
        let std = channel_std(&trial)?;
        radius.extend(std.data().iter().map(|&s| atk.epsilon * s));
        step.extend(std.data().iter().map(|&s| atk.step_size() * s));
    }
    let mut adv = x.to_vec();
    if atk.random_start {
        for i in 0..b {
            let mut rng = SeedKey::new(atk.seed).with((first_index + i) as u64).rng();
            for ch in 0..c {
                let r = radius[i * c + ch];
                let o = i * per + ch * t;
                for k in o..o + t {
                    let xi = if r > 0.0 { rng.gen_range(-r..r) } else { 0.0 };
                    adv[k] = project(x[k] + xi, x[k], r);
                }
            }
        }
    }
    for _ in 0..atk.steps {
        let mut tape = GradTape::new();
        let xv = tape.leaf(Tensor::from_parts(vec![b, c, t], adv.clone())?, true);
        let loss = model.attack_loss(&mut tape, xv, targets)?;
        let grads = tape.backward(loss)?;
        let g = grads.get(xv)?.data();
        for i in 0..b {
            for ch in 0..c {
                let (r, a) = (radius[i * c + ch], step[i * c + ch]);
                let o = i * per + ch * t;
                for k in o..o + t {
                    adv[k] = project(adv[k] + a * sign(g[k]), x[k], r);
                }
            }
        }
    }
    Ok(adv)
}

/// PGD on a `(b, c, t)` batch with 1-based `labels`; processed in chunks of
/// [`EVAL_BATCH`], trial `i` drawing its random start from `(seed, i)`.
pub fn pgd_batch(model: &dyn Classifier, batch: &Tensor, labels: &[u16], atk: &AttackConfig) -> Result<Tensor> {
    atk.validate()?;
    let (c, t) = model.input_shape();
    ensure!(
        batch.ndim() == 3 && batch.shape()[1..] == [c, t],
        Validation,
        "attack batch {:?} does not match model input ({c}, {t})",
        batch.shape()
    );
    let b = batch.shape()[0];
    ensure!(labels.len() == b, Dimension, "{} labels for {b} trials", labels.len());
    let k = model.n_classes();
    ensure!(
        labels.iter().all(|&y| y >= 1 && usize::from(y) <= k),
        Validation,
        "labels must lie in 1..={k}"
    );
    let per = c * t;
    let mut out = Vec::with_capacity(batch.len());
    for start in (0..b).step_by(EVAL_BATCH) {
        let end = (start + EVAL_BATCH).min(b);
        let targets: Vec<usize> = labels[start..end].iter().map(|&y| usize::from(y) - 1).collect();
        out.extend(attack_chunk(
            model,
            &batch.data()[start * per..end * per],
            end - start,
            &targets,
            atk,
            start,
        )?);
    }
    Tensor::from_parts(batch.shape().to_vec(), out)
}

/// PGD adversarial example for one `c × t` trial with 1-based label `y`.
pub fn pgd_attack(model: &dyn Classifier, x: &Tensor, y: u16, atk: &AttackConfig) -> Result<Tensor> {
    let (c, t) = x.dims2()?;
    let batch = x.reshape(&[1, c, t])?;
    pgd_batch(model, &batch, &[y], atk)?.into_shape(&[c, t])
}

/// `X + η · σ_i · U(−1, 1)` applied row-wise.
pub fn noisy_sample(x: &Tensor, nz: &NoiseConfig) -> Result<Tensor> {
    nz.validate()?;
    let (c, t) = x.dims2()?;
    let radii = channel_radii(x, nz.eta)?;
    let mut rng = SeedKey::new(nz.seed).rng();
    let mut out = x.data().to_vec();
    for (ch, &r) in radii.iter().enumerate() {
        for v in &mut out[ch * t..(ch + 1) * t] {
            let u: f64 = rng.gen_range(-1.0..=1.0);
            let orig = *v;
            *v = project((f64::from(orig) + u * f64::from(r)) as f32, orig, r);
        }
    }
    Tensor::from_parts(vec![c, t], out)
}
