use serde::{Deserialize, Serialize};

use super::config::EvalGrid;
use crate::adversarial::{noisy_sample, pgd_batch, AttackConfig, NoiseConfig};
use crate::alignment::{apply_alignment, AlignmentState};
use crate::data::TrialSet;
use crate::error::{ensure, Result};
use crate::model::Classifier;
use crate::numerics::Tensor;
use crate::seed::SeedKey;

/// Aligned target trials reserved for evaluation.
///
/// The only way in is [`HeldOut::align`], which applies an alignment fitted
/// elsewhere; the wrapped trials are never handed out, so nothing can be
/// fitted on them.
#[derive(Debug, Clone)]
pub struct HeldOut {
    set: TrialSet,
    alignment_trials: usize,
}

impl HeldOut {
    pub fn align(state: &AlignmentState, raw: &TrialSet) -> Result<Self> {
        ensure!(!raw.is_empty(), Validation, "held-out set is empty");
        Ok(HeldOut {
            set: apply_alignment(state, raw)?,
            alignment_trials: state.n_trials_used,
        })
    }

    pub fn len(&self) -> usize {
        self.set.len()
    }

    pub fn is_empty(&self) -> bool {
        self.set.is_empty()
    }

    pub fn n_classes(&self) -> usize {
        self.set.n_classes()
    }

    /// Number of trials the applied alignment was fitted on.
    pub fn alignment_trials(&self) -> usize {
        self.alignment_trials
    }

    pub fn labels(&self) -> Vec<u16> {
        self.set.trials().iter().map(|t| t.label).collect()
    }

    pub(crate) fn inputs(&self) -> Result<Tensor> {
        Ok(self.set.full_batch()?.0)
    }

    pub(crate) fn trial_inputs(&self) -> impl Iterator<Item = &Tensor> {
        self.set.trials().iter().map(|t| &t.signal)
    }
}

/// Accuracy (%) at one perturbation magnitude.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Score {
    pub magnitude: f32,
    pub accuracy: f64,
}

/// Benign, adversarial and noisy accuracies of one model on one held-out set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub benign: f64,
    pub adversarial: Vec<Score>,
    pub noisy: Vec<Score>,
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        s / n as f64
    }
}

impl EvalRow {
    pub fn adversarial_mean(&self) -> f64 {
        mean(self.adversarial.iter().map(|s| s.accuracy))
    }

    pub fn noisy_mean(&self) -> f64 {
        mean(self.noisy.iter().map(|s| s.accuracy))
    }

    /// Mean of the benign, adversarial and noisy columns.
    pub fn avg(&self) -> f64 {
        (self.benign + self.adversarial_mean() + self.noisy_mean()) / 3.0
    }
}

fn accuracy(pred: &[u16], labels: &[u16]) -> f64 {
    let hits = pred.iter().zip(labels).filter(|(p, y)| p == y).count();
    100.0 * hits as f64 / labels.len() as f64
}

/// Runs the benign / white-box PGD / uniform-noise protocol.
///
/// PGD targets `model` itself, so an ensemble is attacked through its averaged
/// output. Noise draw `d` at magnitude index `j` perturbs trial `i` with seed
/// `(seed, "noise", j, d, i)`; the attack at index `j` uses `(seed, "attack", j)`.
pub fn evaluate_model(model: &dyn Classifier, test: &HeldOut, grid: &EvalGrid, seed: u64) -> Result<EvalRow> {
    grid.validate()?;
    ensure!(!test.is_empty(), Validation, "held-out set is empty");
    let labels = test.labels();
    let x = test.inputs()?;
    let benign = accuracy(&model.predict(&x)?, &labels);
    let root = SeedKey::new(seed);
    let mut adversarial = Vec::with_capacity(grid.epsilons.len());
    for (j, &eps) in grid.epsilons.iter().enumerate() {
        let atk = AttackConfig {
            epsilon: eps,
            alpha: grid.attack_alpha,
            steps: grid.attack_steps,
            random_start: true,
            seed: root.with_str("attack").with(j as u64).value(),
        };
        let adv = pgd_batch(model, &x, &labels, &atk)?;
        adversarial.push(Score {
            magnitude: eps,
            accuracy: accuracy(&model.predict(&adv)?, &labels),
        });
    }
    let (c, t) = (x.shape()[1], x.shape()[2]);
    let mut noisy = Vec::with_capacity(grid.etas.len());
    for (j, &eta) in grid.etas.iter().enumerate() {
        let mut draws = Vec::with_capacity(grid.noise_draws);
        for d in 0..grid.noise_draws {
            let key = root.with_str("noise").with(j as u64).with(d as u64);
            let mut data = Vec::with_capacity(x.len());
            for (i, tr) in test.trial_inputs().enumerate() {
                let nz = NoiseConfig {
                    eta,
                    seed: key.with(i as u64).value(),
                };
                data.extend_from_slice(noisy_sample(tr, &nz)?.data());
            }
            let xn = Tensor::from_parts(vec![labels.len(), c, t], data)?;
            draws.push(accuracy(&model.predict(&xn)?, &labels));
        }
        noisy.push(Score {
            magnitude: eta,
            accuracy: mean(draws.into_iter()),
        });
    }
    Ok(EvalRow {
        benign,
        adversarial,
        noisy,
    })
}
