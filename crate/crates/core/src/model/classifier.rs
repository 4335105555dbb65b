use super::config::ModelConfig;
use super::net::{bind_params, forward_tape, predict_logits, softmax, Mode};
use super::params::ModelParams;
use crate::error::Result;
use crate::numerics::{GradTape, Tensor, Var};

/// Anything that maps a `(b, c, t)` batch to class probabilities and can
/// expose a differentiable loss with respect to its input.
pub trait Classifier {
    fn input_shape(&self) -> (usize, usize);

    fn n_classes(&self) -> usize;

    /// Evaluation-mode loss of `x` against zero-based `targets`, recorded on
    /// `tape` so its gradient with respect to `x` can be taken.
    fn attack_loss(&self, tape: &mut GradTape, x: Var, targets: &[usize]) -> Result<Var>;

    fn predict_proba(&self, batch: &Tensor) -> Result<Vec<Vec<f64>>>;

    /// Arg-max labels (1-based); ties go to the lowest class index.
    fn predict(&self, batch: &Tensor) -> Result<Vec<u16>> {
        Ok(self.predict_proba(batch)?.iter().map(|p| argmax(p) as u16 + 1).collect())
    }
}

pub(crate) fn argmax(p: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in p.iter().enumerate() {
        if v > p[best] {
            best = i;
        }
    }
    best
}

pub(crate) fn argmax_f32(p: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in p.iter().enumerate() {
        if v > p[best] {
            best = i;
        }
    }
    best
}

/// A single network together with its configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ModelParams,
}

impl Model {
    pub fn new(config: ModelConfig, params: ModelParams) -> Self {
        Model { config, params }
    }

    pub fn logits(&self, batch: &Tensor) -> Result<Tensor> {
        predict_logits(&self.params, &self.config, batch)
    }
}

impl Classifier for Model {
    fn input_shape(&self) -> (usize, usize) {
        (self.config.n_channels, self.config.n_timepoints)
    }

    fn n_classes(&self) -> usize {
        self.config.n_classes
    }

    fn attack_loss(&self, tape: &mut GradTape, x: Var, targets: &[usize]) -> Result<Var> {
        let vars = bind_params(tape, &self.params, false);
        let out = forward_tape(tape, &self.params, &self.config, &vars, x, Mode::Eval)?;
        tape.softmax_cross_entropy(out.logits, targets)
    }

    fn predict_proba(&self, batch: &Tensor) -> Result<Vec<Vec<f64>>> {
        softmax(&self.logits(batch)?)
    }
}
