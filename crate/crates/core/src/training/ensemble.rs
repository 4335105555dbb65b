use super::train::{train_model, Start, TrainConfig};
use crate::data::TrialSet;
use crate::error::{ensure, Result};
use crate::model::{bind_params, forward_tape, softmax, Classifier, Mode, Model};
use crate::numerics::{GradTape, Tensor, Var};

/// Members trained from different seeds; predictions average member softmax outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleModel {
    members: Vec<Model>,
}

impl EnsembleModel {
    pub fn new(members: Vec<Model>) -> Result<Self> {
        ensure!(!members.is_empty(), Validation, "an ensemble needs at least one member");
        let c0 = &members[0].config;
        ensure!(
            members.iter().all(|m| m.config.n_channels == c0.n_channels
                && m.config.n_timepoints == c0.n_timepoints
                && m.config.n_classes == c0.n_classes),
            Validation,
            "ensemble members must share (c, t, K)"
        );
        Ok(EnsembleModel { members })
    }

    pub fn members(&self) -> &[Model] {
        &self.members
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }
}

impl Classifier for EnsembleModel {
    fn input_shape(&self) -> (usize, usize) {
        self.members[0].input_shape()
    }

    fn n_classes(&self) -> usize {
        self.members[0].n_classes()
    }

    fn attack_loss(&self, tape: &mut GradTape, x: Var, targets: &[usize]) -> Result<Var> {
        let mut logits = Vec::with_capacity(self.members.len());
        for m in &self.members {
            let vars = bind_params(tape, &m.params, false);
            logits.push(forward_tape(tape, &m.params, &m.config, &vars, x, Mode::Eval)?.logits);
        }
        tape.mean_softmax_nll(&logits, targets)
    }

    fn predict_proba(&self, batch: &Tensor) -> Result<Vec<Vec<f64>>> {
        let mut acc: Option<Vec<Vec<f64>>> = None;
        for m in &self.members {
            let p = softmax(&m.logits(batch)?)?;
            match acc.as_mut() {
                None => acc = Some(p),
                Some(a) => a.iter_mut().zip(&p).for_each(|(ar, pr)| {
                    ar.iter_mut().zip(pr).for_each(|(x, y)| *x += y);
                }),
            }
        }
        let n = self.members.len() as f64;
        let mut acc = acc.unwrap_or_default();
        acc.iter_mut().flatten().for_each(|v| *v /= n);
        Ok(acc)
    }
}

/// Member `i` runs the training loop with seed `base_seed + i`; all other
/// settings come from `cfg`.
pub fn train_ensemble(
    n_members: usize,
    base_seed: u64,
    start: Start<'_>,
    train_set: &TrialSet,
    cfg: &TrainConfig,
    perturbed_source: Option<&TrialSet>,
) -> Result<EnsembleModel> {
    ensure!(n_members >= 1, Validation, "n_members must be >= 1");
    let members = (0..n_members)
        .map(|i| {
            let c = cfg.with_seed(base_seed.wrapping_add(i as u64));
            Ok(train_model(start, train_set, &c, perturbed_source)?.model)
        })
        .collect::<Result<Vec<_>>>()?;
    EnsembleModel::new(members)
}

/// Arg-max of the mean member softmax (1-based); ties go to the lowest class.
pub fn ensemble_predict(ens: &EnsembleModel, batch: &Tensor) -> Result<Vec<u16>> {
    ens.predict(batch)
}
