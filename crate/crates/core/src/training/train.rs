use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::augment::augment_scale;
use super::optim::{Adam, AdamConfig};
use crate::adversarial::{pgd_batch, AttackConfig};
use crate::data::TrialSet;
use crate::error::{ensure, Error, Result};
use crate::model::{
    argmax_f32, bind_params, forward_tape, init_params, update_running_stats, Mode, Model, ModelConfig,
};
use crate::numerics::{GradTape, Tensor};
use crate::seed::SeedKey;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    /// Cross-entropy on clean batches.
    Ce,
    /// Cross-entropy on PGD counterparts of every batch.
    Adv,
    /// Adversarial target batch plus clean perturbed-source batch, summed.
    AdvPlusSource,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Augmentation {
    None,
    Scale { beta: f32 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f32,
    #[serde(default)]
    pub adam: AdamConfig,
    pub objective: Objective,
    pub augmentation: Augmentation,
    /// Train-time attack; its seed is replaced per step.
    pub attack: AttackConfig,
    pub seed: u64,
}

impl TrainConfig {
    /// Adam at 1e-3, batch 32, 50 epochs, clean CE, train-time ε = 0.03.
    pub fn new(seed: u64) -> Self {
        TrainConfig {
            epochs: 50,
            batch_size: 32,
            learning_rate: 1e-3,
            adam: AdamConfig::default(),
            objective: Objective::Ce,
            augmentation: Augmentation::None,
            attack: AttackConfig::pgd(0.03, 0),
            seed,
        }
    }

    pub fn with_objective(mut self, objective: Objective) -> Self {
        self.objective = objective;
        self
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        TrainConfig { seed, ..self.clone() }
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.batch_size >= 1, Validation, "batch size must be >= 1");
        ensure!(
            self.learning_rate.is_finite() && self.learning_rate >= 0.0,
            Validation,
            "learning rate must be finite and non-negative"
        );
        if let Augmentation::Scale { beta } = self.augmentation {
            ensure!((0.0..1.0).contains(&beta), Validation, "beta {beta} outside [0, 1)");
        }
        if self.objective != Objective::Ce {
            self.attack.validate()?;
        }
        Ok(())
    }
}

/// Per-epoch metrics; `accuracy` is measured on the training batches as
/// they were fed to the network in train mode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub model: Model,
    pub log: Vec<EpochLog>,
}

/// Where a training run starts from.
#[derive(Debug, Clone, Copy)]
pub enum Start<'a> {
    Pretrained(&'a Model),
    /// Fresh parameters initialized from the run's seed.
    Fresh(&'a ModelConfig),
}

pub(crate) fn check_compatible(cfg: &ModelConfig, ts: &TrialSet, what: &str) -> Result<()> {
    ensure!(
        ts.n_channels() == cfg.n_channels && ts.n_timepoints() == cfg.n_timepoints,
        Validation,
        "{what} trials are {}x{}, model expects {}x{}",
        ts.n_channels(),
        ts.n_timepoints(),
        cfg.n_channels,
        cfg.n_timepoints
    );
    ensure!(
        ts.n_classes() == cfg.n_classes,
        Validation,
        "{what} has {} classes, model has {}",
        ts.n_classes(),
        cfg.n_classes
    );
    Ok(())
}

fn labels_of(ts: &TrialSet, idx: &[usize]) -> Vec<u16> {
    idx.iter().map(|&i| ts.trials()[i].label).collect()
}

/// Cycles through a shuffled source set, reshuffling on every wrap.
struct SourceStream<'a> {
    ts: &'a TrialSet,
    order: Vec<usize>,
    pos: usize,
    pass: u64,
    seed: SeedKey,
}

impl<'a> SourceStream<'a> {
    fn new(ts: &'a TrialSet, seed: SeedKey) -> Self {
        let mut s = SourceStream {
            ts,
            order: (0..ts.len()).collect(),
            pos: 0,
            pass: 0,
            seed,
        };
        s.reshuffle();
        s
    }

    fn reshuffle(&mut self) {
        self.order.shuffle(&mut self.seed.with(self.pass).rng());
        self.pass += 1;
        self.pos = 0;
    }

    fn next_batch(&mut self, n: usize) -> Vec<usize> {
        let n = n.min(self.ts.len());
        let mut out = Vec::with_capacity(n);
        while out.len() < n {
            if self.pos == self.order.len() {
                self.reshuffle();
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

/// The shared training loop behind every objective.
///
/// Random streams (initialization, augmentation, shuffling, dropout, attack
/// starts, source batches) are derived independently from `cfg.seed`, so
/// switching the objective never shifts another stream.
pub fn train_model(
    start: Start<'_>,
    train_set: &TrialSet,
    cfg: &TrainConfig,
    perturbed_source: Option<&TrialSet>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let root = SeedKey::new(cfg.seed);
    let mut model = match start {
        Start::Pretrained(m) => m.clone(),
        Start::Fresh(mc) => Model::new(mc.clone(), init_params(mc, root.with_str("init").value())?),
    };
    let mcfg = model.config.clone();
    check_compatible(&mcfg, train_set, "training set")?;
    ensure!(!train_set.is_empty(), Validation, "training set is empty");
    let source = match (cfg.objective, perturbed_source) {
        (Objective::AdvPlusSource, Some(s)) => {
            check_compatible(&mcfg, s, "source set")?;
            ensure!(!s.is_empty(), Validation, "source set is empty");
            Some(s)
        }
        (Objective::AdvPlusSource, None) => {
            return Err(Error::Validation(
                "objective adv_plus_source requires a perturbed source set".into(),
            ))
        }
        (obj, Some(_)) => {
            return Err(Error::Validation(format!(
                "a source set was supplied but objective {obj:?} does not use one"
            )))
        }
        (_, None) => None,
    };
    let data = match cfg.augmentation {
        Augmentation::None => train_set.clone(),
        Augmentation::Scale { beta } => augment_scale(train_set, beta, root.with_str("augment").value())?,
    };

    let trainable = model.params.trainable_indices();
    let sizes: Vec<usize> = trainable.iter().map(|&i| model.params.tensor_at(i).len()).collect();
    let mut opt = Adam::new(cfg.adam, cfg.learning_rate, &sizes);
    let mut stream = source.map(|s| SourceStream::new(s, root.with_str("source")));
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut step: u64 = 0;

    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut root.with_str("shuffle").with(epoch as u64).rng());
        let (mut loss_sum, mut correct, mut seen, mut n_batches) = (0.0f64, 0usize, 0usize, 0usize);
        for idx in order.chunks(cfg.batch_size) {
            let (x, targets) = data.batch(idx)?;
            let x = match cfg.objective {
                Objective::Ce => x,
                Objective::Adv | Objective::AdvPlusSource => {
                    let atk = cfg.attack.with_seed(root.with_str("attack").with(step).value());
                    pgd_batch(&model, &x, &labels_of(&data, idx), &atk)?
                }
            };
            let mut tape = GradTape::new();
            let vars = bind_params(&mut tape, &model.params, true);
            let xv = tape.constant(x);
            let dropout = root.with_str("dropout").with(step);
            let mode = Mode::Train {
                dropout_seed: dropout.with(0).value(),
            };
            let fwd = forward_tape(&mut tape, &model.params, &mcfg, &vars, xv, mode)?;
            let mut loss = tape.softmax_cross_entropy(fwd.logits, &targets)?;
            let logits = tape.value(fwd.logits);
            correct += targets
                .iter()
                .enumerate()
                .filter(|&(bi, &y)| argmax_f32(logits.row(bi)) == y)
                .count();
            seen += targets.len();
            let mut stats = vec![fwd.bn_stats];
            if let Some(stream) = stream.as_mut() {
                let sidx = stream.next_batch(cfg.batch_size);
                let (sx, st) = stream.ts.batch(&sidx)?;
                let sv = tape.constant(sx);
                let mode = Mode::Train {
                    dropout_seed: dropout.with(1).value(),
                };
                let sf = forward_tape(&mut tape, &model.params, &mcfg, &vars, sv, mode)?;
                let sl = tape.softmax_cross_entropy(sf.logits, &st)?;
                loss = tape.add(loss, sl)?;
                stats.push(sf.bn_stats);
            }
            loss_sum += f64::from(tape.value(loss).data()[0]);
            let grads = tape.backward(loss)?;
            let g: Vec<Tensor> = trainable
                .iter()
                .map(|&i| grads.get(vars[i]).cloned())
                .collect::<Result<_>>()?;
            let gref: Vec<&Tensor> = g.iter().collect();
            opt.step(&mut model.params.trainable_refs_mut(), &gref);
            for s in &stats {
                update_running_stats(&mut model.params, &mcfg, s)?;
            }
            step += 1;
            n_batches += 1;
        }
        let entry = EpochLog {
            epoch,
            loss: loss_sum / n_batches.max(1) as f64,
            accuracy: 100.0 * correct as f64 / seen.max(1) as f64,
        };
        log::debug!("epoch {} loss {:.4} acc {:.1}", entry.epoch, entry.loss, entry.accuracy);
        log.push(entry);
    }
    Ok(TrainOutcome { model, log })
}

/// Trains `model` (already holding its starting parameters) on an aligned set.
pub fn train(
    model: &Model,
    train_set: &TrialSet,
    cfg: &TrainConfig,
    perturbed_source: Option<&TrialSet>,
) -> Result<Model> {
    Ok(train_model(Start::Pretrained(model), train_set, cfg, perturbed_source)?.model)
}

/// Same loop as [`train`], starting from a source checkpoint; all layers trainable.
pub fn fine_tune(checkpoint: &Model, calibration: &TrialSet, cfg: &TrainConfig) -> Result<Model> {
    train(checkpoint, calibration, cfg, None)
}
