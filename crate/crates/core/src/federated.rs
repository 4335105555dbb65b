//! Simulated federated pretraining: per-user clients refine the global model
//! on their own trials and a server aggregates the returned parameters.
//!
//! Clients only ever hand back a [`ClientUpdate`]; raw trials stay inside
//! [`client_round`].

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::TrialSet;
use crate::error::{ensure, Result};
use crate::model::{init_params, BnMode, Classifier, Model, ModelConfig, ModelParams};
use crate::numerics::Tensor;
use crate::seed::SeedKey;
use crate::training::{train_model, Start, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BnPolicy {
    /// Running statistics stay with each client and are never averaged.
    ExcludeBnStats,
    /// Running statistics are averaged like every other tensor.
    IncludeAll,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FedConfig {
    pub rounds: usize,
    pub local_epochs: usize,
    pub client_fraction: f64,
    pub bn_policy: BnPolicy,
    pub seed: u64,
    /// Local optimisation settings; `epochs` and `seed` are overridden per round.
    pub train: TrainConfig,
}

impl FedConfig {
    pub fn new(seed: u64) -> Self {
        FedConfig {
            rounds: 10,
            local_epochs: 2,
            client_fraction: 1.0,
            bn_policy: BnPolicy::ExcludeBnStats,
            seed,
            train: TrainConfig::new(seed),
        }
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.rounds >= 1, Validation, "federated training needs at least one round");
        ensure!(
            self.client_fraction > 0.0 && self.client_fraction <= 1.0,
            Validation,
            "client fraction {} outside (0, 1]",
            self.client_fraction
        );
        self.train.validate()
    }
}

/// What a client sends back to the server.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientUpdate {
    pub client_id: u16,
    pub params: ModelParams,
    pub n_samples: usize,
    /// Mean loss of the last local epoch, if any epoch ran.
    pub local_loss: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientLoss {
    pub client_id: u16,
    pub loss: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundLog {
    pub round: usize,
    pub selected: Vec<u16>,
    pub client_loss: Vec<ClientLoss>,
    /// Accuracy (%) of the global model on the probe set, when one is given.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub global_metric: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FedOutcome {
    pub model: Model,
    pub log: Vec<RoundLog>,
}

/// Groups trials by user, keeping chronological order within each user.
pub fn partition_by_user(ts: &TrialSet) -> Result<BTreeMap<u16, TrialSet>> {
    ensure!(!ts.is_empty(), Validation, "cannot partition an empty trial set");
    let mut groups: BTreeMap<u16, Vec<_>> = BTreeMap::new();
    for tr in ts.trials() {
        groups.entry(tr.user).or_default().push(tr.clone());
    }
    groups
        .into_iter()
        .map(|(u, trials)| Ok((u, ts.derive(format!("{}-user{u}", ts.name()), trials)?)))
        .collect()
}

/// Seed of the local training run of `client_id` in `round`.
pub fn client_seed(fed_seed: u64, round: usize, client_id: u16) -> u64 {
    SeedKey::new(fed_seed)
        .with_str("client")
        .with(round as u64)
        .with(u64::from(client_id))
        .value()
}

/// Runs `local_epochs` of the ordinary training loop from `global` on one
/// client's (already aligned) trials.
pub fn client_round(
    global: &Model,
    local: &TrialSet,
    cfg: &FedConfig,
    client_id: u16,
    round: usize,
) -> Result<ClientUpdate> {
    ensure!(!local.is_empty(), Validation, "client {client_id} has no local trials");
    let mut tc = cfg.train.with_seed(client_seed(cfg.seed, round, client_id));
    tc.epochs = cfg.local_epochs;
    let out = train_model(Start::Pretrained(global), local, &tc, None)?;
    Ok(ClientUpdate {
        client_id,
        params: out.model.params,
        n_samples: local.len(),
        local_loss: out.log.last().map(|e| e.loss),
    })
}

/// Sample-weighted average of client parameters, reduced in ascending
/// `client_id` order. Under [`BnPolicy::ExcludeBnStats`] the running
/// statistics of `global` are copied through untouched.
pub fn aggregate(global: &ModelParams, updates: &[ClientUpdate], policy: BnPolicy) -> Result<ModelParams> {
    ensure!(!updates.is_empty(), Validation, "aggregation needs at least one update");
    let mut sorted: Vec<&ClientUpdate> = updates.iter().collect();
    sorted.sort_by_key(|u| u.client_id);
    for u in &sorted {
        ensure!(u.n_samples >= 1, Validation, "client {} reported no samples", u.client_id);
        ensure!(
            u.params.len() == global.len(),
            Dimension,
            "client {} sent {} tensors, global model has {}",
            u.client_id,
            u.params.len(),
            global.len()
        );
        for ((gn, gt), (un, ut)) in global.tensors().iter().zip(u.params.tensors()) {
            ensure!(
                gn == un && gt.shape() == ut.shape(),
                Dimension,
                "client {} tensor '{un}' {:?} does not match global '{gn}' {:?}",
                u.client_id,
                ut.shape(),
                gt.shape()
            );
        }
    }
    let total: f64 = sorted.iter().map(|u| u.n_samples as f64).sum();
    let mut out = global.clone();
    for (i, (name, gt)) in global.tensors().iter().enumerate() {
        if policy == BnPolicy::ExcludeBnStats && ModelParams::is_bn_stat(name) {
            continue;
        }
        let mut acc = vec![0.0f64; gt.len()];
        for u in &sorted {
            let w = u.n_samples as f64;
            for (a, &v) in acc.iter_mut().zip(u.params.tensor_at(i).data()) {
                *a += w * f64::from(v);
            }
        }
        let data = acc.into_iter().map(|a| (a / total) as f32).collect();
        *out.tensor_at_mut(i) = Tensor::from_parts(gt.shape().to_vec(), data)?;
    }
    Ok(out)
}

fn with_stats_of(global: &ModelParams, stats_from: &ModelParams) -> ModelParams {
    let mut p = global.clone();
    for (i, (name, _)) in global.tensors().iter().enumerate() {
        if ModelParams::is_bn_stat(name) {
            *p.tensor_at_mut(i) = stats_from.tensor_at(i).clone();
        }
    }
    p
}

fn probe_accuracy(model: &Model, probe: &TrialSet) -> Result<f64> {
    let (x, _) = probe.full_batch()?;
    let pred = model.predict(&x)?;
    let hits = pred.iter().zip(probe.trials()).filter(|(p, t)| **p == t.label).count();
    Ok(100.0 * hits as f64 / probe.len() as f64)
}

/// Federated pretraining over the users of `source`. The returned model is
/// flagged to normalize with batch statistics at evaluation time.
pub fn federated_pretrain(
    source: &TrialSet,
    model_cfg: &ModelConfig,
    cfg: &FedConfig,
    probe: Option<&TrialSet>,
) -> Result<FedOutcome> {
    cfg.validate()?;
    let clients = partition_by_user(source)?;
    let ids: Vec<u16> = clients.keys().copied().collect();
    let n_select = ((cfg.client_fraction * ids.len() as f64).ceil() as usize).clamp(1, ids.len());
    let init_seed = SeedKey::new(cfg.seed).with_str("global-init").value();
    let mut global = Model::new(model_cfg.clone(), init_params(model_cfg, init_seed)?);
    let mut client_stats: BTreeMap<u16, ModelParams> = BTreeMap::new();
    let mut log = Vec::with_capacity(cfg.rounds);
    for round in 0..cfg.rounds {
        let mut selected = ids.clone();
        selected.shuffle(&mut SeedKey::new(cfg.seed).with_str("select").with(round as u64).rng());
        selected.truncate(n_select);
        selected.sort_unstable();
        let mut updates = Vec::with_capacity(selected.len());
        for &id in &selected {
            let start = match (cfg.bn_policy, client_stats.get(&id)) {
                (BnPolicy::ExcludeBnStats, Some(own)) => {
                    Model::new(global.config.clone(), with_stats_of(&global.params, own))
                }
                _ => global.clone(),
            };
            let update = client_round(&start, &clients[&id], cfg, id, round)?;
            if cfg.bn_policy == BnPolicy::ExcludeBnStats {
                client_stats.insert(id, update.params.clone());
            }
            updates.push(update);
        }
        global.params = aggregate(&global.params, &updates, cfg.bn_policy)?;
        let global_metric = match probe {
            Some(p) => {
                let eval = Model::new(global.config.clone().with_bn_mode(BnMode::Batch), global.params.clone());
                Some(probe_accuracy(&eval, p)?)
            }
            None => None,
        };
        let entry = RoundLog {
            round,
            selected,
            client_loss: updates
                .iter()
                .map(|u| ClientLoss {
                    client_id: u.client_id,
                    loss: u.local_loss,
                })
                .collect(),
            global_metric,
        };
        log::info!("federated round {round}: {} clients", entry.selected.len());
        log.push(entry);
    }
    global.config.bn_mode = BnMode::Batch;
    Ok(FedOutcome { model: global, log })
}
