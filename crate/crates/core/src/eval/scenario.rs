use std::collections::BTreeMap;

use super::config::{DataSource, Method, Scenario, ScenarioConfig};
use super::protocol::{evaluate_model, HeldOut};
use super::report::{Cell, EvalReport};
use crate::alignment::{align_per_user, apply_alignment, fit_alignment};
use crate::data::{generate_synthetic, load_trialset, split_calibration, TrialSet};
use crate::error::{ensure, Error, Result};
use crate::federated::federated_pretrain;
use crate::model::{Classifier, Model, ModelConfig};
use crate::privacy::{apply_perturbations, generate_user_perturbations};
use crate::training::{train_model, Augmentation, EnsembleModel, Objective, Start, TrainConfig};

/// Raw (unaligned) source and target recordings of a scenario.
#[derive(Debug, Clone)]
pub struct ScenarioData {
    pub source: TrialSet,
    pub target: TrialSet,
}

pub fn load_data(cfg: &ScenarioConfig) -> Result<ScenarioData> {
    let (source, target) = match &cfg.data {
        DataSource::Synthetic { spec, target_user } => {
            let all = generate_synthetic(spec)?;
            let tu = target_user.unwrap_or(spec.n_users as u16);
            ensure!(
                all.users().contains(&tu),
                Validation,
                "target user {tu} is not part of the synthetic recording"
            );
            let (t, s): (Vec<_>, Vec<_>) = all.trials().iter().cloned().partition(|tr| tr.user == tu);
            (all.derive("source", s)?, all.derive("target", t)?)
        }
        DataSource::Files { source, target } => (load_trialset(source)?, load_trialset(target)?),
    };
    ensure!(!source.is_empty() && !target.is_empty(), Validation, "source and target sets must be non-empty");
    ensure!(
        source.n_channels() == target.n_channels()
            && source.n_timepoints() == target.n_timepoints()
            && source.n_classes() == target.n_classes(),
        Validation,
        "source ({}x{}, K={}) and target ({}x{}, K={}) recordings do not match",
        source.n_channels(),
        source.n_timepoints(),
        source.n_classes(),
        target.n_channels(),
        target.n_timepoints(),
        target.n_classes()
    );
    Ok(ScenarioData { source, target })
}

fn model_config(cfg: &ScenarioConfig, data: &ScenarioData) -> ModelConfig {
    cfg.model.clone().unwrap_or_else(|| {
        ModelConfig::desk(data.target.n_channels(), data.target.n_timepoints(), data.target.n_classes())
    })
}

/// What crosses from the source side to the target side in one repeat.
enum SourceStage {
    Pretrained(Model),
    Data(TrialSet),
}

fn source_stage(cfg: &ScenarioConfig, aligned: &TrialSet, mc: &ModelConfig, repeat: usize) -> Result<SourceStage> {
    let seed = cfg.source_seed(repeat);
    Ok(match cfg.scenario {
        Scenario::CentralizedSourceFree => {
            let tc = cfg.pretrain.with_seed(seed);
            SourceStage::Pretrained(train_model(Start::Fresh(mc), aligned, &tc, None)?.model)
        }
        Scenario::FederatedSourceFree => {
            let mut fc = cfg.fed.clone();
            fc.seed = seed;
            SourceStage::Pretrained(federated_pretrain(aligned, mc, &fc, None)?.model)
        }
        Scenario::SourcePerturbation => {
            let mut pc = cfg.perturb.clone();
            pc.seed = seed;
            let p = generate_user_perturbations(aligned, &pc)?;
            SourceStage::Data(apply_perturbations(aligned, &p)?)
        }
        Scenario::NoPrivacy => SourceStage::Data(aligned.clone()),
    })
}

fn method_train_config(cfg: &ScenarioConfig, method: Method, stage: &SourceStage, seed: u64) -> TrainConfig {
    let mut tc = cfg.target_train.with_seed(seed);
    tc.objective = match (method.is_adversarial(), stage) {
        (false, _) => Objective::Ce,
        (true, SourceStage::Pretrained(_)) => Objective::Adv,
        (true, SourceStage::Data(_)) => Objective::AdvPlusSource,
    };
    tc.augmentation = if method.uses_augmentation() {
        Augmentation::Scale { beta: cfg.scale_beta }
    } else {
        Augmentation::None
    };
    tc
}

fn train_member(stage: &SourceStage, mc: &ModelConfig, cal: &TrialSet, tc: &TrainConfig) -> Result<Model> {
    let out = match (stage, tc.objective) {
        (SourceStage::Pretrained(m), _) => train_model(Start::Pretrained(m), cal, tc, None)?,
        (SourceStage::Data(src), Objective::Ce) => {
            let joint = TrialSet::concat(format!("{}+source", cal.name()), &[cal, src])?;
            train_model(Start::Fresh(mc), &joint, tc, None)?
        }
        (SourceStage::Data(src), _) => train_model(Start::Fresh(mc), cal, tc, Some(src))?,
    };
    Ok(out.model)
}

/// Trained members per method family; single-model methods use member 0.
type MemberCache = BTreeMap<&'static str, Vec<Model>>;

struct CellContext<'a> {
    cfg: &'a ScenarioConfig,
    stage: &'a SourceStage,
    mc: &'a ModelConfig,
    fraction: f64,
    repeat: usize,
}

impl CellContext<'_> {
    fn members<'c>(&self, cache: &'c mut MemberCache, method: Method, cal: &TrialSet) -> Result<&'c [Model]> {
        let n = if method.is_ensemble() { self.cfg.ensemble_size } else { 1 };
        let base = self.cfg.family_seed(method, self.fraction, self.repeat);
        let have = cache.entry(method.family()).or_default();
        while have.len() < n {
            let seed = base.wrapping_add(have.len() as u64);
            let tc = method_train_config(self.cfg, method, self.stage, seed);
            have.push(train_member(self.stage, self.mc, cal, &tc)?);
        }
        Ok(&have[..n])
    }
}

fn failed_cell(cfg: &ScenarioConfig, method: Method, fraction: f64, repeat: usize, err: &Error) -> Cell {
    Cell {
        fraction,
        repeat,
        seed: cfg.cell_seed(method, fraction, repeat),
        alignment_trials: 0,
        calibration_trials: 0,
        test_trials: 0,
        row: None,
        error: Some(err.to_string()),
    }
}

/// All cells of one repeat, indexed `[method][fraction]`.
fn run_repeat(
    cfg: &ScenarioConfig,
    methods: &[Method],
    data: &ScenarioData,
    aligned_source: &TrialSet,
    mc: &ModelConfig,
    repeat: usize,
) -> Vec<Vec<Cell>> {
    let stage = match source_stage(cfg, aligned_source, mc, repeat) {
        Ok(s) => s,
        Err(e) => {
            log::warn!("repeat {repeat}: source stage failed: {e}");
            return methods
                .iter()
                .map(|&m| {
                    cfg.calibration_fractions
                        .iter()
                        .map(|&f| failed_cell(cfg, m, f, repeat, &e))
                        .collect()
                })
                .collect();
        }
    };
    let mut out: Vec<Vec<Cell>> = methods.iter().map(|_| Vec::new()).collect();
    for &fraction in &cfg.calibration_fractions {
        let ctx = CellContext {
            cfg,
            stage: &stage,
            mc,
            fraction,
            repeat,
        };
        let split = split_calibration(&data.target, fraction).and_then(|(cal_raw, test_raw)| {
            let state = fit_alignment(&cal_raw)?;
            let cal = apply_alignment(&state, &cal_raw)?;
            let test = HeldOut::align(&state, &test_raw)?;
            Ok((cal, test))
        });
        let mut cache = MemberCache::new();
        for (mi, &method) in methods.iter().enumerate() {
            let cell = split.as_ref().map_err(|e| Error::Validation(e.to_string())).and_then(|(cal, test)| {
                let members = ctx.members(&mut cache, method, cal)?;
                let seed = cfg.cell_seed(method, fraction, repeat);
                let row = if method.is_ensemble() {
                    let ens = EnsembleModel::new(members.to_vec())?;
                    evaluate_model(&ens as &dyn Classifier, test, &cfg.grid, seed)?
                } else {
                    evaluate_model(&members[0], test, &cfg.grid, seed)?
                };
                log::info!(
                    "{} {} fraction {fraction} repeat {repeat}: benign {:.1} adv {:.1} noisy {:.1}",
                    cfg.scenario.as_str(),
                    method.as_str(),
                    row.benign,
                    row.adversarial_mean(),
                    row.noisy_mean()
                );
                Ok(Cell {
                    fraction,
                    repeat,
                    seed,
                    alignment_trials: test.alignment_trials(),
                    calibration_trials: cal.len(),
                    test_trials: test.len(),
                    row: Some(row),
                    error: None,
                })
            });
            out[mi].push(cell.unwrap_or_else(|e| {
                log::warn!("{} fraction {fraction} repeat {repeat} failed: {e}", method.as_str());
                failed_cell(cfg, method, fraction, repeat, &e)
            }));
        }
    }
    out
}

/// Runs one scenario for several methods, sharing the source stage of each
/// repeat and the trained members of each method family. Repeats are spread
/// over `workers` threads; every cell is seeded independently, so the
/// reports do not depend on the worker count.
pub fn run_methods(cfg: &ScenarioConfig, methods: &[Method], workers: usize) -> Result<Vec<EvalReport>> {
    cfg.validate()?;
    ensure!(!methods.is_empty(), Validation, "no methods to run");
    let data = load_data(cfg)?;
    let aligned = align_per_user(&data.source)?;
    let mc = model_config(cfg, &data);
    mc.validate()?;
    let job = |r: usize| run_repeat(cfg, methods, &data, &aligned, &mc, r);
    let per_repeat: Vec<Vec<Vec<Cell>>> = if workers <= 1 {
        (0..cfg.repeats).map(job).collect()
    } else {
        use rayon::prelude::*;
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build()
            .map_err(|e| Error::Usage(format!("cannot start {workers} workers: {e}")))?;
        pool.install(|| (0..cfg.repeats).into_par_iter().map(job).collect())
    };
    Ok(methods
        .iter()
        .enumerate()
        .map(|(mi, &method)| {
            let mut cells: Vec<Cell> = Vec::with_capacity(cfg.repeats * cfg.calibration_fractions.len());
            for fi in 0..cfg.calibration_fractions.len() {
                for rep in &per_repeat {
                    cells.push(rep[mi][fi].clone());
                }
            }
            EvalReport::new(cfg.scenario, method, cfg.master_seed, cfg.grid.clone(), cells)
        })
        .collect())
}

/// Runs `cfg.method` in `cfg.scenario` on a single worker.
pub fn run_scenario(cfg: &ScenarioConfig) -> Result<EvalReport> {
    Ok(run_methods(cfg, &[cfg.method], 1)?.remove(0))
}
