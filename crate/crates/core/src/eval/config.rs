use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::data::SynthSpec;
use crate::error::{ensure, Result};
use crate::federated::FedConfig;
use crate::model::ModelConfig;
use crate::privacy::PerturbConfig;
use crate::seed::SeedKey;
use crate::training::TrainConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    /// A centrally pretrained source model is the only thing the target sees.
    CentralizedSourceFree,
    /// As above, but the source model comes out of federated pretraining.
    FederatedSourceFree,
    /// The target trains on its calibration data plus the user-perturbed source set.
    SourcePerturbation,
    /// The target trains on its calibration data plus the clean aligned source set.
    NoPrivacy,
}

impl Scenario {
    pub const ALL: [Scenario; 4] = [
        Scenario::CentralizedSourceFree,
        Scenario::FederatedSourceFree,
        Scenario::SourcePerturbation,
        Scenario::NoPrivacy,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Scenario::CentralizedSourceFree => "centralized_source_free",
            Scenario::FederatedSourceFree => "federated_source_free",
            Scenario::SourcePerturbation => "source_perturbation",
            Scenario::NoPrivacy => "no_privacy",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|x| x.as_str() == s)
    }

    /// Whether the target trains jointly with (some form of) the source data.
    pub fn uses_source_data(self) -> bool {
        matches!(self, Scenario::SourcePerturbation | Scenario::NoPrivacy)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Ce,
    Abat,
    AbatE,
    Ar,
    Are,
}

impl Method {
    pub const ALL: [Method; 5] = [Method::Ce, Method::Abat, Method::AbatE, Method::Ar, Method::Are];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Ce => "ce",
            Method::Abat => "abat",
            Method::AbatE => "abat_e",
            Method::Ar => "ar",
            Method::Are => "are",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|x| x.as_str() == s)
    }

    pub fn is_adversarial(self) -> bool {
        self != Method::Ce
    }

    pub fn uses_augmentation(self) -> bool {
        matches!(self, Method::Ar | Method::Are)
    }

    pub fn is_ensemble(self) -> bool {
        matches!(self, Method::AbatE | Method::Are)
    }

    /// Methods of one family train with the same seeds; an ensemble's first
    /// member is therefore the family's single model.
    pub fn family(self) -> &'static str {
        match self {
            Method::Ce => "ce",
            Method::Abat | Method::AbatE => "abat",
            Method::Ar | Method::Are => "ar",
        }
    }
}

/// Perturbation magnitudes of the evaluation protocol.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalGrid {
    pub epsilons: Vec<f32>,
    pub etas: Vec<f32>,
    /// Independent noise draws averaged per η.
    pub noise_draws: usize,
    pub attack_steps: usize,
    /// PGD step size; `None` means ε/4.
    #[serde(default)]
    pub attack_alpha: Option<f32>,
}

impl Default for EvalGrid {
    fn default() -> Self {
        EvalGrid {
            epsilons: vec![0.01, 0.03, 0.05],
            etas: vec![1.0, 2.0, 3.0],
            noise_draws: 3,
            attack_steps: 10,
            attack_alpha: None,
        }
    }
}

impl EvalGrid {
    pub fn validate(&self) -> Result<()> {
        ensure!(
            !self.epsilons.is_empty() && !self.etas.is_empty(),
            Validation,
            "evaluation grid needs at least one epsilon and one eta"
        );
        ensure!(
            self.epsilons.iter().chain(&self.etas).all(|v| v.is_finite() && *v >= 0.0),
            Validation,
            "grid magnitudes must be finite and non-negative"
        );
        ensure!(self.noise_draws >= 1, Validation, "noise_draws must be >= 1");
        ensure!(self.attack_steps >= 1, Validation, "attack_steps must be >= 1");
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum DataSource {
    /// Generate a synthetic recording; `target_user` (default: the last user)
    /// is held out as the target, every other user is a source user.
    Synthetic {
        spec: SynthSpec,
        #[serde(default)]
        target_user: Option<u16>,
    },
    /// Source users and the target user in two trial files.
    Files { source: PathBuf, target: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub scenario: Scenario,
    pub method: Method,
    pub calibration_fractions: Vec<f64>,
    pub repeats: usize,
    pub master_seed: u64,
    pub data: DataSource,
    /// Classifier architecture; derived from the data shapes when absent.
    #[serde(default)]
    pub model: Option<ModelConfig>,
    /// Centralized source pretraining (and the probe-free baselines' epochs).
    pub pretrain: TrainConfig,
    /// Target-side training: fine-tuning in the source-free scenarios,
    /// training from scratch in the others. Objective and augmentation are
    /// set from the method.
    pub target_train: TrainConfig,
    pub scale_beta: f32,
    pub ensemble_size: usize,
    pub fed: FedConfig,
    pub perturb: PerturbConfig,
    pub grid: EvalGrid,
}

impl ScenarioConfig {
    /// The desk-scale synthetic benchmark with default protocol settings.
    pub fn desk(scenario: Scenario, method: Method, master_seed: u64) -> Self {
        let mut pretrain = TrainConfig::new(master_seed);
        pretrain.epochs = 30;
        ScenarioConfig {
            scenario,
            method,
            calibration_fractions: vec![0.2, 0.3, 0.4, 0.5, 0.6],
            repeats: 5,
            master_seed,
            data: DataSource::Synthetic {
                spec: SynthSpec::desk(master_seed),
                target_user: None,
            },
            model: None,
            pretrain,
            target_train: TrainConfig::new(master_seed),
            scale_beta: 0.05,
            ensemble_size: 5,
            fed: FedConfig::new(master_seed),
            perturb: PerturbConfig::new(master_seed),
            grid: EvalGrid::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(
            !self.calibration_fractions.is_empty(),
            Validation,
            "at least one calibration fraction is required"
        );
        for &f in &self.calibration_fractions {
            ensure!(
                f > 0.0 && f < 1.0,
                Validation,
                "calibration fraction {f} outside (0, 1)"
            );
        }
        ensure!(self.repeats >= 1, Validation, "repeats must be >= 1");
        ensure!(self.ensemble_size >= 1, Validation, "ensemble_size must be >= 1");
        ensure!(
            (0.0..1.0).contains(&self.scale_beta),
            Validation,
            "scale_beta {} outside [0, 1)",
            self.scale_beta
        );
        if let DataSource::Synthetic { spec, .. } = &self.data {
            spec.validate()?;
            ensure!(
                spec.n_users >= 2,
                Validation,
                "the synthetic recording needs a target user plus at least one source user"
            );
        }
        if let Some(m) = &self.model {
            m.validate()?;
        }
        self.pretrain.validate()?;
        self.target_train.validate()?;
        self.grid.validate()?;
        if self.scenario == Scenario::FederatedSourceFree {
            self.fed.validate()?;
        }
        Ok(())
    }

    fn key(&self) -> SeedKey {
        SeedKey::new(self.master_seed).with_str(self.scenario.as_str())
    }

    /// Seed of one evaluation cell.
    pub fn cell_seed(&self, method: Method, fraction: f64, repeat: usize) -> u64 {
        self.key()
            .with_str(method.as_str())
            .with_f64(fraction)
            .with(repeat as u64)
            .value()
    }

    /// Seed of the source-side stage of one repeat, shared by every method
    /// and calibration fraction (the source side never sees target data).
    pub fn source_seed(&self, repeat: usize) -> u64 {
        self.key().with_str("source").with(repeat as u64).value()
    }

    /// Base training seed of a method family in one cell.
    pub fn family_seed(&self, method: Method, fraction: f64, repeat: usize) -> u64 {
        self.key()
            .with_str(method.family())
            .with_f64(fraction)
            .with(repeat as u64)
            .value()
    }
}
