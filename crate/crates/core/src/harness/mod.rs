//! Experiment configuration, training loops, gradient checks and metrics.

mod experiment;
pub mod gradcheck;

use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::ada::{AdaConfig, AdaLevel};
use crate::checkpoint;
use crate::error::{ApnError, Result};
use crate::optim::SgdState;
use crate::params::ParamSet;
use crate::pyramid::{ApnModel, PyramidConfig};
use crate::synthdg::BenchmarkSpec;

pub use experiment::{
    ablation, evaluate_ensemble, run_experiment, run_experiment_on, write_metrics_csv, AblationRow, ExperimentResult,
    MemberResult, MetricsRow, ReproRecord, METRICS_HEADER,
};

/// Named training recipes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    /// Plain empirical risk minimization.
    #[serde(rename = "erm")]
    Erm,
    /// The pyramid model trained without adversarial examples.
    #[serde(rename = "apn")]
    Apn,
    /// Adversarial examples anchored at the level-III feature only.
    #[serde(rename = "apn+ada")]
    ApnAda,
    /// Adversarial examples anchored at level II and level III.
    #[serde(rename = "apn+ada*")]
    ApnAdaStar,
    /// One set of adversarial examples anchored at the final feature.
    #[serde(rename = "global-ada")]
    GlobalAda,
}

impl Variant {
    pub const ALL: [Variant; 5] = [Variant::Erm, Variant::Apn, Variant::ApnAda, Variant::ApnAdaStar, Variant::GlobalAda];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Erm => "erm",
            Variant::Apn => "apn",
            Variant::ApnAda => "apn+ada",
            Variant::ApnAdaStar => "apn+ada*",
            Variant::GlobalAda => "global-ada",
        }
    }

    /// The ADA configuration this variant trains with, keeping `eta`,
    /// `gamma`, `t_max` and clamping from `base`.
    ///
    /// | variant      | levels       | eta, t_max |
    /// |--------------|--------------|------------|
    /// | `erm`        | none         | 0, 0       |
    /// | `apn`        | none         | from base  |
    /// | `apn+ada`    | III          | from base  |
    /// | `apn+ada*`   | II, III      | from base  |
    /// | `global-ada` | Global       | from base  |
    pub fn ada_config(self, base: &AdaConfig) -> AdaConfig {
        let levels = match self {
            Variant::Erm | Variant::Apn => vec![],
            Variant::ApnAda => vec![AdaLevel::III],
            Variant::ApnAdaStar => vec![AdaLevel::II, AdaLevel::III],
            Variant::GlobalAda => vec![AdaLevel::Global],
        };
        match self {
            Variant::Erm => AdaConfig { eta: 0.0, t_max: 0, levels, ..base.clone() },
            _ => AdaConfig { levels, ..base.clone() },
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = ApnError;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| ApnError::Config(format!("unknown variant `{s}`; expected one of erm, apn, apn+ada, apn+ada*, global-ada")))
    }
}

/// Flat JSON experiment configuration. Model, ADA and optimizer fields sit
/// at the top level; every field has a default.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub variant: Variant,
    /// One ensemble member is trained per entry.
    pub gammas: Vec<f64>,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// `VDG1` dataset file; when absent the benchmark is generated from
    /// `benchmark`.
    pub dataset: Option<PathBuf>,
    pub benchmark: BenchmarkSpec,
    /// Worker threads for ensemble members; 1 is sequential.
    pub parallel: usize,
    /// Write a checkpoint for every member's selected epoch.
    pub save_checkpoints: bool,
    #[serde(flatten)]
    pub model: PyramidConfig,
    #[serde(flatten)]
    pub ada: AdaConfig,
    #[serde(flatten)]
    pub sgd: SgdState,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            variant: Variant::ApnAdaStar,
            gammas: vec![0.001, 0.01, 0.1, 1.0],
            epochs: 30,
            batch_size: 16,
            seed: 0,
            dataset: None,
            benchmark: BenchmarkSpec::default(),
            parallel: 1,
            save_checkpoints: true,
            model: PyramidConfig::default(),
            ada: AdaConfig::default(),
            sgd: SgdState::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.sgd.validate()?;
        self.variant.ada_config(&self.ada).validate()?;
        if self.gammas.is_empty() {
            return Err(ApnError::Config("gammas must list at least one value".into()));
        }
        if let Some(g) = self.gammas.iter().find(|g| !(**g >= 0.0)) {
            return Err(ApnError::Config(format!("gamma {g} must be >= 0")));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(ApnError::Config("epochs and batch_size must be >= 1".into()));
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)
            .map_err(|e| ApnError::Config(format!("cannot read config {}: {e}", path.display())))?;
        let cfg: ExperimentConfig = serde_json::from_slice(&bytes)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// ADA settings of the member trained with `gamma`.
    pub fn member_ada(&self, gamma: f64) -> AdaConfig {
        AdaConfig { gamma, ..self.variant.ada_config(&self.ada) }
    }
}

/// Worker count after applying `APN_DETERMINISTIC`.
pub fn effective_parallelism(requested: usize) -> usize {
    if std::env::var("APN_DETERMINISTIC").is_ok_and(|v| v == "1") {
        1
    } else {
        requested.max(1)
    }
}

pub fn save_checkpoint(params: &ParamSet, path: &Path) -> Result<()> {
    checkpoint::save(params, path)
}

pub fn load_checkpoint(path: &Path) -> Result<ParamSet> {
    checkpoint::load(path)
}

/// Load a checkpoint into a model built from `config`; names and dims must
/// match exactly.
pub fn load_model(config: &PyramidConfig, path: &Path) -> Result<ApnModel> {
    let mut model = ApnModel::new(config.clone(), &mut crate::rng::rng_from_seed(0))?;
    model.params.load_from(&load_checkpoint(path)?)?;
    Ok(model)
}
