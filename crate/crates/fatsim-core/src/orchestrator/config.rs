//! Declarative experiment configuration: parsing, validation, dataset
//! resolution.

use crate::aggregation::{AggregationConfig, AggregationRule};
use crate::data::{self, Dataset, DataError};
use crate::evasion::PgdConfig;
use crate::nn::Architecture;
use crate::optim::OptimizerSpec;
use crate::seed;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use thiserror::Error;

/// Environment variable naming the dataset root directory.
pub const DATA_DIR_ENV: &str = "FATSIM_DATA_DIR";

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("config error: {0}")]
    Config(String),
    #[error("dataset missing: {0}")]
    DatasetMissing(String),
    #[error("runtime abort: {0}")]
    Runtime(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl From<DataError> for ExperimentError {
    fn from(e: DataError) -> Self {
        match e {
            DataError::Io(io) if io.kind() == std::io::ErrorKind::NotFound => {
                ExperimentError::DatasetMissing(io.to_string())
            }
            other => ExperimentError::Runtime(other.to_string()),
        }
    }
}

/// Piecewise-constant schedule for the fraction of each minibatch replaced
/// by adversarial examples: ordered (start_round, ratio) segments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct MixSchedule(pub Vec<(u64, f64)>);

impl MixSchedule {
    pub fn constant(ratio: f64) -> Self {
        MixSchedule(vec![(0, ratio)])
    }

    pub fn validate(&self) -> Result<(), ExperimentError> {
        if self.0.is_empty() {
            return Err(ExperimentError::Config("mix_schedule must not be empty".into()));
        }
        if self.0[0].0 != 0 {
            return Err(ExperimentError::Config(format!(
                "mix_schedule must start at round 0, got {}",
                self.0[0].0
            )));
        }
        for pair in self.0.windows(2) {
            if pair[1].0 <= pair[0].0 {
                return Err(ExperimentError::Config(format!(
                    "mix_schedule start_rounds must be strictly increasing ({} then {})",
                    pair[0].0, pair[1].0
                )));
            }
        }
        for &(_, r) in &self.0 {
            if !(0.0..=1.0).contains(&r) {
                return Err(ExperimentError::Config(format!(
                    "mix_schedule ratio {r} outside [0, 1]"
                )));
            }
        }
        Ok(())
    }

    /// Ratio of the last segment whose start_round <= round.
    pub fn ratio_at(&self, round: u64) -> f64 {
        let mut ratio = self.0[0].1;
        for &(start, r) in &self.0 {
            if start <= round {
                ratio = r;
            } else {
                break;
            }
        }
        ratio
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSpec {
    /// MNIST/Fashion-MNIST style IDX directory with the four standard files.
    IdxDir {
        #[serde(default)]
        dir: Option<PathBuf>,
        #[serde(default)]
        subset_train: Option<usize>,
        #[serde(default)]
        subset_test: Option<usize>,
    },
    /// CIFAR-10 binary batches directory.
    Cifar10Dir {
        #[serde(default)]
        dir: Option<PathBuf>,
        #[serde(default)]
        subset_train: Option<usize>,
        #[serde(default)]
        subset_test: Option<usize>,
    },
    /// Deterministic Gaussian-blob dataset (unit tests, smoke runs).
    Synthetic {
        classes: usize,
        per_class: usize,
        dim: usize,
        #[serde(default = "data::default_blob_spread")]
        spread: f64,
        #[serde(default = "default_test_per_class")]
        test_per_class: usize,
    },
}

fn default_test_per_class() -> usize {
    20
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "scheme", rename_all = "snake_case", deny_unknown_fields)]
pub enum PartitionSpec {
    Iid,
    LabelSkew { alpha: f64 },
}

/// Malicious-client behaviour for a run. `start_round` lets colluders behave
/// honestly during a warm-up phase before attacking.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum AttackSpec {
    None,
    Convergence {
        colluder_ids: Vec<u64>,
        sigma_shift: f64,
        #[serde(default)]
        start_round: u64,
    },
    Distillation {
        colluder_ids: Vec<u64>,
        #[serde(default = "default_temperature")]
        temperature: f64,
        #[serde(default)]
        target_layer: Option<String>,
        #[serde(default = "default_attack_epochs")]
        teacher_epochs: usize,
        #[serde(default = "default_attack_epochs")]
        student_epochs: usize,
        #[serde(default)]
        start_round: u64,
    },
}

fn default_temperature() -> f64 {
    100.0
}
fn default_attack_epochs() -> usize {
    2
}

impl AttackSpec {
    pub fn colluder_ids(&self) -> &[u64] {
        match self {
            AttackSpec::None => &[],
            AttackSpec::Convergence { colluder_ids, .. } => colluder_ids,
            AttackSpec::Distillation { colluder_ids, .. } => colluder_ids,
        }
    }

    pub fn start_round(&self) -> u64 {
        match self {
            AttackSpec::None => 0,
            AttackSpec::Convergence { start_round, .. } => *start_round,
            AttackSpec::Distillation { start_round, .. } => *start_round,
        }
    }
}

/// Full declarative description of one simulation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub arch: Architecture,
    pub dataset: DatasetSpec,
    pub partition: PartitionSpec,
    pub n_clients: usize,
    /// Defaults to all clients when omitted.
    #[serde(default)]
    pub clients_per_round: Option<usize>,
    /// Minibatches per client per round.
    #[serde(default = "default_local_steps")]
    pub local_steps: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    pub optimizer: OptimizerSpec,
    /// Keep per-client optimizer moments across rounds.
    #[serde(default = "default_true")]
    pub persist_optimizer_state: bool,
    pub mix_schedule: MixSchedule,
    pub train_pgd: PgdConfig,
    pub eval_pgd: PgdConfig,
    /// When set, evaluation also runs logit-scaled PGD at this temperature.
    #[serde(default)]
    pub eval_logit_scale_t: Option<f64>,
    /// When set, evaluation also runs a black-box transfer attack crafted on
    /// this surrogate checkpoint.
    #[serde(default)]
    pub eval_surrogate_ckpt: Option<PathBuf>,
    #[serde(default = "default_eval_batch")]
    pub eval_batch_size: usize,
    pub aggregation: AggregationConfig,
    #[serde(default = "default_attack")]
    pub attack: AttackSpec,
    pub rounds: u64,
    pub eval_every: u64,
    pub seed: u64,
}

fn default_local_steps() -> usize {
    1
}
fn default_batch_size() -> usize {
    64
}
fn default_true() -> bool {
    true
}
fn default_eval_batch() -> usize {
    128
}
fn default_attack() -> AttackSpec {
    AttackSpec::None
}

impl ExperimentConfig {
    /// Parse from JSON, rejecting unknown fields.
    pub fn from_json(text: &str) -> Result<Self, ExperimentError> {
        serde_json::from_str(text).map_err(|e| ExperimentError::Config(e.to_string()))
    }

    pub fn from_value(value: serde_json::Value) -> Result<Self, ExperimentError> {
        serde_json::from_value(value).map_err(|e| ExperimentError::Config(e.to_string()))
    }

    pub fn effective_clients_per_round(&self) -> usize {
        self.clients_per_round.unwrap_or(self.n_clients)
    }

    /// Pre-flight validation of every cross-field invariant.
    pub fn validate(&self) -> Result<(), ExperimentError> {
        let cfg_err = |m: String| Err(ExperimentError::Config(m));
        self.arch
            .tensor_specs()
            .map_err(|e| ExperimentError::Config(format!("arch: {e}")))?;
        if self.n_clients == 0 {
            return cfg_err("n_clients must be positive".into());
        }
        let m = self.effective_clients_per_round();
        if m == 0 || m > self.n_clients {
            return cfg_err(format!(
                "clients_per_round {m} must be in 1..={}",
                self.n_clients
            ));
        }
        if self.local_steps == 0 || self.batch_size == 0 {
            return cfg_err("local_steps and batch_size must be positive".into());
        }
        if self.rounds == 0 {
            return cfg_err("rounds must be positive".into());
        }
        if self.eval_every == 0 {
            return cfg_err("eval_every must be positive".into());
        }
        self.mix_schedule.validate()?;
        self.train_pgd
            .validate()
            .map_err(|e| ExperimentError::Config(format!("train_pgd: {e}")))?;
        self.eval_pgd
            .validate()
            .map_err(|e| ExperimentError::Config(format!("eval_pgd: {e}")))?;
        if let Some(t) = self.eval_logit_scale_t {
            if !t.is_finite() || t <= 0.0 {
                return cfg_err(format!("eval_logit_scale_t {t} must be > 0"));
            }
        }
        let needed = self.aggregation.min_updates();
        if m < needed {
            return cfg_err(format!(
                "aggregation {:?} with f={} needs at least {needed} updates per round, \
                 but clients_per_round is {m}",
                self.aggregation.rule, self.aggregation.f
            ));
        }
        if let PartitionSpec::LabelSkew { alpha } = self.partition {
            if !alpha.is_finite() || alpha <= 0.0 {
                return cfg_err(format!("partition alpha {alpha} must be > 0"));
            }
        }
        match &self.attack {
            AttackSpec::None => {}
            attack => {
                let ids = attack.colluder_ids();
                if ids.is_empty() {
                    return cfg_err("attack needs at least one colluder id".into());
                }
                let mut sorted = ids.to_vec();
                sorted.sort_unstable();
                sorted.dedup();
                if sorted.len() != ids.len() {
                    return cfg_err("colluder_ids must be distinct".into());
                }
                if sorted.iter().any(|&id| id >= self.n_clients as u64) {
                    return cfg_err(format!(
                        "colluder ids {sorted:?} must be < n_clients {}",
                        self.n_clients
                    ));
                }
                if self.aggregation.rule != AggregationRule::Fedavg
                    && ids.len() != self.aggregation.f
                {
                    return cfg_err(format!(
                        "colluder count {} must equal the defence's f {}",
                        ids.len(),
                        self.aggregation.f
                    ));
                }
                if let AttackSpec::Convergence { colluder_ids, .. } = attack {
                    if colluder_ids.len() < 2 {
                        return cfg_err(
                            "convergence attack needs >= 2 colluders to estimate sigma".into(),
                        );
                    }
                }
                if let AttackSpec::Distillation { temperature, target_layer, .. } = attack {
                    if !temperature.is_finite() || *temperature <= 0.0 {
                        return cfg_err(format!("distillation temperature {temperature} must be > 0"));
                    }
                    if let Some(layer) = target_layer {
                        let specs = self
                            .arch
                            .tensor_specs()
                            .map_err(|e| ExperimentError::Config(e.to_string()))?;
                        let prefix = format!("{layer}.");
                        if !specs.iter().any(|s| s.name.starts_with(&prefix)) {
                            return cfg_err(format!("target_layer {layer} not in architecture"));
                        }
                    }
                }
            }
        }
        Ok(())
    }

    fn resolve_dir(dir: &Option<PathBuf>) -> Result<PathBuf, ExperimentError> {
        if let Some(d) = dir {
            return Ok(d.clone());
        }
        match std::env::var(DATA_DIR_ENV) {
            Ok(d) if !d.is_empty() => Ok(PathBuf::from(d)),
            _ => Err(ExperimentError::DatasetMissing(format!(
                "no dataset dir in config and {DATA_DIR_ENV} is unset"
            ))),
        }
    }

    fn require_dir(dir: &Path) -> Result<(), ExperimentError> {
        if !dir.is_dir() {
            return Err(ExperimentError::DatasetMissing(format!(
                "dataset directory {} does not exist",
                dir.display()
            )));
        }
        Ok(())
    }

    /// Load (train, test) datasets per the dataset spec, applying subset
    /// knobs with seeds derived from the master seed.
    pub fn load_datasets(&self) -> Result<(Dataset, Dataset), ExperimentError> {
        match &self.dataset {
            DatasetSpec::IdxDir { dir, subset_train, subset_test } => {
                let dir = Self::resolve_dir(dir)?;
                Self::require_dir(&dir)?;
                let mut train = data::load_idx_dir(&dir, true)?;
                let mut test = data::load_idx_dir(&dir, false)?;
                if let Some(k) = subset_train {
                    train = train.subset(*k, seed::derive(self.seed, &[1, 0]));
                }
                if let Some(k) = subset_test {
                    test = test.subset(*k, seed::derive(self.seed, &[1, 1]));
                }
                Ok((train, test))
            }
            DatasetSpec::Cifar10Dir { dir, subset_train, subset_test } => {
                let dir = Self::resolve_dir(dir)?;
                Self::require_dir(&dir)?;
                let mut train = data::load_cifar10_dir(&dir, true)?;
                let mut test = data::load_cifar10_dir(&dir, false)?;
                if let Some(k) = subset_train {
                    train = train.subset(*k, seed::derive(self.seed, &[1, 0]));
                }
                if let Some(k) = subset_test {
                    test = test.subset(*k, seed::derive(self.seed, &[1, 1]));
                }
                Ok((train, test))
            }
            DatasetSpec::Synthetic { classes, per_class, dim, spread, test_per_class } => {
                let train = data::synthetic_blobs(
                    *classes,
                    *per_class,
                    *dim,
                    *spread,
                    seed::derive(self.seed, &[10, 0]),
                )?;
                let test = data::synthetic_blobs(
                    *classes,
                    *test_per_class,
                    *dim,
                    *spread,
                    seed::derive(self.seed, &[10, 1]),
                )?;
                Ok((train, test))
            }
        }
    }
}
