//! Declarative experiment configuration (TOML) with validation and a stable
//! content hash.

use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::data::SubsetSize;
use crate::model::LayerLayout;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ConfigError {
    #[error("{field}: {message}")]
    Invalid { field: &'static str, message: String },
    #[error("cannot parse config: {0}")]
    Parse(String),
}

fn invalid(field: &'static str, message: impl Into<String>) -> ConfigError {
    ConfigError::Invalid { field, message: message.into() }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetKind {
    Mnist,
    Fmnist,
    Synthetic,
}

impl DatasetKind {
    pub fn name(self) -> &'static str {
        match self {
            DatasetKind::Mnist => "mnist",
            DatasetKind::Fmnist => "fmnist",
            DatasetKind::Synthetic => "synthetic",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Algorithm {
    Fedsi,
    FedsiFac,
    Fedavg,
    FedavgFt,
    LocalOnly,
}

impl Algorithm {
    pub const ALL: [Algorithm; 5] =
        [Algorithm::Fedsi, Algorithm::FedsiFac, Algorithm::Fedavg, Algorithm::FedavgFt, Algorithm::LocalOnly];

    pub fn name(self) -> &'static str {
        match self {
            Algorithm::Fedsi => "fedsi",
            Algorithm::FedsiFac => "fedsi-fac",
            Algorithm::Fedavg => "fedavg",
            Algorithm::FedavgFt => "fedavg-ft",
            Algorithm::LocalOnly => "local-only",
        }
    }

    /// Whether the server state is a distribution over the representation.
    pub fn is_bayesian(self) -> bool {
        matches!(self, Algorithm::Fedsi | Algorithm::FedsiFac)
    }

    pub fn default_lr(self) -> f64 {
        if self.is_bayesian() {
            1e-2
        } else {
            1e-3
        }
    }
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub kind: DatasetKind,
    /// Directory holding the four IDX files (image datasets only).
    #[serde(default)]
    pub path: Option<PathBuf>,
    #[serde(default = "default_size")]
    pub size: SubsetSize,
    #[serde(default = "default_classes")]
    pub classes: usize,
    #[serde(default = "default_dim")]
    pub dim: usize,
    #[serde(default = "default_per_class")]
    pub per_class: usize,
    #[serde(default = "default_separation")]
    pub separation: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartitionConfig {
    #[serde(default = "default_clients")]
    pub clients: usize,
    #[serde(default = "default_labels_per_client")]
    pub labels_per_client: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(default = "default_hidden")]
    pub hidden: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingConfig {
    pub algorithm: Algorithm,
    #[serde(default = "default_rounds")]
    pub rounds: usize,
    #[serde(default = "default_clients")]
    pub clients_per_round: usize,
    #[serde(default = "default_local_epochs")]
    pub local_epochs: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    /// Defaults per algorithm, see [`Algorithm::default_lr`].
    #[serde(default)]
    pub lr: Option<f64>,
    #[serde(default = "default_prior_variance")]
    pub prior_variance: f64,
    #[serde(default = "default_subnet_ratio")]
    pub subnet_ratio: f64,
    /// Exact subnetwork size; overrides `subnet_ratio` and may be 0.
    #[serde(default)]
    pub subnet_size: Option<usize>,
    #[serde(default = "default_fine_tune_epochs")]
    pub fine_tune_epochs: usize,
    /// Write a checkpoint every this many rounds (0: final only).
    #[serde(default)]
    pub checkpoint_every: usize,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluationConfig {
    #[serde(default = "default_ece_bins")]
    pub ece_bins: usize,
    /// Client held out of training and evaluated as a newcomer.
    #[serde(default)]
    pub novel_client: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub partition: PartitionConfig,
    #[serde(default)]
    pub model: ModelConfig,
    pub training: TrainingConfig,
    #[serde(default)]
    pub evaluation: EvaluationConfig,
}

fn default_size() -> SubsetSize {
    SubsetSize::Small
}
fn default_classes() -> usize {
    10
}
fn default_dim() -> usize {
    2
}
fn default_per_class() -> usize {
    100
}
fn default_separation() -> f64 {
    6.0
}
fn default_clients() -> usize {
    10
}
fn default_labels_per_client() -> usize {
    5
}
fn default_hidden() -> usize {
    64
}
fn default_rounds() -> usize {
    800
}
fn default_local_epochs() -> usize {
    10
}
fn default_batch_size() -> usize {
    50
}
fn default_prior_variance() -> f64 {
    1e-4
}
fn default_subnet_ratio() -> f64 {
    0.05
}
fn default_fine_tune_epochs() -> usize {
    10
}
fn default_ece_bins() -> usize {
    15
}

impl Default for PartitionConfig {
    fn default() -> Self {
        Self { clients: default_clients(), labels_per_client: default_labels_per_client() }
    }
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { hidden: default_hidden() }
    }
}

impl Default for EvaluationConfig {
    fn default() -> Self {
        Self { ece_bins: default_ece_bins(), novel_client: None }
    }
}

impl DatasetConfig {
    pub fn synthetic(classes: usize, dim: usize, per_class: usize, separation: f64) -> Self {
        Self { kind: DatasetKind::Synthetic, path: None, size: SubsetSize::Full, classes, dim, per_class, separation }
    }

    pub fn num_classes(&self) -> usize {
        match self.kind {
            DatasetKind::Synthetic => self.classes,
            _ => 10,
        }
    }

    pub fn input_dim(&self) -> usize {
        match self.kind {
            DatasetKind::Synthetic => self.dim,
            _ => 28 * 28,
        }
    }

    /// Size label used in reports.
    pub fn size_name(&self) -> &'static str {
        match self.kind {
            DatasetKind::Synthetic => "synthetic",
            _ => self.size.name(),
        }
    }
}

impl TrainingConfig {
    pub fn new(algorithm: Algorithm) -> Self {
        Self {
            algorithm,
            rounds: default_rounds(),
            clients_per_round: default_clients(),
            local_epochs: default_local_epochs(),
            batch_size: default_batch_size(),
            lr: None,
            prior_variance: default_prior_variance(),
            subnet_ratio: default_subnet_ratio(),
            subnet_size: None,
            fine_tune_epochs: default_fine_tune_epochs(),
            checkpoint_every: 0,
            seed: 0,
        }
    }

    pub fn lr(&self) -> f64 {
        self.lr.unwrap_or_else(|| self.algorithm.default_lr())
    }

    /// `|S|` for `total = |R|`: the explicit size if set, otherwise
    /// `round(E·|R|)` but at least 1.
    pub fn subnet_len(&self, total: usize) -> usize {
        match self.subnet_size {
            Some(s) => s,
            None => ((self.subnet_ratio * total as f64).round() as usize).clamp(1, total.max(1)).min(total),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let cfg: Self = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn layout(&self) -> LayerLayout {
        LayerLayout {
            input_dim: self.dataset.input_dim(),
            hidden_dim: self.model.hidden,
            output_dim: self.dataset.num_classes(),
        }
    }

    /// Client ids taking part in federated training.
    pub fn training_clients(&self) -> Vec<usize> {
        (0..self.partition.clients).filter(|&c| Some(c) != self.evaluation.novel_client).collect()
    }

    /// Hex SHA-256 of the canonical JSON encoding, which covers every field.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&canonical))
    }

    /// Resolves a relative dataset path against `base`.
    pub fn resolve_paths(&mut self, base: &Path) {
        if let Some(p) = &self.dataset.path {
            if p.is_relative() {
                self.dataset.path = Some(base.join(p));
            }
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let d = &self.dataset;
        match d.kind {
            DatasetKind::Mnist | DatasetKind::Fmnist => {
                if d.path.is_none() {
                    return Err(invalid("dataset.path", "image datasets need the directory holding the IDX files"));
                }
            }
            DatasetKind::Synthetic => {
                if d.classes < 1 {
                    return Err(invalid("dataset.classes", "need at least one class"));
                }
                if d.classes > 256 {
                    return Err(invalid("dataset.classes", "at most 256 classes fit the label format"));
                }
                if d.dim < 1 {
                    return Err(invalid("dataset.dim", "need at least one feature"));
                }
                if !(d.separation > 0.0 && d.separation.is_finite()) {
                    return Err(invalid("dataset.separation", format!("must be positive, got {}", d.separation)));
                }
            }
        }
        let p = &self.partition;
        if p.clients < 1 {
            return Err(invalid("partition.clients", "need at least one client"));
        }
        if p.labels_per_client < 1 || p.labels_per_client > d.num_classes() {
            return Err(invalid(
                "partition.labels_per_client",
                format!("must be in 1..={}, got {}", d.num_classes(), p.labels_per_client),
            ));
        }
        if self.model.hidden < 1 {
            return Err(invalid("model.hidden", "need at least one hidden unit"));
        }
        let t = &self.training;
        let pool = self.training_clients().len();
        if let Some(n) = self.evaluation.novel_client {
            if n >= p.clients {
                return Err(invalid("evaluation.novel_client", format!("client {n} does not exist ({} clients)", p.clients)));
            }
            if pool == 0 {
                return Err(invalid("evaluation.novel_client", "no clients left for training"));
            }
        }
        if t.clients_per_round < 1 || t.clients_per_round > pool {
            return Err(invalid(
                "training.clients_per_round",
                format!("must be in 1..={pool} (clients available for training), got {}", t.clients_per_round),
            ));
        }
        if t.local_epochs < 1 {
            return Err(invalid("training.local_epochs", "must be at least 1"));
        }
        if t.batch_size < 1 {
            return Err(invalid("training.batch_size", "must be at least 1"));
        }
        if let Some(lr) = t.lr {
            if !(lr >= 0.0 && lr.is_finite()) {
                return Err(invalid("training.lr", format!("must be a finite non-negative number, got {lr}")));
            }
        }
        if !(t.prior_variance > 0.0 && t.prior_variance.is_finite()) {
            return Err(invalid("training.prior_variance", format!("must be positive, got {}", t.prior_variance)));
        }
        if !(t.subnet_ratio > 0.0 && t.subnet_ratio <= 1.0) {
            return Err(invalid("training.subnet_ratio", format!("must be in (0, 1], got {}", t.subnet_ratio)));
        }
        if let Some(s) = t.subnet_size {
            let total = self.layout().repr_len();
            if s > total {
                return Err(invalid("training.subnet_size", format!("exceeds the {total} representation parameters")));
            }
        }
        if self.evaluation.ece_bins < 1 {
            return Err(invalid("evaluation.ece_bins", "must be at least 1"));
        }
        Ok(())
    }
}
