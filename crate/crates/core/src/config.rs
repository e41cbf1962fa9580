//! Experiment configuration: a TOML file with sweep lists for method, alpha
//! and seed.

use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::method::MethodRegistry;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldError {
    pub field: String,
    pub message: String,
}

impl fmt::Display for FieldError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.field, self.message)
    }
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("cannot parse config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid config:\n  {}", .0.iter().map(ToString::to_string).collect::<Vec<_>>().join("\n  "))]
    Invalid(Vec<FieldError>),
}

/// A scalar or a list of scalars.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum OneOrMany<T> {
    One(T),
    Many(Vec<T>),
}

impl<T: Clone> OneOrMany<T> {
    pub fn values(&self) -> Vec<T> {
        match self {
            OneOrMany::One(v) => vec![v.clone()],
            OneOrMany::Many(v) => v.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Cluster {
    pub ratio: f64,
    pub fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSource {
    Synthetic {
        classes: usize,
        dim: usize,
        per_class: usize,
        separation: f64,
    },
    Idx {
        images: PathBuf,
        labels: PathBuf,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub method: OneOrMany<String>,
    pub alpha: OneOrMany<f64>,
    pub seed: OneOrMany<u64>,
    pub rounds: u32,
    pub clients: usize,
    pub clients_per_round: usize,
    pub local_epochs: usize,
    pub eta: f64,
    pub batch_size: usize,
    pub lambda: f64,
    pub early_stopping: bool,
    pub hidden_layers: Vec<usize>,
    pub clusters: Vec<Cluster>,
    pub quantize_wire: bool,
    pub dataset: DatasetSource,
    pub out_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            method: OneOrMany::One("fedspu".into()),
            alpha: OneOrMany::One(0.5),
            seed: OneOrMany::One(0),
            rounds: 500,
            clients: 100,
            clients_per_round: 10,
            local_epochs: 5,
            eta: 0.05,
            batch_size: 32,
            lambda: 0.7,
            early_stopping: false,
            hidden_layers: vec![128, 128],
            clusters: [0.2, 0.4, 0.6, 0.8, 1.0]
                .into_iter()
                .map(|ratio| Cluster { ratio, fraction: 0.2 })
                .collect(),
            quantize_wire: false,
            dataset: DatasetSource::Synthetic {
                classes: 10,
                dim: 32,
                per_class: 600,
                separation: 3.0,
            },
            out_dir: PathBuf::from("out"),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let cfg: Self = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let mut errs = Vec::new();
        let mut err = |field: &str, message: String| {
            errs.push(FieldError {
                field: field.into(),
                message,
            })
        };
        let registry = MethodRegistry::builtin();
        let methods = self.method.values();
        if methods.is_empty() {
            err("method", "at least one method is required".into());
        }
        for m in &methods {
            if registry.get(m).is_none() {
                let known: Vec<_> = registry.names().collect();
                err("method", format!("unknown method {m:?}; expected one of {}", known.join(", ")));
            }
        }
        let alphas = self.alpha.values();
        if alphas.is_empty() {
            err("alpha", "at least one value is required".into());
        }
        for a in alphas {
            if !(a.is_finite() && a > 0.0) {
                err("alpha", format!("must be positive and finite, got {a}"));
            }
        }
        if self.seed.values().is_empty() {
            err("seed", "at least one value is required".into());
        }
        if self.clients < 2 {
            err("clients", format!("need at least 2, got {}", self.clients));
        }
        if self.clients_per_round == 0 {
            err("clients_per_round", "must be positive".into());
        }
        if self.local_epochs == 0 {
            err("local_epochs", "must be positive".into());
        }
        if !(self.eta.is_finite() && self.eta > 0.0) {
            err("eta", format!("must be positive and finite, got {}", self.eta));
        }
        if self.batch_size == 0 {
            err("batch_size", "must be positive".into());
        }
        if !(self.lambda > 0.0 && self.lambda < 1.0) {
            err("lambda", format!("must lie in (0, 1), got {}", self.lambda));
        }
        if self.hidden_layers.is_empty() || self.hidden_layers.contains(&0) {
            err("hidden_layers", "need at least one hidden layer, all widths positive".into());
        }
        if self.clusters.is_empty() {
            err("clusters", "at least one cluster is required".into());
        }
        for (i, c) in self.clusters.iter().enumerate() {
            if !(c.ratio > 0.0 && c.ratio <= 1.0) {
                err(&format!("clusters[{i}].ratio"), format!("must lie in (0, 1], got {}", c.ratio));
            }
            if !(c.fraction.is_finite() && c.fraction >= 0.0) {
                err(&format!("clusters[{i}].fraction"), format!("must be non-negative, got {}", c.fraction));
            }
        }
        let total: f64 = self.clusters.iter().map(|c| c.fraction).sum();
        if !self.clusters.is_empty() && (total - 1.0).abs() > 1e-9 {
            err("clusters", format!("fractions must sum to 1, got {total}"));
        }
        match &self.dataset {
            DatasetSource::Synthetic {
                classes,
                dim,
                per_class,
                separation,
            } => {
                if *classes < 2 {
                    err("dataset.classes", format!("need at least 2, got {classes}"));
                }
                if *dim < 2 {
                    err("dataset.dim", format!("need at least 2, got {dim}"));
                }
                if *per_class < 10 {
                    err("dataset.per_class", format!("need at least 10, got {per_class}"));
                }
                if !(separation.is_finite() && *separation >= 0.0) {
                    err("dataset.separation", format!("must be non-negative, got {separation}"));
                }
            }
            DatasetSource::Idx { images, labels } => {
                if images.as_os_str().is_empty() {
                    err("dataset.images", "path is empty".into());
                }
                if labels.as_os_str().is_empty() {
                    err("dataset.labels", "path is empty".into());
                }
            }
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(ConfigError::Invalid(errs))
        }
    }

    /// Active ratio of every client: clusters take contiguous id ranges sized
    /// by largest remainder.
    pub fn client_ratios(&self) -> Vec<f64> {
        let n = self.clients;
        let exact: Vec<f64> = self.clusters.iter().map(|c| c.fraction * n as f64).collect();
        let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
        let mut order: Vec<usize> = (0..counts.len()).collect();
        order.sort_by(|&a, &b| {
            let ra = exact[a] - counts[a] as f64;
            let rb = exact[b] - counts[b] as f64;
            rb.total_cmp(&ra).then(a.cmp(&b))
        });
        let short = n.saturating_sub(counts.iter().sum());
        for &i in order.iter().cycle().take(short) {
            counts[i] += 1;
        }
        self.clusters
            .iter()
            .zip(counts)
            .flat_map(|(c, k)| std::iter::repeat_n(c.ratio, k))
            .collect()
    }

    /// Every (method, alpha, seed) combination, in that nesting order.
    pub fn cells(&self) -> Vec<Cell> {
        let mut out = Vec::new();
        for method in self.method.values() {
            for alpha in self.alpha.values() {
                for seed in self.seed.values() {
                    out.push(Cell {
                        method: method.clone(),
                        alpha,
                        seed,
                    });
                }
            }
        }
        out
    }
}

/// One run of a sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub method: String,
    pub alpha: f64,
    pub seed: u64,
}

impl Cell {
    /// Directory name of the cell's artifacts.
    pub fn name(&self) -> String {
        format!("{}_a{}_s{}", self.method, self.alpha, self.seed)
    }
}
