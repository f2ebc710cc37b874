use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::corruption::{CorruptionMode, CorruptionSpec};
use crate::data::SyntheticSpec;
use crate::detect_aum::DEFAULT_THRESHOLD_FRACTION;
use crate::detect_cl::PruneMethod;
use crate::exec::derive_seed;
use crate::losses::{LossKind, LossSpec};
use crate::net::{Activation, NetConfig};
use crate::training::{Instrumentation, TrainConfig};

use super::Error;

/// One experiment: a dataset, a corruption process, a detector, a model and
/// its training recipe, repeated over `seeds`.
///
/// Every field has a default, so a config file only lists what it changes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seeds: Vec<u64>,
    pub dataset: DatasetConfig,
    pub corruption: CorruptionConfig,
    pub detector: DetectorConfig,
    pub network: NetworkConfig,
    pub train: TrainSection,
    pub loss: LossSpec,
    pub sweep: SweepConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seeds: vec![1, 2, 3, 4, 5],
            dataset: DatasetConfig::default(),
            corruption: CorruptionConfig::default(),
            detector: DetectorConfig::default(),
            network: NetworkConfig::default(),
            train: TrainSection::default(),
            loss: LossSpec::ce(),
            sweep: SweepConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum DatasetConfig {
    Synthetic(SyntheticSpec),
    Csv(CsvSource),
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig::Synthetic(SyntheticSpec::default())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CsvSource {
    pub path: PathBuf,
    /// Class names in index order. Inferred from the file when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label_names: Option<Vec<String>>,
}

/// Corruption parameters; the seed comes from each trial.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorruptionConfig {
    pub mode: CorruptionMode,
    pub eta: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub transition: Option<Vec<Vec<f64>>>,
}

impl Default for CorruptionConfig {
    fn default() -> Self {
        Self {
            mode: CorruptionMode::Uniform,
            eta: 0.3,
            transition: None,
        }
    }
}

impl CorruptionConfig {
    pub fn spec(&self, seed: u64) -> CorruptionSpec {
        CorruptionSpec {
            mode: self.mode,
            eta: self.eta,
            transition: self.transition.clone(),
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum DetectorConfig {
    Cl {
        #[serde(default)]
        method: PruneMethod,
        #[serde(default = "default_folds")]
        folds: usize,
    },
    Aum {
        #[serde(default = "default_threshold_fraction")]
        threshold_fraction: f64,
    },
}

fn default_folds() -> usize {
    5
}

fn default_threshold_fraction() -> f64 {
    DEFAULT_THRESHOLD_FRACTION
}

impl Default for DetectorConfig {
    fn default() -> Self {
        DetectorConfig::Cl {
            method: PruneMethod::Both,
            folds: default_folds(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkConfig {
    pub hidden_dims: Vec<usize>,
    pub activation: Activation,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            hidden_dims: vec![32],
            activation: Activation::Relu,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub lr_decay: Vec<(usize, f64)>,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 32,
            learning_rate: 0.01,
            lr_decay: Vec::new(),
        }
    }
}

/// Grid axes for `sweep`. An empty axis is not swept.
///
/// A `gamma` point trains with the configured loss if it takes a γ (FL, BL,
/// ANL-FL) and with BL otherwise; a `cutoff` point likewise falls back to PZ.
/// `delay` points keep the configured loss. Every point is repeated for each
/// `eta` (or the configured corruption rate when `eta` is empty).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub gamma: Vec<f64>,
    pub cutoff: Vec<f64>,
    pub delay: Vec<usize>,
    pub eta: Vec<f64>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            gamma: (0..10).map(|i| f64::from(i) / 10.0).collect(),
            cutoff: vec![0.0, 0.005, 0.01, 0.02, 0.04, 0.06, 0.08, 0.1, 0.15],
            delay: Vec::new(),
            eta: Vec::new(),
        }
    }
}

/// A single grid point of a sweep.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SweepPoint {
    pub param_name: &'static str,
    pub param_value: f64,
    pub eta: f64,
}

impl SweepConfig {
    pub fn is_empty(&self) -> bool {
        self.gamma.is_empty() && self.cutoff.is_empty() && self.delay.is_empty() && self.eta.is_empty()
    }

    /// Points ordered by `eta`, then axis (`gamma`, `cutoff`, `delay`), then value.
    pub fn points(&self, default_eta: f64) -> Vec<SweepPoint> {
        let etas = if self.eta.is_empty() {
            vec![default_eta]
        } else {
            self.eta.clone()
        };
        let mut out = Vec::new();
        for &eta in &etas {
            let before = out.len();
            let axes = [
                ("gamma", self.gamma.clone()),
                ("cutoff", self.cutoff.clone()),
                ("delay", self.delay.iter().map(|&d| d as f64).collect()),
            ];
            for (name, values) in axes {
                out.extend(values.into_iter().map(|v| SweepPoint {
                    param_name: name,
                    param_value: v,
                    eta,
                }));
            }
            if out.len() == before {
                out.push(SweepPoint {
                    param_name: "eta",
                    param_value: eta,
                    eta,
                });
            }
        }
        out
    }
}

/// Seeds for the random streams of one trial, all derived from the trial seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct TrialSeeds {
    pub trial: u64,
    pub corruption: u64,
    pub folds: u64,
    pub init: u64,
    pub shuffle: u64,
    pub threshold_samples: u64,
}

impl TrialSeeds {
    pub fn derive(trial: u64) -> Self {
        Self {
            trial,
            corruption: derive_seed(trial, 0),
            folds: derive_seed(trial, 1),
            init: derive_seed(trial, 2),
            shuffle: derive_seed(trial, 3),
            threshold_samples: derive_seed(trial, 4),
        }
    }
}

fn uses_gamma(kind: LossKind) -> bool {
    matches!(kind, LossKind::Focal | LossKind::Blurry | LossKind::ActiveNegativeFl)
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, Error> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("experiment config is always representable as TOML")
    }

    /// Checks every section without touching any data file.
    pub fn validate(&self) -> Result<(), Error> {
        let cfg_err = |m: String| Err(Error::Config(m));
        if self.seeds.is_empty() {
            return cfg_err("seeds must not be empty".into());
        }
        if let DatasetConfig::Synthetic(spec) = &self.dataset {
            spec.validate().map_err(|e| Error::Config(e.to_string()))?;
        }
        for eta in std::iter::once(self.corruption.eta).chain(self.sweep.eta.iter().copied()) {
            if !(0.0..1.0).contains(&eta) {
                return cfg_err(format!("corruption rate must lie in [0, 1), got {eta}"));
            }
        }
        if self.corruption.mode == CorruptionMode::Asymmetric && self.corruption.transition.is_none() {
            return cfg_err("asymmetric corruption needs a transition matrix".into());
        }
        match &self.detector {
            DetectorConfig::Cl { folds, .. } if *folds < 2 => {
                return cfg_err(format!("detector.folds must be >= 2, got {folds}"));
            }
            DetectorConfig::Aum { threshold_fraction: f } if !(*f > 0.0 && *f < 0.5) => {
                return cfg_err(format!("detector.threshold_fraction must lie in (0, 0.5), got {f}"));
            }
            _ => {}
        }
        if let DatasetConfig::Synthetic(spec) = &self.dataset {
            self.net_config(spec.feature_dim, spec.num_classes, 0)
                .validate()
                .map_err(|e| Error::Config(e.to_string()))?;
        } else if self.network.hidden_dims.contains(&0) {
            return cfg_err("network.hidden_dims entries must be >= 1".into());
        }
        self.train_config(self.loss, 0)
            .validate()
            .map_err(|e| Error::Config(e.to_string()))?;
        for point in self.sweep.points(self.corruption.eta) {
            self.train_config(self.loss_at(&point), 0)
                .validate()
                .map_err(|e| Error::Config(format!("sweep point {}={}: {e}", point.param_name, point.param_value)))?;
        }
        Ok(())
    }

    pub fn net_config(&self, input_dim: usize, num_classes: usize, init_seed: u64) -> NetConfig {
        NetConfig {
            input_dim,
            hidden_dims: self.network.hidden_dims.clone(),
            num_classes,
            activation: self.network.activation,
            init_seed,
        }
    }

    pub fn train_config(&self, loss: LossSpec, shuffle_seed: u64) -> TrainConfig {
        TrainConfig {
            epochs: self.train.epochs,
            batch_size: self.train.batch_size,
            learning_rate: self.train.learning_rate,
            lr_decay: self.train.lr_decay.clone(),
            loss,
            shuffle_seed,
            instrument: Instrumentation::default(),
        }
    }

    /// The loss trained at a sweep point.
    pub fn loss_at(&self, point: &SweepPoint) -> LossSpec {
        let mut loss = self.loss;
        match point.param_name {
            "gamma" => {
                if !uses_gamma(loss.kind) {
                    loss = LossSpec {
                        kind: LossKind::Blurry,
                        ..loss
                    };
                }
                loss.gamma = point.param_value;
            }
            "cutoff" => {
                loss.kind = LossKind::PiecewiseZero;
                loss.cutoff = point.param_value;
            }
            "delay" => loss.delay = point.param_value as usize,
            _ => {}
        }
        loss
    }

    /// This config with the corruption rate and loss of a sweep point.
    pub fn at_point(&self, point: &SweepPoint) -> Self {
        let mut cfg = self.clone();
        cfg.loss = self.loss_at(point);
        cfg.corruption.eta = point.eta;
        cfg
    }
}
