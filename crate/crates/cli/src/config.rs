//! Run configuration: a flat TOML file, overridden by command-line flags.
//!
//! Every key is optional in the file. Keys and their flag equivalents:
//!
//! | key             | flag              | default                          |
//! |-----------------|-------------------|----------------------------------|
//! | `dataset`       | `--dataset`       | `"mnist"`                        |
//! | `variant`       | `--variant`       | `"visp"`                         |
//! | `epochs`        | `--epochs`        | `200`                            |
//! | `batch_size`    | `--batch-size`    | `512`                            |
//! | `lr`            | `--lr`            | `0.01`                           |
//! | `momentum`      | `--momentum`      | `0.9`                            |
//! | `seed`          | `--seed`          | `0`                              |
//! | `alpha`         | `--alpha`         | `0.01`                           |
//! | `beta`          | `--beta`          | `0.9`                            |
//! | `epsilon`       | `--epsilon`       | `1e-8`                           |
//! | `subset`        | `--subset`        | `0` (full training split)        |
//! | `diag_interval` | `--diag-interval` | `500` (`0` disables diagnostics) |
//! | `eval_every`    | `--eval-every`    | `1`                              |
//! | `data_dir`      | `--data-dir`      | `"data/<dataset>"`               |
//! | `out`           | `--out`           | `"runs/<dataset>_<variant>_seed<seed>"` |

use std::path::{Path, PathBuf};

use clap::Args;
use serde::{Deserialize, Serialize};
use visp_core::gradstats::{DEFAULT_ALPHA, DEFAULT_BETA, DEFAULT_EPSILON};
use visp_core::nn::{DatasetKind, ModelSpec, Regularizer, Variant, VispParams};
use visp_core::train::TrainConfig;

/// Contents of a config file; absent keys fall back to flags or defaults.
#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub dataset: Option<String>,
    pub variant: Option<String>,
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub lr: Option<f64>,
    pub momentum: Option<f64>,
    pub seed: Option<u64>,
    pub alpha: Option<f64>,
    pub beta: Option<f64>,
    pub epsilon: Option<f64>,
    pub subset: Option<usize>,
    pub diag_interval: Option<u64>,
    pub eval_every: Option<usize>,
    pub data_dir: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

#[derive(Args, Clone, Debug, Default)]
pub struct ConfigFlags {
    /// Config file (flat TOML); flags override its values
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// mnist or cifar10
    #[arg(long)]
    pub dataset: Option<String>,
    /// baseline, fixed_noise or visp
    #[arg(long)]
    pub variant: Option<String>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Learning rate
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub momentum: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Volatility scale of the projection noise
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Decay of the gradient moving averages
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub epsilon: Option<f64>,
    /// Train on this many shuffled training examples (0 = all)
    #[arg(long)]
    pub subset: Option<usize>,
    /// Steps between diagnostic snapshots (0 = off)
    #[arg(long)]
    pub diag_interval: Option<u64>,
    /// Epochs between test-set evaluations
    #[arg(long)]
    pub eval_every: Option<usize>,
    /// Directory holding the dataset files
    #[arg(long)]
    pub data_dir: Option<PathBuf>,
    /// Run directory
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Fully resolved configuration, as recorded in the run manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub dataset: String,
    pub variant: String,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub seed: u64,
    pub alpha: f64,
    pub beta: f64,
    pub epsilon: f64,
    pub subset: usize,
    pub diag_interval: u64,
    pub eval_every: usize,
    pub data_dir: PathBuf,
    pub out: PathBuf,
}

#[derive(Debug)]
pub struct ConfigError(pub String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

pub fn read_file(path: &Path) -> Result<FileConfig, ConfigError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| ConfigError(format!("cannot read config {}: {e}", path.display())))?;
    parse_file(&text).map_err(|e| ConfigError(format!("{}: {}", path.display(), e.0)))
}

pub fn parse_file(text: &str) -> Result<FileConfig, ConfigError> {
    toml::from_str(text).map_err(|e| ConfigError(e.to_string().trim().to_string()))
}

impl RunConfig {
    /// Layers flags over the file over the defaults, then validates.
    pub fn resolve(flags: &ConfigFlags) -> Result<Self, ConfigError> {
        let file = match &flags.config {
            Some(p) => read_file(p)?,
            None => FileConfig::default(),
        };
        Self::merge(&file, flags)
    }

    pub fn merge(file: &FileConfig, flags: &ConfigFlags) -> Result<Self, ConfigError> {
        macro_rules! pick {
            ($field:ident, $default:expr) => {
                flags.$field.clone().or_else(|| file.$field.clone()).unwrap_or($default)
            };
        }
        let dataset = pick!(dataset, "mnist".to_string());
        let variant = pick!(variant, "visp".to_string());
        let seed = pick!(seed, 0);
        let cfg = RunConfig {
            epochs: pick!(epochs, 200),
            batch_size: pick!(batch_size, 512),
            lr: pick!(lr, 0.01),
            momentum: pick!(momentum, 0.9),
            alpha: pick!(alpha, DEFAULT_ALPHA),
            beta: pick!(beta, DEFAULT_BETA),
            epsilon: pick!(epsilon, DEFAULT_EPSILON),
            subset: pick!(subset, 0),
            diag_interval: pick!(diag_interval, 500),
            eval_every: pick!(eval_every, 1),
            data_dir: pick!(data_dir, PathBuf::from("data").join(&dataset)),
            out: pick!(out, PathBuf::from(format!("runs/{dataset}_{variant}_seed{seed}"))),
            dataset,
            variant,
            seed,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.dataset_kind()?;
        self.model_spec()?
            .validate()
            .map_err(|e| ConfigError(e.to_string()))?;
        self.train_config()
            .validate()
            .map_err(|e| ConfigError(e.to_string()))
    }

    pub fn dataset_kind(&self) -> Result<DatasetKind, ConfigError> {
        self.dataset.parse().map_err(|e: visp_core::Error| ConfigError(e.to_string()))
    }

    pub fn variant(&self) -> Result<Variant, ConfigError> {
        self.variant.parse().map_err(|e: visp_core::Error| ConfigError(e.to_string()))
    }

    pub fn model_spec(&self) -> Result<ModelSpec, ConfigError> {
        let mut spec = ModelSpec::new(self.dataset_kind()?, self.variant()?, self.seed);
        if let Regularizer::Visp(_) = spec.regularizer {
            spec.regularizer = Regularizer::Visp(VispParams {
                alpha: self.alpha,
                beta: self.beta,
                epsilon: self.epsilon,
            });
        }
        Ok(spec)
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            learning_rate: self.lr,
            momentum: self.momentum,
            seed: self.seed,
            eval_every: self.eval_every,
            diag_interval: (self.diag_interval > 0).then_some(self.diag_interval),
            out_dir: Some(self.out.clone()),
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}
