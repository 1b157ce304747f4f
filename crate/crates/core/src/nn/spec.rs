use std::fmt;
use std::str::FromStr;

use super::{Conv3x3, Dense, FixedNoise, Flatten, GlobalAvgPool, Layer, MaxPool2, Model, Relu};
use crate::error::{Error, Result};
use crate::gradstats::{GradStats, DEFAULT_ALPHA, DEFAULT_BETA, DEFAULT_EPSILON};
use crate::projection::ProjectionState;
use crate::rng::{streams, RngStream};

pub const MNIST_PIXELS: usize = 784;
pub const MNIST_HIDDEN: usize = 1024;
pub const CIFAR_CHANNELS: [usize; 3] = [64, 128, 256];
pub const CLASSES: usize = 10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum DatasetKind {
    Mnist,
    Cifar10,
}

impl DatasetKind {
    pub fn as_str(self) -> &'static str {
        match self {
            DatasetKind::Mnist => "mnist",
            DatasetKind::Cifar10 => "cifar10",
        }
    }
}

impl fmt::Display for DatasetKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for DatasetKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mnist" => Ok(DatasetKind::Mnist),
            "cifar10" => Ok(DatasetKind::Cifar10),
            other => Err(Error::InvalidSpec(format!(
                "unknown dataset {other:?}; valid datasets: mnist, cifar10"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Variant {
    Baseline,
    FixedNoise,
    Visp,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Baseline, Variant::FixedNoise, Variant::Visp];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::FixedNoise => "fixed_noise",
            Variant::Visp => "visp",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| {
                Error::InvalidSpec(format!(
                    "unknown variant {s:?}; valid variants: baseline, fixed_noise, visp"
                ))
            })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VispParams {
    pub beta: f64,
    pub epsilon: f64,
    pub alpha: f64,
}

impl Default for VispParams {
    fn default() -> Self {
        VispParams {
            beta: DEFAULT_BETA,
            epsilon: DEFAULT_EPSILON,
            alpha: DEFAULT_ALPHA,
        }
    }
}

/// What sits at the three regularizer positions of a network.
#[derive(Clone, Debug, PartialEq)]
pub enum Regularizer {
    None,
    /// One standard deviation per position, input side first.
    FixedNoise { stds: [f64; 3] },
    Visp(VispParams),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelSpec {
    pub dataset: DatasetKind,
    pub regularizer: Regularizer,
    pub seed: u64,
}

impl ModelSpec {
    /// Spec with the default hyperparameters for the variant: noise stds
    /// 0.2/0.5/0.5 on MNIST and 0.05 throughout on CIFAR-10; β = 0.9,
    /// ε = 1e-8, α = 0.01 for the projection.
    pub fn new(dataset: DatasetKind, variant: Variant, seed: u64) -> Self {
        let regularizer = match variant {
            Variant::Baseline => Regularizer::None,
            Variant::FixedNoise => Regularizer::FixedNoise {
                stds: match dataset {
                    DatasetKind::Mnist => [0.2, 0.5, 0.5],
                    DatasetKind::Cifar10 => [0.05; 3],
                },
            },
            Variant::Visp => Regularizer::Visp(VispParams::default()),
        };
        ModelSpec {
            dataset,
            regularizer,
            seed,
        }
    }

    pub fn variant(&self) -> Variant {
        match self.regularizer {
            Regularizer::None => Variant::Baseline,
            Regularizer::FixedNoise { .. } => Variant::FixedNoise,
            Regularizer::Visp(_) => Variant::Visp,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match &self.regularizer {
            Regularizer::None => Ok(()),
            Regularizer::FixedNoise { stds } => {
                if stds.iter().all(|s| s.is_finite() && *s >= 0.0) {
                    Ok(())
                } else {
                    Err(Error::InvalidSpec(format!("noise stds must be non-negative: {stds:?}")))
                }
            }
            Regularizer::Visp(p) => GradStats::new(1, p.beta, p.epsilon, p.alpha)
                .map(|_| ())
                .map_err(|e| Error::InvalidSpec(e.to_string())),
        }
    }

    /// Regularizer for position `k` (0, 1, 2) acting on `d` features.
    fn regularizer_layer(&self, k: usize, d: usize) -> Result<Option<Layer>> {
        let rng = RngStream::new(self.seed, streams::layer_noise(k));
        Ok(match &self.regularizer {
            Regularizer::None => None,
            Regularizer::FixedNoise { stds } => Some(Layer::FixedNoise(FixedNoise::new(stds[k], rng)?)),
            Regularizer::Visp(p) => {
                let stats = GradStats::new(d, p.beta, p.epsilon, p.alpha)?;
                Some(Layer::Visp(ProjectionState::new(stats, rng)))
            }
        })
    }
}

/// Flatten → [reg] → fc(784→1024) → ReLU → [reg] → fc(1024→1024) → ReLU →
/// [reg] → fc(1024→10).
pub fn build_mnist_mlp(spec: &ModelSpec) -> Result<Model> {
    if spec.dataset != DatasetKind::Mnist {
        return Err(Error::InvalidSpec(format!("MLP builder needs mnist, got {}", spec.dataset)));
    }
    spec.validate()?;
    let mut init = RngStream::new(spec.seed, streams::INIT);
    let mut layers = vec![Layer::Flatten(Flatten::new())];
    layers.extend(spec.regularizer_layer(0, MNIST_PIXELS)?);
    layers.push(Layer::Dense(Dense::new(MNIST_PIXELS, MNIST_HIDDEN, &mut init)));
    layers.push(Layer::Relu(Relu::new()));
    layers.extend(spec.regularizer_layer(1, MNIST_HIDDEN)?);
    layers.push(Layer::Dense(Dense::new(MNIST_HIDDEN, MNIST_HIDDEN, &mut init)));
    layers.push(Layer::Relu(Relu::new()));
    layers.extend(spec.regularizer_layer(2, MNIST_HIDDEN)?);
    layers.push(Layer::Dense(Dense::new(MNIST_HIDDEN, CLASSES, &mut init)));
    Ok(Model::with_spec(spec.clone(), layers))
}

/// Three blocks of conv3×3 → ReLU → [reg] (→ max-pool on the first two), then
/// global average pooling and fc(256→10).
pub fn build_cifar_cnn(spec: &ModelSpec) -> Result<Model> {
    if spec.dataset != DatasetKind::Cifar10 {
        return Err(Error::InvalidSpec(format!("CNN builder needs cifar10, got {}", spec.dataset)));
    }
    spec.validate()?;
    let mut init = RngStream::new(spec.seed, streams::INIT);
    let mut layers = Vec::new();
    let mut in_c = 3;
    for (k, &out_c) in CIFAR_CHANNELS.iter().enumerate() {
        layers.push(Layer::Conv3x3(Conv3x3::new(in_c, out_c, &mut init)));
        layers.push(Layer::Relu(Relu::new()));
        layers.extend(spec.regularizer_layer(k, out_c)?);
        if k < 2 {
            layers.push(Layer::MaxPool2(MaxPool2::new()));
        }
        in_c = out_c;
    }
    layers.push(Layer::GlobalAvgPool(GlobalAvgPool::new()));
    layers.push(Layer::Dense(Dense::new(in_c, CLASSES, &mut init)));
    Ok(Model::with_spec(spec.clone(), layers))
}
