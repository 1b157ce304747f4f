//! Volatility-informed stochastic projection (VISP) and the small training stack
//! around it.
//!
//! A VISP layer right-multiplies activations by a random matrix `R = I + D·N`,
//! where `N` holds standard normals and `D` is a diagonal of per-feature noise
//! scales. The scales come from exponential moving averages of the gradient
//! magnitudes observed at that layer, so features whose gradients fluctuate
//! more receive stronger perturbation. At inference the layer is the identity.
//!
//! Module map:
//!
//! * [`gradstats`] running gradient statistics and the volatility vector
//! * [`projection`] the projection layer itself (dense and channel-wise)
//! * [`nn`] layers, the MNIST MLP and CIFAR-10 CNN builders, loss
//! * [`train`] SGD with momentum, evaluation, run logs, checkpoints
//! * [`data`] IDX and CIFAR-10 binary readers, normalisation, batching
//! * [`diagnostics`] volatility traces, norms, singular values, histograms

pub mod data;
pub mod diagnostics;
pub mod error;
pub mod gradstats;
pub mod nn;
pub mod projection;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use gradstats::GradStats;
pub use projection::ProjectionState;
pub use rng::{RngState, RngStream};
pub use tensor::Tensor;

/// Whether stochastic layers perturb their input.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Mode {
    #[default]
    Training,
    Eval,
}
