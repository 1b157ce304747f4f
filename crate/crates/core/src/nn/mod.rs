//! Layers with explicit forward/backward passes, the two reference networks,
//! and the classification loss.
//!
//! Every layer has two forward paths. `infer` takes `&self`, never touches
//! caches or random streams, and treats stochastic layers as the identity.
//! `forward_train` caches what `backward` needs and draws noise.

mod activation;
mod conv;
mod dense;
mod loss;
mod noise;
mod pool;
mod spec;

pub use activation::{Flatten, Relu};
pub use conv::Conv3x3;
pub use dense::Dense;
pub use loss::cross_entropy_loss;
pub use noise::FixedNoise;
pub use pool::{GlobalAvgPool, MaxPool2};
pub use spec::{build_cifar_cnn, build_mnist_mlp, DatasetKind, ModelSpec, Regularizer, Variant, VispParams};

pub(crate) use loss::softmax_xent_row;

use crate::error::{Error, Result};
use crate::projection::ProjectionState;
use crate::rng::{RngState, RngStream};
use crate::tensor::Tensor;
use crate::Mode;

#[derive(Clone, Debug)]
pub enum Layer {
    Dense(Dense),
    Relu(Relu),
    Conv3x3(Conv3x3),
    MaxPool2(MaxPool2),
    GlobalAvgPool(GlobalAvgPool),
    FixedNoise(FixedNoise),
    Visp(ProjectionState),
    Flatten(Flatten),
}

impl Layer {
    pub fn kind_name(&self) -> &'static str {
        match self {
            Layer::Dense(_) => "dense",
            Layer::Relu(_) => "relu",
            Layer::Conv3x3(_) => "conv3x3",
            Layer::MaxPool2(_) => "maxpool2",
            Layer::GlobalAvgPool(_) => "global_avg_pool",
            Layer::FixedNoise(_) => "fixed_noise",
            Layer::Visp(_) => "visp",
            Layer::Flatten(_) => "flatten",
        }
    }

    pub fn is_regularizer(&self) -> bool {
        matches!(self, Layer::FixedNoise(_) | Layer::Visp(_))
    }

    pub fn infer(&self, x: &Tensor) -> Result<Tensor> {
        match self {
            Layer::Dense(l) => l.infer(x),
            Layer::Relu(l) => l.infer(x),
            Layer::Conv3x3(l) => l.infer(x),
            Layer::MaxPool2(l) => l.infer(x),
            Layer::GlobalAvgPool(l) => l.infer(x),
            Layer::FixedNoise(l) => l.infer(x),
            Layer::Visp(p) => {
                let d = p.dim();
                let ok = match x.rank() {
                    2 => x.shape()[1] == d,
                    4 => x.shape()[1] == d,
                    _ => false,
                };
                if ok {
                    Ok(x.clone())
                } else {
                    Err(Error::shape("projection input", &[0, d], x.shape()))
                }
            }
            Layer::Flatten(l) => l.infer(x),
        }
    }

    pub fn forward_train(&mut self, x: &Tensor) -> Result<Tensor> {
        match self {
            Layer::Dense(l) => l.forward_train(x),
            Layer::Relu(l) => l.forward_train(x),
            Layer::Conv3x3(l) => l.forward_train(x),
            Layer::MaxPool2(l) => l.forward_train(x),
            Layer::GlobalAvgPool(l) => l.forward_train(x),
            Layer::FixedNoise(l) => l.forward_train(x),
            Layer::Visp(p) => {
                p.set_mode(Mode::Training);
                p.forward(x)
            }
            Layer::Flatten(l) => l.forward_train(x),
        }
    }

    pub fn backward(&mut self, grad_out: &Tensor) -> Result<Tensor> {
        match self {
            Layer::Dense(l) => l.backward(grad_out),
            Layer::Relu(l) => l.backward(grad_out),
            Layer::Conv3x3(l) => l.backward(grad_out),
            Layer::MaxPool2(l) => l.backward(grad_out),
            Layer::GlobalAvgPool(l) => l.backward(grad_out),
            Layer::FixedNoise(l) => l.backward(grad_out),
            Layer::Visp(p) => p.backward(grad_out),
            Layer::Flatten(l) => l.backward(grad_out),
        }
    }

    pub fn params(&self) -> Vec<&Tensor> {
        match self {
            Layer::Dense(l) => vec![&l.weight, &l.bias],
            Layer::Conv3x3(l) => vec![&l.weight, &l.bias],
            _ => Vec::new(),
        }
    }

    pub fn grads(&self) -> Vec<&Tensor> {
        match self {
            Layer::Dense(l) => vec![&l.grad_weight, &l.grad_bias],
            Layer::Conv3x3(l) => vec![&l.grad_weight, &l.grad_bias],
            _ => Vec::new(),
        }
    }

    /// Each parameter paired with its most recent gradient.
    pub fn params_and_grads_mut(&mut self) -> Vec<(&mut Tensor, &Tensor)> {
        match self {
            Layer::Dense(l) => vec![(&mut l.weight, &l.grad_weight), (&mut l.bias, &l.grad_bias)],
            Layer::Conv3x3(l) => vec![(&mut l.weight, &l.grad_weight), (&mut l.bias, &l.grad_bias)],
            _ => Vec::new(),
        }
    }

    fn rng(&self) -> Option<&RngStream> {
        match self {
            Layer::FixedNoise(l) => Some(l.rng()),
            Layer::Visp(p) => Some(p.rng()),
            _ => None,
        }
    }

    fn set_rng(&mut self, rng: RngStream) {
        match self {
            Layer::FixedNoise(l) => l.set_rng(rng),
            Layer::Visp(p) => p.set_rng(rng),
            _ => {}
        }
    }
}

/// A sequential network.
#[derive(Clone, Debug)]
pub struct Model {
    spec: Option<ModelSpec>,
    layers: Vec<Layer>,
}

impl Model {
    /// An ad-hoc model without a spec; it trains normally but cannot be
    /// checkpointed.
    pub fn from_layers(layers: Vec<Layer>) -> Self {
        Model { spec: None, layers }
    }

    pub fn build(spec: &ModelSpec) -> Result<Self> {
        match spec.dataset {
            DatasetKind::Mnist => build_mnist_mlp(spec),
            DatasetKind::Cifar10 => build_cifar_cnn(spec),
        }
    }

    pub(crate) fn with_spec(spec: ModelSpec, layers: Vec<Layer>) -> Self {
        Model {
            spec: Some(spec),
            layers,
        }
    }

    pub fn spec(&self) -> Option<&ModelSpec> {
        self.spec.as_ref()
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    /// Runs the network. `Mode::Eval` is the same as [`infer`](Self::infer).
    pub fn forward(&mut self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        match mode {
            Mode::Eval => self.infer(x),
            Mode::Training => {
                let mut h = x.clone();
                for layer in &mut self.layers {
                    h = layer.forward_train(&h)?;
                }
                Ok(h)
            }
        }
    }

    /// Deterministic forward pass; leaves caches, statistics and random
    /// streams untouched.
    pub fn infer(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = x.clone();
        for layer in &self.layers {
            h = layer.infer(&h)?;
        }
        Ok(h)
    }

    /// Back-propagates `dlogits`, leaving parameter gradients in the layers.
    /// Returns the gradient with respect to the model input.
    pub fn backward(&mut self, dlogits: &Tensor) -> Result<Tensor> {
        let mut g = dlogits.clone();
        for layer in self.layers.iter_mut().rev() {
            g = layer.backward(&g)?;
        }
        Ok(g)
    }

    pub fn params(&self) -> Vec<&Tensor> {
        self.layers.iter().flat_map(Layer::params).collect()
    }

    pub fn grads(&self) -> Vec<&Tensor> {
        self.layers.iter().flat_map(Layer::grads).collect()
    }

    pub fn params_and_grads_mut(&mut self) -> Vec<(&mut Tensor, &Tensor)> {
        self.layers
            .iter_mut()
            .flat_map(Layer::params_and_grads_mut)
            .collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    pub fn projections(&self) -> impl Iterator<Item = &ProjectionState> {
        self.layers.iter().filter_map(|l| match l {
            Layer::Visp(p) => Some(p),
            _ => None,
        })
    }

    pub fn projections_mut(&mut self) -> impl Iterator<Item = &mut ProjectionState> {
        self.layers.iter_mut().filter_map(|l| match l {
            Layer::Visp(p) => Some(p),
            _ => None,
        })
    }

    /// Random stream states of the stochastic layers, in layer order.
    pub fn noise_rng_states(&self) -> Vec<RngState> {
        self.layers.iter().filter_map(|l| l.rng()).map(RngStream::state).collect()
    }

    pub fn set_noise_rng_states(&mut self, states: &[RngState]) -> Result<()> {
        let count = self.layers.iter().filter(|l| l.rng().is_some()).count();
        if count != states.len() {
            return Err(Error::shape("noise stream states", &[count], &[states.len()]));
        }
        let mut it = states.iter();
        for layer in self.layers.iter_mut().filter(|l| l.rng().is_some()) {
            layer.set_rng(RngStream::from_state(*it.next().expect("counted")));
        }
        Ok(())
    }

    /// Identifiers of the affine layers: `fc1`, `fc2`, … for dense layers and
    /// `conv1`, … for convolutions, paired with their layer index.
    pub fn layer_ids(&self) -> Vec<(String, usize)> {
        let (mut fc, mut conv) = (0, 0);
        let mut ids = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            match layer {
                Layer::Dense(_) => {
                    fc += 1;
                    ids.push((format!("fc{fc}"), i));
                }
                Layer::Conv3x3(_) => {
                    conv += 1;
                    ids.push((format!("conv{conv}"), i));
                }
                _ => {}
            }
        }
        ids
    }

    /// Inference pass that also returns the outputs (pre-activation values) of
    /// the named affine layers, in the order requested.
    pub fn infer_with_taps(&self, x: &Tensor, ids: &[&str]) -> Result<(Tensor, Vec<Tensor>)> {
        let known = self.layer_ids();
        let mut wanted = Vec::with_capacity(ids.len());
        for id in ids {
            let idx = known
                .iter()
                .find(|(name, _)| name == id)
                .map(|(_, i)| *i)
                .ok_or_else(|| Error::UnknownLayer((*id).to_string()))?;
            wanted.push(idx);
        }
        let mut taps: Vec<Option<Tensor>> = vec![None; ids.len()];
        let mut h = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.infer(&h)?;
            for (slot, &w) in taps.iter_mut().zip(&wanted) {
                if w == i {
                    *slot = Some(h.clone());
                }
            }
        }
        Ok((h, taps.into_iter().map(|t| t.expect("tapped")).collect()))
    }
}
