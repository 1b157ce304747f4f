use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::tensor::Tensor;

/// Additive Gaussian noise with a constant standard deviation, applied only in
/// training. The fixed-noise comparator for the projection layer.
#[derive(Clone, Debug)]
pub struct FixedNoise {
    std: f64,
    rng: RngStream,
    pending: Option<Vec<usize>>,
}

impl FixedNoise {
    pub fn new(std: f64, rng: RngStream) -> Result<Self> {
        if !(std >= 0.0 && std.is_finite()) {
            return Err(Error::InvalidParameter(format!("noise std must be non-negative, got {std}")));
        }
        Ok(FixedNoise { std, rng, pending: None })
    }

    pub fn std(&self) -> f64 {
        self.std
    }

    pub fn rng(&self) -> &RngStream {
        &self.rng
    }

    pub fn set_rng(&mut self, rng: RngStream) {
        self.rng = rng;
    }

    pub fn infer(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.clone())
    }

    pub fn forward_train(&mut self, x: &Tensor) -> Result<Tensor> {
        let mut out = x.clone();
        for v in out.data_mut() {
            *v += self.std * self.rng.standard_normal();
        }
        self.pending = Some(x.shape().to_vec());
        Ok(out)
    }

    /// The noise does not depend on the input, so the gradient passes through.
    pub fn backward(&mut self, grad_out: &Tensor) -> Result<Tensor> {
        let shape = self.pending.take().ok_or(Error::NoForwardRecorded)?;
        if shape != grad_out.shape() {
            return Err(Error::shape("noise backward", &shape, grad_out.shape()));
        }
        Ok(grad_out.clone())
    }
}
