use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, Default)]
pub struct Relu {
    input: Option<Tensor>,
}

impl Relu {
    pub fn new() -> Self {
        Self::default()
    }

    /// NaN inputs stay NaN so that upstream numeric failures remain visible.
    pub fn infer(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.map(|v| if v > 0.0 || v.is_nan() { v } else { 0.0 }))
    }

    pub fn forward_train(&mut self, x: &Tensor) -> Result<Tensor> {
        let out = self.infer(x)?;
        self.input = Some(x.clone());
        Ok(out)
    }

    /// Gradient passes where the input was strictly positive.
    pub fn backward(&mut self, grad_out: &Tensor) -> Result<Tensor> {
        let x = self.input.take().ok_or(Error::NoForwardRecorded)?;
        if x.shape() != grad_out.shape() {
            return Err(Error::shape("relu backward", x.shape(), grad_out.shape()));
        }
        let data = x
            .data()
            .iter()
            .zip(grad_out.data())
            .map(|(&xi, &g)| if xi > 0.0 { g } else { 0.0 })
            .collect();
        Tensor::new(x.shape().to_vec(), data)
    }
}

/// Collapses everything after the batch axis.
#[derive(Clone, Debug, Default)]
pub struct Flatten {
    input_shape: Option<Vec<usize>>,
}

impl Flatten {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn infer(&self, x: &Tensor) -> Result<Tensor> {
        let b = x.shape()[0];
        let rest = x.len() / b;
        x.clone().reshape(&[b, rest])
    }

    pub fn forward_train(&mut self, x: &Tensor) -> Result<Tensor> {
        self.input_shape = Some(x.shape().to_vec());
        self.infer(x)
    }

    pub fn backward(&mut self, grad_out: &Tensor) -> Result<Tensor> {
        let shape = self.input_shape.take().ok_or(Error::NoForwardRecorded)?;
        grad_out.clone().reshape(&shape)
    }
}
