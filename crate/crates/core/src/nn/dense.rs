use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::tensor::{gemm, Op, Tensor};

/// Fully connected layer `y = x·W + b` with `W` stored as `in × out`.
#[derive(Clone, Debug)]
pub struct Dense {
    pub(crate) weight: Tensor,
    pub(crate) bias: Tensor,
    pub(crate) grad_weight: Tensor,
    pub(crate) grad_bias: Tensor,
    input: Option<Tensor>,
}

impl Dense {
    /// He-uniform weights (`±√(6/fan_in)`), zero bias.
    pub fn new(inputs: usize, outputs: usize, rng: &mut RngStream) -> Self {
        let bound = (6.0 / inputs as f64).sqrt();
        let mut weight = Tensor::zeros(&[inputs, outputs]);
        for w in weight.data_mut() {
            *w = rng.uniform(-bound, bound);
        }
        Self::from_params(weight, Tensor::zeros(&[outputs])).expect("consistent shapes")
    }

    pub fn from_params(weight: Tensor, bias: Tensor) -> Result<Self> {
        let (_, outputs) = weight.dims2()?;
        if bias.shape() != [outputs] {
            return Err(Error::shape("dense bias", &[outputs], bias.shape()));
        }
        Ok(Dense {
            grad_weight: Tensor::zeros(weight.shape()),
            grad_bias: Tensor::zeros(bias.shape()),
            weight,
            bias,
            input: None,
        })
    }

    pub fn inputs(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn outputs(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn weight(&self) -> &Tensor {
        &self.weight
    }

    pub fn bias(&self) -> &Tensor {
        &self.bias
    }

    pub fn infer(&self, x: &Tensor) -> Result<Tensor> {
        let (b, inputs) = x.dims2()?;
        if inputs != self.inputs() {
            return Err(Error::shape("dense input", &[b, self.inputs()], x.shape()));
        }
        let n = self.outputs();
        let mut out = Tensor::zeros(&[b, n]);
        for row in out.data_mut().chunks_exact_mut(n) {
            row.copy_from_slice(self.bias.data());
        }
        gemm(Op::N(x.data()), Op::N(self.weight.data()), b, inputs, n, 1.0, out.data_mut());
        Ok(out)
    }

    pub fn forward_train(&mut self, x: &Tensor) -> Result<Tensor> {
        let out = self.infer(x)?;
        self.input = Some(x.clone());
        Ok(out)
    }

    pub fn backward(&mut self, grad_out: &Tensor) -> Result<Tensor> {
        let x = self.input.take().ok_or(Error::NoForwardRecorded)?;
        let (b, inputs) = x.dims2()?;
        let n = self.outputs();
        if grad_out.shape() != [b, n] {
            return Err(Error::shape("dense backward", &[b, n], grad_out.shape()));
        }
        gemm(
            Op::T(x.data()),
            Op::N(grad_out.data()),
            inputs,
            b,
            n,
            0.0,
            self.grad_weight.data_mut(),
        );
        let gb = self.grad_bias.data_mut();
        gb.fill(0.0);
        for row in grad_out.data().chunks_exact(n) {
            for (acc, g) in gb.iter_mut().zip(row) {
                *acc += g;
            }
        }
        let mut grad_in = Tensor::zeros(&[b, inputs]);
        gemm(
            Op::N(grad_out.data()),
            Op::T(self.weight.data()),
            b,
            n,
            inputs,
            0.0,
            grad_in.data_mut(),
        );
        Ok(grad_in)
    }
}
