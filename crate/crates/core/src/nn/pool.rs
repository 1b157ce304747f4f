use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// 2×2 max pooling with stride 2. Odd trailing rows/columns are dropped.
#[derive(Clone, Debug, Default)]
pub struct MaxPool2 {
    argmax: Option<(Vec<usize>, Vec<usize>)>,
}

impl MaxPool2 {
    pub fn new() -> Self {
        Self::default()
    }

    fn pool(x: &Tensor) -> Result<(Tensor, Vec<usize>)> {
        let (b, c, h, w) = x.dims4()?;
        if h < 2 || w < 2 {
            return Err(Error::shape("max pool input", &[b, c, 2, 2], x.shape()));
        }
        let (oh, ow) = (h / 2, w / 2);
        let mut out = Tensor::zeros(&[b, c, oh, ow]);
        let mut argmax = vec![0; b * c * oh * ow];
        let src = x.data();
        for plane in 0..b * c {
            let base = plane * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = base + (2 * oy) * w + 2 * ox;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                        if src[idx] > src[best] {
                            best = idx;
                        }
                    }
                    let o = (plane * oh + oy) * ow + ox;
                    out.data_mut()[o] = src[best];
                    argmax[o] = best;
                }
            }
        }
        Ok((out, argmax))
    }

    pub fn infer(&self, x: &Tensor) -> Result<Tensor> {
        Ok(Self::pool(x)?.0)
    }

    pub fn forward_train(&mut self, x: &Tensor) -> Result<Tensor> {
        let (out, argmax) = Self::pool(x)?;
        self.argmax = Some((argmax, x.shape().to_vec()));
        Ok(out)
    }

    /// Routes each output gradient to the input position that won the max.
    pub fn backward(&mut self, grad_out: &Tensor) -> Result<Tensor> {
        let (argmax, in_shape) = self.argmax.take().ok_or(Error::NoForwardRecorded)?;
        if grad_out.len() != argmax.len() {
            return Err(Error::shape("max pool backward", &[argmax.len()], &[grad_out.len()]));
        }
        let mut grad_in = Tensor::zeros(&in_shape);
        for (&idx, &g) in argmax.iter().zip(grad_out.data()) {
            grad_in.data_mut()[idx] += g;
        }
        Ok(grad_in)
    }
}

/// Averages each channel over all spatial positions: `B×C×H×W → B×C`.
#[derive(Clone, Debug, Default)]
pub struct GlobalAvgPool {
    input_shape: Option<Vec<usize>>,
}

impl GlobalAvgPool {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn infer(&self, x: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        let hw = h * w;
        let inv = 1.0 / hw as f64;
        let data = x
            .data()
            .chunks_exact(hw)
            .map(|plane| plane.iter().sum::<f64>() * inv)
            .collect();
        Tensor::new(vec![b, c], data)
    }

    pub fn forward_train(&mut self, x: &Tensor) -> Result<Tensor> {
        let out = self.infer(x)?;
        self.input_shape = Some(x.shape().to_vec());
        Ok(out)
    }

    pub fn backward(&mut self, grad_out: &Tensor) -> Result<Tensor> {
        let shape = self.input_shape.take().ok_or(Error::NoForwardRecorded)?;
        let (b, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        if grad_out.shape() != [b, c] {
            return Err(Error::shape("global average pool backward", &[b, c], grad_out.shape()));
        }
        let hw = h * w;
        let inv = 1.0 / hw as f64;
        let mut grad_in = Tensor::zeros(&shape);
        for (plane, &g) in grad_in.data_mut().chunks_exact_mut(hw).zip(grad_out.data()) {
            plane.fill(g * inv);
        }
        Ok(grad_in)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn max_pool_routes_to_argmax_only() {
        let x = Tensor::new(
            vec![1, 1, 2, 4],
            vec![1.0, 5.0, -1.0, -2.0, 3.0, 2.0, -3.0, -0.5],
        )
        .unwrap();
        let mut pool = MaxPool2::new();
        let y = pool.forward_train(&x).unwrap();
        assert_eq!(y.data(), &[5.0, -0.5]);
        let g = pool.backward(&Tensor::new(vec![1, 1, 1, 2], vec![10.0, 20.0]).unwrap()).unwrap();
        assert_eq!(g.data(), &[0.0, 10.0, 0.0, 0.0, 0.0, 0.0, 0.0, 20.0]);
    }

    #[test]
    fn max_pool_halves_and_floors() {
        let pool = MaxPool2::new();
        assert_eq!(pool.infer(&Tensor::zeros(&[2, 3, 32, 32])).unwrap().shape(), &[2, 3, 16, 16]);
        assert_eq!(pool.infer(&Tensor::zeros(&[1, 1, 5, 3])).unwrap().shape(), &[1, 1, 2, 1]);
        assert!(pool.infer(&Tensor::zeros(&[1, 1, 1, 4])).is_err());
    }

    #[test]
    fn average_pool_spreads_gradient_uniformly() {
        let x = Tensor::new(vec![1, 2, 1, 2], vec![1.0, 3.0, -2.0, 6.0]).unwrap();
        let mut pool = GlobalAvgPool::new();
        assert_eq!(pool.forward_train(&x).unwrap().data(), &[2.0, 2.0]);
        let g = pool.backward(&Tensor::from_rows(&[&[4.0, -8.0]])).unwrap();
        assert_eq!(g.data(), &[2.0, 2.0, -4.0, -4.0]);
    }
}
