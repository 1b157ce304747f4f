use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::tensor::{gemm, Op, Tensor};

/// 3×3 convolution, stride 1, zero padding 1 (spatial size preserved).
///
/// Weights are `out × (in·9)` so that one image is a single matrix product
/// against its unfolded `(in·9) × (H·W)` patch matrix.
#[derive(Clone, Debug)]
pub struct Conv3x3 {
    in_channels: usize,
    out_channels: usize,
    pub(crate) weight: Tensor,
    pub(crate) bias: Tensor,
    pub(crate) grad_weight: Tensor,
    pub(crate) grad_bias: Tensor,
    input: Option<Tensor>,
}

impl Conv3x3 {
    pub fn new(in_channels: usize, out_channels: usize, rng: &mut RngStream) -> Self {
        let fan_in = in_channels * 9;
        let bound = (6.0 / fan_in as f64).sqrt();
        let mut weight = Tensor::zeros(&[out_channels, fan_in]);
        for w in weight.data_mut() {
            *w = rng.uniform(-bound, bound);
        }
        Conv3x3 {
            in_channels,
            out_channels,
            grad_weight: Tensor::zeros(weight.shape()),
            weight,
            bias: Tensor::zeros(&[out_channels]),
            grad_bias: Tensor::zeros(&[out_channels]),
            input: None,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    pub fn infer(&self, x: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        if c != self.in_channels {
            return Err(Error::shape("conv input", &[b, self.in_channels, h, w], x.shape()));
        }
        let hw = h * w;
        let k = c * 9;
        let oc = self.out_channels;
        let mut out = Tensor::zeros(&[b, oc, h, w]);
        let mut cols = vec![0.0; k * hw];
        for (img, dst) in x
            .data()
            .chunks_exact(c * hw)
            .zip(out.data_mut().chunks_exact_mut(oc * hw))
        {
            im2col(img, c, h, w, &mut cols);
            for (plane, &bias) in dst.chunks_exact_mut(hw).zip(self.bias.data()) {
                plane.fill(bias);
            }
            gemm(Op::N(self.weight.data()), Op::N(&cols), oc, k, hw, 1.0, dst);
        }
        Ok(out)
    }

    pub fn forward_train(&mut self, x: &Tensor) -> Result<Tensor> {
        let out = self.infer(x)?;
        self.input = Some(x.clone());
        Ok(out)
    }

    pub fn backward(&mut self, grad_out: &Tensor) -> Result<Tensor> {
        let x = self.input.take().ok_or(Error::NoForwardRecorded)?;
        let (b, c, h, w) = x.dims4()?;
        let oc = self.out_channels;
        if grad_out.shape() != [b, oc, h, w] {
            return Err(Error::shape("conv backward", &[b, oc, h, w], grad_out.shape()));
        }
        let hw = h * w;
        let k = c * 9;
        self.grad_weight.data_mut().fill(0.0);
        self.grad_bias.data_mut().fill(0.0);
        let mut grad_in = Tensor::zeros(x.shape());
        let mut cols = vec![0.0; k * hw];
        let mut dcols = vec![0.0; k * hw];
        for ((img, g), gin) in x
            .data()
            .chunks_exact(c * hw)
            .zip(grad_out.data().chunks_exact(oc * hw))
            .zip(grad_in.data_mut().chunks_exact_mut(c * hw))
        {
            im2col(img, c, h, w, &mut cols);
            gemm(Op::N(g), Op::T(&cols), oc, hw, k, 1.0, self.grad_weight.data_mut());
            for (acc, plane) in self.grad_bias.data_mut().iter_mut().zip(g.chunks_exact(hw)) {
                *acc += plane.iter().sum::<f64>();
            }
            gemm(Op::T(self.weight.data()), Op::N(g), k, oc, hw, 0.0, &mut dcols);
            col2im_add(&dcols, c, h, w, gin);
        }
        Ok(grad_in)
    }
}

/// Unfolds one `C × H × W` image into `(C·9) × (H·W)` patches, zero padded.
fn im2col(img: &[f64], c: usize, h: usize, w: usize, cols: &mut [f64]) {
    let hw = h * w;
    for ch in 0..c {
        let plane = &img[ch * hw..(ch + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &mut cols[((ch * 9) + ky * 3 + kx) * hw..][..hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    let dst = &mut row[y * w..(y + 1) * w];
                    if sy < 0 || sy >= h as isize {
                        dst.fill(0.0);
                        continue;
                    }
                    let src = &plane[sy as usize * w..(sy as usize + 1) * w];
                    for (x, d) in dst.iter_mut().enumerate() {
                        let sx = x as isize + kx as isize - 1;
                        *d = if sx < 0 || sx >= w as isize { 0.0 } else { src[sx as usize] };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters patch gradients back onto the image.
fn col2im_add(cols: &[f64], c: usize, h: usize, w: usize, img: &mut [f64]) {
    let hw = h * w;
    for ch in 0..c {
        let plane = &mut img[ch * hw..(ch + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &cols[((ch * 9) + ky * 3 + kx) * hw..][..hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for x in 0..w {
                        let sx = x as isize + kx as isize - 1;
                        if sx >= 0 && sx < w as isize {
                            plane[sy as usize * w + sx as usize] += row[y * w + x];
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct sliding-window convolution.
    fn naive(conv: &Conv3x3, x: &Tensor) -> Tensor {
        let (b, c, h, w) = x.dims4().unwrap();
        let oc = conv.out_channels();
        let mut out = Tensor::zeros(&[b, oc, h, w]);
        for bi in 0..b {
            for o in 0..oc {
                for y in 0..h {
                    for xx in 0..w {
                        let mut acc = conv.bias.data()[o];
                        for ch in 0..c {
                            for ky in 0..3 {
                                for kx in 0..3 {
                                    let sy = y as isize + ky - 1;
                                    let sx = xx as isize + kx - 1;
                                    if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                                        continue;
                                    }
                                    let wv = conv.weight.data()
                                        [o * c * 9 + ch * 9 + (ky * 3 + kx) as usize];
                                    let xv = x.data()
                                        [((bi * c + ch) * h + sy as usize) * w + sx as usize];
                                    acc += wv * xv;
                                }
                            }
                        }
                        out.data_mut()[((bi * oc + o) * h + y) * w + xx] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn matches_sliding_window_reference() {
        let mut rng = RngStream::new(3, 0);
        let mut conv = Conv3x3::new(2, 3, &mut rng);
        for b in conv.bias.data_mut() {
            *b = rng.uniform(-1.0, 1.0);
        }
        let mut x = Tensor::zeros(&[2, 2, 4, 5]);
        rng.fill_standard_normal(x.data_mut());
        let fast = conv.infer(&x).unwrap();
        assert!(fast.max_abs_diff(&naive(&conv, &x)) < 1e-12);
    }

    #[test]
    fn preserves_spatial_size() {
        let mut rng = RngStream::new(0, 0);
        let conv = Conv3x3::new(3, 4, &mut rng);
        let y = conv.infer(&Tensor::zeros(&[1, 3, 32, 32])).unwrap();
        assert_eq!(y.shape(), &[1, 4, 32, 32]);
    }
}
