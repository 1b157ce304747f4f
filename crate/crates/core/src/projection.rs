//! The stochastic projection layer.
//!
//! In training mode each forward call draws one `d × d` matrix
//!
//! ```text
//! R = I + diag(ṽ) · N,   N_ij ~ N(0, 1)
//! ```
//!
//! from the layer's own random stream, where `ṽ` is the transformed volatility
//! of the layer's [`GradStats`], and returns `x · R`. Convolutional activations
//! `B × C × H × W` are projected along the channel axis with the same `R` for
//! every batch element and spatial position. In eval mode the layer returns
//! its input untouched and draws nothing.
//!
//! The backward pass is where the statistics learn: the incoming gradient
//! (with respect to the projected output) is folded into the running averages,
//! and `grad · Rᵀ` is returned. `R` itself is a constant for differentiation.
//! The updated statistics take effect on the next forward call.

use crate::error::{Error, Result};
use crate::gradstats::GradStats;
use crate::rng::RngStream;
use crate::tensor::{gemm, Op, Tensor};
use crate::Mode;

#[derive(Clone, Debug)]
pub struct ProjectionState {
    stats: GradStats,
    last_r: Option<Tensor>,
    mode: Mode,
    rng: RngStream,
    scale_override: Option<Vec<f64>>,
    pending: Option<Vec<usize>>,
}

impl ProjectionState {
    pub fn new(stats: GradStats, rng: RngStream) -> Self {
        ProjectionState {
            stats,
            last_r: None,
            mode: Mode::Training,
            rng,
            scale_override: None,
            pending: None,
        }
    }

    pub fn dim(&self) -> usize {
        self.stats.dim()
    }

    pub fn stats(&self) -> &GradStats {
        &self.stats
    }

    pub fn set_stats(&mut self, stats: GradStats) -> Result<()> {
        if stats.dim() != self.dim() {
            return Err(Error::shape("projection statistics", &[self.dim()], &[stats.dim()]));
        }
        self.stats = stats;
        Ok(())
    }

    /// The most recently sampled projection, if a training forward has run.
    pub fn last_projection(&self) -> Option<&Tensor> {
        self.last_r.as_ref()
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn set_mode(&mut self, mode: Mode) {
        self.mode = mode;
    }

    pub fn rng(&self) -> &RngStream {
        &self.rng
    }

    pub fn set_rng(&mut self, rng: RngStream) {
        self.rng = rng;
    }

    /// Replaces the volatility-driven noise scales with fixed ones (`None`
    /// restores normal behaviour). Statistics still update on backward.
    pub fn force_noise_scales(&mut self, scales: Option<Vec<f64>>) -> Result<()> {
        if let Some(s) = &scales {
            if s.len() != self.dim() {
                return Err(Error::shape("noise scale override", &[self.dim()], &[s.len()]));
            }
        }
        self.scale_override = scales;
        Ok(())
    }

    /// Noise scales the next training forward will use.
    pub fn noise_scales(&self) -> Vec<f64> {
        match &self.scale_override {
            Some(s) => s.clone(),
            None => self.stats.transformed_volatility(),
        }
    }

    /// Dispatches on rank: `B × d` goes to [`forward_dense`](Self::forward_dense),
    /// `B × C × H × W` to [`forward_conv`](Self::forward_conv).
    pub fn forward(&mut self, x: &Tensor) -> Result<Tensor> {
        match x.rank() {
            2 => self.forward_dense(x),
            4 => self.forward_conv(x),
            _ => Err(Error::shape("projection input", &[0, self.dim()], x.shape())),
        }
    }

    pub fn forward_dense(&mut self, x: &Tensor) -> Result<Tensor> {
        let (_, d) = x.dims2()?;
        if d != self.dim() {
            return Err(Error::shape("dense projection", &[x.shape()[0], self.dim()], x.shape()));
        }
        if self.mode == Mode::Eval {
            return Ok(x.clone());
        }
        let r = self.sample();
        let out = project(x, &r)?;
        self.last_r = Some(r);
        self.pending = Some(x.shape().to_vec());
        Ok(out)
    }

    pub fn forward_conv(&mut self, x: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        if c != self.dim() {
            return Err(Error::shape("channel projection", &[b, self.dim(), h, w], x.shape()));
        }
        if self.mode == Mode::Eval {
            return Ok(x.clone());
        }
        let r = self.sample();
        let out = project_channels(x, &r)?;
        self.last_r = Some(r);
        self.pending = Some(x.shape().to_vec());
        Ok(out)
    }

    /// Feeds `grad_out` into the statistics and returns the input gradient.
    pub fn backward(&mut self, grad_out: &Tensor) -> Result<Tensor> {
        let expected = self.pending.as_ref().ok_or(Error::NoForwardRecorded)?;
        if grad_out.shape() != expected.as_slice() {
            return Err(Error::shape("projection backward", expected, grad_out.shape()));
        }
        let r = self.last_r.as_ref().ok_or(Error::NoForwardRecorded)?;
        let grad_in = match grad_out.rank() {
            2 => {
                self.stats.update(grad_out)?;
                project_backward(grad_out, r)?
            }
            _ => {
                self.stats.update_rows(&channels_last(grad_out)?)?;
                project_channels_backward(grad_out, r)?
            }
        };
        self.pending = None;
        Ok(grad_in)
    }

    fn sample(&mut self) -> Tensor {
        let scales = self.noise_scales();
        projection_from_scales(&scales, &mut self.rng)
    }
}

/// Draws `R = I + diag(ṽ)·N` using the statistics' transformed volatility.
pub fn build_projection(stats: &GradStats, rng: &mut RngStream) -> Tensor {
    projection_from_scales(&stats.transformed_volatility(), rng)
}

/// Draws `R = I + diag(scales)·N`. Normals are consumed in row-major order.
pub fn projection_from_scales(scales: &[f64], rng: &mut RngStream) -> Tensor {
    let d = scales.len();
    let mut data = vec![0.0; d * d];
    rng.fill_standard_normal(&mut data);
    for (i, row) in data.chunks_exact_mut(d).enumerate() {
        let s = scales[i];
        for v in row.iter_mut() {
            *v *= s;
        }
        row[i] += 1.0;
    }
    Tensor::new(vec![d, d], data).expect("square matrix")
}

/// `x · R` for `x` of shape `B × d`.
pub fn project(x: &Tensor, r: &Tensor) -> Result<Tensor> {
    x.matmul(r)
}

/// `g · Rᵀ`, the input gradient of [`project`].
pub fn project_backward(grad_out: &Tensor, r: &Tensor) -> Result<Tensor> {
    let (b, d) = grad_out.dims2()?;
    let (rd, _) = r.dims2()?;
    if rd != d {
        return Err(Error::shape("projection backward", &[d, d], r.shape()));
    }
    let mut out = Tensor::zeros(&[b, d]);
    gemm(Op::N(grad_out.data()), Op::T(r.data()), b, d, d, 0.0, out.data_mut());
    Ok(out)
}

/// Channel-axis projection of a `B × C × H × W` tensor: every spatial
/// position's channel vector `c` becomes `c · R`.
pub fn project_channels(x: &Tensor, r: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    check_square(r, c)?;
    let hw = h * w;
    let mut out = Tensor::zeros(x.shape());
    // Per batch element the activations form a C × HW matrix X; the projected
    // block is Rᵀ · X.
    for (src, dst) in x
        .data()
        .chunks_exact(c * hw)
        .zip(out.data_mut().chunks_exact_mut(c * hw))
    {
        gemm(Op::T(r.data()), Op::N(src), c, c, hw, 0.0, dst);
    }
    debug_assert_eq!(out.len(), b * c * hw);
    Ok(out)
}

/// Input gradient of [`project_channels`]: `R · G` per batch element.
pub fn project_channels_backward(grad_out: &Tensor, r: &Tensor) -> Result<Tensor> {
    let (_, c, h, w) = grad_out.dims4()?;
    check_square(r, c)?;
    let hw = h * w;
    let mut out = Tensor::zeros(grad_out.shape());
    for (src, dst) in grad_out
        .data()
        .chunks_exact(c * hw)
        .zip(out.data_mut().chunks_exact_mut(c * hw))
    {
        gemm(Op::N(r.data()), Op::N(src), c, c, hw, 0.0, dst);
    }
    Ok(out)
}

/// `E‖R − I‖²_F = d · Σ ṽ_i²`: row `i` of `R − I` holds `d` independent
/// `ṽ_i·N(0,1)` entries.
pub fn expected_frobenius_sq_deviation(stats: &GradStats) -> f64 {
    let d = stats.dim() as f64;
    d * stats
        .transformed_volatility()
        .iter()
        .map(|v| v * v)
        .sum::<f64>()
}

/// Reorders `B × C × H × W` into `(B·H·W) × C` rows.
fn channels_last(x: &Tensor) -> Result<Vec<f64>> {
    let (b, c, h, w) = x.dims4()?;
    let hw = h * w;
    let src = x.data();
    let mut rows = vec![0.0; src.len()];
    for bi in 0..b {
        for ch in 0..c {
            let plane = &src[(bi * c + ch) * hw..(bi * c + ch + 1) * hw];
            for (p, &v) in plane.iter().enumerate() {
                rows[(bi * hw + p) * c + ch] = v;
            }
        }
    }
    Ok(rows)
}

fn check_square(r: &Tensor, d: usize) -> Result<()> {
    if r.shape() != [d, d] {
        return Err(Error::shape("projection matrix", &[d, d], r.shape()));
    }
    Ok(())
}
