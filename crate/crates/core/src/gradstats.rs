//! Running statistics of gradient magnitudes and the volatility derived from
//! them.
//!
//! For each feature `i` the tracker keeps an exponential moving average of the
//! mean absolute gradient, `mu_i`, and of the squared deviation of the raw
//! gradient from the *previous* `mu_i`, `sigma_sq_i`:
//!
//! ```text
//! mu_i       ← β·mu_i       + (1−β)·mean_b |g_bi|
//! sigma_sq_i ← β·sigma_sq_i + (1−β)·mean_b (g_bi − mu_i_old)²
//! v_i        = (√sigma_sq_i + ε) / (mu_i + ε)
//! ```
//!
//! Both averages start at zero and are not bias-corrected, so a fresh tracker
//! reports `v = 1` everywhere.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_BETA: f64 = 0.9;
pub const DEFAULT_EPSILON: f64 = 1e-8;
pub const DEFAULT_ALPHA: f64 = 0.01;

#[derive(Clone, Debug, PartialEq)]
pub struct GradStats {
    mu: Vec<f64>,
    sigma_sq: Vec<f64>,
    beta: f64,
    epsilon: f64,
    alpha: f64,
    step_count: u64,
}

impl GradStats {
    pub fn new(d: usize, beta: f64, epsilon: f64, alpha: f64) -> Result<Self> {
        validate(d, beta, epsilon, alpha)?;
        Ok(GradStats {
            mu: vec![0.0; d],
            sigma_sq: vec![0.0; d],
            beta,
            epsilon,
            alpha,
            step_count: 0,
        })
    }

    pub fn with_defaults(d: usize) -> Result<Self> {
        Self::new(d, DEFAULT_BETA, DEFAULT_EPSILON, DEFAULT_ALPHA)
    }

    /// Rebuilds a tracker from stored values, e.g. when loading a checkpoint.
    pub fn from_parts(
        mu: Vec<f64>,
        sigma_sq: Vec<f64>,
        beta: f64,
        epsilon: f64,
        alpha: f64,
        step_count: u64,
    ) -> Result<Self> {
        validate(mu.len(), beta, epsilon, alpha)?;
        if sigma_sq.len() != mu.len() {
            return Err(Error::shape("gradient statistics", &[mu.len()], &[sigma_sq.len()]));
        }
        let valid = |v: &f64| v.is_finite() && *v >= 0.0;
        if !mu.iter().all(valid) || !sigma_sq.iter().all(valid) {
            return Err(Error::InvalidParameter(
                "running statistics must be finite and non-negative".into(),
            ));
        }
        Ok(GradStats {
            mu,
            sigma_sq,
            beta,
            epsilon,
            alpha,
            step_count,
        })
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    pub fn mu(&self) -> &[f64] {
        &self.mu
    }

    pub fn sigma_sq(&self) -> &[f64] {
        &self.sigma_sq
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// Folds a `B × d` batch of gradients into the running averages.
    pub fn update(&mut self, grad_batch: &Tensor) -> Result<()> {
        let (_, d) = grad_batch.dims2()?;
        if d != self.dim() {
            return Err(Error::shape(
                "gradient statistics update",
                &[grad_batch.shape()[0], self.dim()],
                grad_batch.shape(),
            ));
        }
        self.update_rows(grad_batch.data())
    }

    /// Same as [`update`](Self::update) on a flat row-major `n × d` buffer.
    pub(crate) fn update_rows(&mut self, rows: &[f64]) -> Result<()> {
        let d = self.dim();
        debug_assert!(rows.len().is_multiple_of(d));
        let n = rows.len() / d;
        if n == 0 {
            return Err(Error::InvalidParameter("empty gradient batch".into()));
        }
        if rows.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFiniteGradient);
        }

        let mut abs_sum = vec![0.0; d];
        let mut dev_sum = vec![0.0; d];
        for row in rows.chunks_exact(d) {
            for (i, &g) in row.iter().enumerate() {
                abs_sum[i] += g.abs();
                let dev = g - self.mu[i];
                dev_sum[i] += dev * dev;
            }
        }

        let inv_n = 1.0 / n as f64;
        let keep = self.beta;
        let take = 1.0 - self.beta;
        for i in 0..d {
            self.mu[i] = keep * self.mu[i] + take * (abs_sum[i] * inv_n);
            self.sigma_sq[i] = keep * self.sigma_sq[i] + take * (dev_sum[i] * inv_n);
        }
        self.step_count += 1;
        Ok(())
    }

    /// Per-feature volatility `(√σ² + ε) / (μ + ε)`.
    pub fn volatility(&self) -> Vec<f64> {
        let eps = self.epsilon;
        self.mu
            .iter()
            .zip(&self.sigma_sq)
            .map(|(&m, &s)| (s.sqrt() + eps) / (m + eps))
            .collect()
    }

    /// Volatility scaled by `alpha`; these are the noise scales of the
    /// projection.
    pub fn transformed_volatility(&self) -> Vec<f64> {
        self.volatility().into_iter().map(|v| self.alpha * v).collect()
    }
}

fn validate(d: usize, beta: f64, epsilon: f64, alpha: f64) -> Result<()> {
    if d == 0 {
        return Err(Error::InvalidParameter("feature dimension must be at least 1".into()));
    }
    if !(0.0..1.0).contains(&beta) {
        return Err(Error::InvalidParameter(format!("beta must lie in [0, 1), got {beta}")));
    }
    if !(epsilon > 0.0 && epsilon.is_finite()) {
        return Err(Error::InvalidParameter(format!("epsilon must be positive, got {epsilon}")));
    }
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::InvalidParameter(format!("alpha must be positive, got {alpha}")));
    }
    Ok(())
}
