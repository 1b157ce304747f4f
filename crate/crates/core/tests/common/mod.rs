//! Helpers shared by the integration test targets.
#![allow(dead_code)]

use std::path::PathBuf;

use visp_core::nn::{cross_entropy_loss, Model};
use visp_core::{Mode, RngStream, Tensor};

pub fn random(shape: &[usize], seed: u64) -> Tensor {
    let mut t = Tensor::zeros(shape);
    RngStream::new(seed, 4242).fill_standard_normal(t.data_mut());
    t
}

/// Scalar objective applied to a model's output.
pub enum Objective {
    CrossEntropy(Vec<usize>),
    /// `Σ out ⊙ weights`
    Linear(Tensor),
}

impl Objective {
    fn value_and_grad(&self, out: &Tensor) -> (f64, Tensor) {
        match self {
            Objective::CrossEntropy(labels) => cross_entropy_loss(out, labels).unwrap(),
            Objective::Linear(w) => {
                let v = out.data().iter().zip(w.data()).map(|(a, b)| a * b).sum();
                (v, w.clone())
            }
        }
    }
}

#[derive(Debug)]
pub struct FdReport {
    pub checked: usize,
    pub max_rel: f64,
    pub worst: String,
}

fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Compares back-propagated gradients of every parameter and every input
/// entry with central differences of step `h`. Each evaluation runs on a fresh
/// clone, so stochastic layers replay the same draws.
pub fn finite_difference_check(model: &Model, x: &Tensor, objective: &Objective, h: f64) -> FdReport {
    let eval = |m: &Model, x: &Tensor| {
        let mut m = m.clone();
        let out = m.forward(x, Mode::Training).unwrap();
        objective.value_and_grad(&out).0
    };

    let mut analytic = model.clone();
    let out = analytic.forward(x, Mode::Training).unwrap();
    let (_, g) = objective.value_and_grad(&out);
    let dx = analytic.backward(&g).unwrap();
    let grads: Vec<Tensor> = analytic.grads().into_iter().cloned().collect();

    let mut report = FdReport { checked: 0, max_rel: 0.0, worst: String::new() };
    let mut note = |what: String, a: f64, n: f64| {
        let r = rel_err(a, n);
        report.checked += 1;
        if r > report.max_rel {
            report.max_rel = r;
            report.worst = format!("{what}: analytic {a:e}, numeric {n:e}");
        }
    };

    for (p, grad) in grads.iter().enumerate() {
        for j in 0..grad.len() {
            let shifted = |delta: f64| {
                let mut m = model.clone();
                let mut slots = m.params_and_grads_mut();
                slots[p].0.data_mut()[j] += delta;
                drop(slots);
                eval(&m, x)
            };
            let numeric = (shifted(h) - shifted(-h)) / (2.0 * h);
            note(format!("param {p}[{j}]"), grad.data()[j], numeric);
        }
    }
    for j in 0..x.len() {
        let shifted = |delta: f64| {
            let mut xs = x.clone();
            xs.data_mut()[j] += delta;
            eval(model, &xs)
        };
        let numeric = (shifted(h) - shifted(-h)) / (2.0 * h);
        note(format!("input[{j}]"), dx.data()[j], numeric);
    }
    report
}

/// MNIST directory: `$VISP_MNIST_DIR`, else `data/mnist` at the workspace root.
pub fn mnist_dir() -> PathBuf {
    std::env::var_os("VISP_MNIST_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist"))
}

pub fn cifar_dir() -> PathBuf {
    std::env::var_os("VISP_CIFAR_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/cifar10"))
}
