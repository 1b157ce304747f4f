mod common;

use common::{finite_difference_check, random, Objective};
use visp_core::nn::{Conv3x3, Dense, FixedNoise, Flatten, GlobalAvgPool, Layer, MaxPool2, Model, Relu};
use visp_core::{GradStats, ProjectionState, RngStream};

const H: f64 = 1e-5;
const TOL: f64 = 1e-5;

fn visp(d: usize, seed: u64) -> ProjectionState {
    // uneven statistics so that every feature gets its own noise scale
    let mu: Vec<f64> = (0..d).map(|i| 0.5 + 0.1 * i as f64).collect();
    let sigma_sq: Vec<f64> = (0..d).map(|i| 0.2 + 0.05 * (i % 3) as f64).collect();
    let stats = GradStats::from_parts(mu, sigma_sq, 0.9, 1e-8, 0.3, 4).unwrap();
    ProjectionState::new(stats, RngStream::new(seed, 1000))
}

fn check_single(layer: Layer, in_shape: &[usize], seed: u64) {
    let name = layer.kind_name();
    let model = Model::from_layers(vec![layer]);
    let x = random(in_shape, seed);
    let out_shape = model.clone().forward(&x, visp_core::Mode::Training).unwrap().shape().to_vec();
    let w = random(&out_shape, seed + 1);
    let r = finite_difference_check(&model, &x, &Objective::Linear(w), H);
    assert!(r.checked > 0);
    assert!(r.max_rel < TOL, "{name}: {r:?}");
}

#[test]
fn dense_layer() {
    let mut rng = RngStream::new(1, 0);
    check_single(Layer::Dense(Dense::new(5, 4, &mut rng)), &[3, 5], 1);
}

#[test]
fn conv_layer() {
    let mut rng = RngStream::new(2, 0);
    check_single(Layer::Conv3x3(Conv3x3::new(2, 3, &mut rng)), &[2, 2, 4, 5], 2);
}

#[test]
fn relu_layer() {
    check_single(Layer::Relu(Relu::new()), &[4, 6], 3);
}

#[test]
fn max_pool_layer() {
    check_single(Layer::MaxPool2(MaxPool2::new()), &[2, 3, 4, 6], 4);
}

#[test]
fn global_average_pool_layer() {
    check_single(Layer::GlobalAvgPool(GlobalAvgPool::new()), &[2, 3, 3, 4], 5);
}

#[test]
fn flatten_layer() {
    check_single(Layer::Flatten(Flatten::new()), &[2, 2, 3, 3], 6);
}

#[test]
fn fixed_noise_layer() {
    let noise = FixedNoise::new(0.5, RngStream::new(7, 1000)).unwrap();
    check_single(Layer::FixedNoise(noise), &[3, 4], 7);
}

#[test]
fn projection_layer_dense() {
    check_single(Layer::Visp(visp(6, 8)), &[4, 6], 8);
}

#[test]
fn projection_layer_channels() {
    check_single(Layer::Visp(visp(3, 9)), &[2, 3, 2, 3], 9);
}

#[test]
fn tiny_mlp_with_projection() {
    let mut rng = RngStream::new(10, 0);
    let model = Model::from_layers(vec![
        Layer::Visp(visp(8, 11)),
        Layer::Dense(Dense::new(8, 4, &mut rng)),
        Layer::Relu(Relu::new()),
        Layer::Visp(visp(4, 12)),
        Layer::Dense(Dense::new(4, 2, &mut rng)),
    ]);
    let x = random(&[5, 8], 10);
    let r = finite_difference_check(&model, &x, &Objective::CrossEntropy(vec![0, 1, 1, 0, 1]), H);
    assert_eq!(r.checked, 8 * 4 + 4 + 4 * 2 + 2 + 5 * 8);
    assert!(r.max_rel < TOL, "{r:?}");
}

#[test]
fn tiny_cnn_with_projection() {
    let mut rng = RngStream::new(20, 0);
    let model = Model::from_layers(vec![
        Layer::Conv3x3(Conv3x3::new(2, 3, &mut rng)),
        Layer::Relu(Relu::new()),
        Layer::Visp(visp(3, 21)),
        Layer::MaxPool2(MaxPool2::new()),
        Layer::Conv3x3(Conv3x3::new(3, 4, &mut rng)),
        Layer::Relu(Relu::new()),
        Layer::Visp(visp(4, 22)),
        Layer::GlobalAvgPool(GlobalAvgPool::new()),
        Layer::Dense(Dense::new(4, 3, &mut rng)),
    ]);
    let x = random(&[2, 2, 6, 6], 20);
    let r = finite_difference_check(&model, &x, &Objective::CrossEntropy(vec![2, 0]), H);
    assert!(r.max_rel < TOL, "{r:?}");
}
