use super::*;
use crate::data::Normalization;
use crate::nn::{Dense, DatasetKind, Layer, ModelSpec, Variant};

/// Learnable toy MNIST-shaped data: the label is the argmax of the first ten
/// pixels.
fn toy_mnist(n: usize, seed: u64) -> Dataset {
    let mut x = Tensor::zeros(&[n, 784]);
    RngStream::new(seed, 77).fill_standard_normal(x.data_mut());
    let labels = x.data().chunks(784).map(|r| argmax(&r[..10])).collect();
    let norm = Normalization {
        mean: vec![0.0],
        std: vec![1.0],
    };
    Dataset::new(x, labels, norm).unwrap()
}

fn small_config(epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size: 16,
        seed: 5,
        diag_interval: None,
        ..TrainConfig::default()
    }
}

fn mnist_model(variant: Variant, seed: u64) -> Model {
    Model::build(&ModelSpec::new(DatasetKind::Mnist, variant, seed)).unwrap()
}

fn tiny_dense() -> Model {
    let w = Tensor::from_rows(&[&[0.5, -1.0], &[2.0, 0.25]]);
    let b = Tensor::new(vec![2], vec![0.1, -0.2]).unwrap();
    Model::from_layers(vec![Layer::Dense(Dense::from_params(w, b).unwrap())])
}

fn backprop(model: &mut Model) {
    let x = Tensor::from_rows(&[&[1.0, 2.0], &[-0.5, 0.3]]);
    let logits = model.forward(&x, Mode::Training).unwrap();
    let (_, d) = cross_entropy_loss(&logits, &[0, 1]).unwrap();
    model.backward(&d).unwrap();
}

#[test]
fn zero_learning_rate_leaves_parameters() {
    let mut m = tiny_dense();
    let before: Vec<Tensor> = m.params().into_iter().cloned().collect();
    let mut opt = SgdMomentum::new(&m, 0.0, 0.9);
    for _ in 0..3 {
        backprop(&mut m);
        opt.step(&mut m);
    }
    let after: Vec<Tensor> = m.params().into_iter().cloned().collect();
    assert_eq!(before, after);
}

#[test]
fn zero_momentum_is_plain_sgd() {
    let mut m = tiny_dense();
    backprop(&mut m);
    let want: Vec<Vec<f64>> = m
        .params()
        .iter()
        .zip(m.grads())
        .map(|(p, g)| p.data().iter().zip(g.data()).map(|(p, g)| p - 0.1 * g).collect())
        .collect();
    SgdMomentum::new(&m, 0.1, 0.0).step(&mut m);
    let got: Vec<Vec<f64>> = m.params().iter().map(|p| p.data().to_vec()).collect();
    assert_eq!(got, want);
}

#[test]
fn momentum_accumulates_velocity() {
    let mut m = tiny_dense();
    let mut opt = SgdMomentum::new(&m, 0.1, 0.9);
    backprop(&mut m);
    let g1 = m.grads()[0].data()[0];
    let p0 = m.params()[0].data()[0];
    opt.step(&mut m);
    backprop(&mut m);
    let g2 = m.grads()[0].data()[0];
    opt.step(&mut m);
    let v1 = -0.1 * g1;
    let v2 = 0.9 * v1 - 0.1 * g2;
    assert_eq!(m.params()[0].data()[0], p0 + v1 + v2);
    assert_eq!(opt.velocities()[0].data()[0], v2);
}

#[test]
fn config_validation() {
    assert!(TrainConfig::default().validate().is_ok());
    let cases = [
        TrainConfig { epochs: 0, ..TrainConfig::default() },
        TrainConfig { batch_size: 0, ..TrainConfig::default() },
        TrainConfig { learning_rate: 0.0, ..TrainConfig::default() },
        TrainConfig { momentum: 1.0, ..TrainConfig::default() },
        TrainConfig { momentum: -0.1, ..TrainConfig::default() },
        TrainConfig { eval_every: 0, ..TrainConfig::default() },
        TrainConfig { diag_interval: Some(0), ..TrainConfig::default() },
    ];
    for c in cases {
        assert!(c.validate().is_err(), "{c:?}");
    }
}

#[test]
fn runlog_csv_round_trip() {
    let mut log = RunLog::new();
    log.push(EpochRecord { epoch: 1, train_loss: 0.5, test_loss: 0.25, test_error_percent: 7.5 })
        .unwrap();
    log.push(EpochRecord { epoch: 2, train_loss: 0.125, test_loss: 0.0625, test_error_percent: 1.0 })
        .unwrap();
    let csv = log.to_csv();
    assert_eq!(
        csv,
        "epoch,train_loss,test_loss,test_error_percent\n\
         1,0.500000,0.250000,7.500000\n\
         2,0.125000,0.062500,1.000000\n"
    );
    assert_eq!(RunLog::from_csv(&csv).unwrap(), log);
    assert_eq!(log.best_test_error(), Some(1.0));
    assert!(RunLog::from_csv("epoch,loss\n").is_err());
    assert!(RunLog::from_csv(&format!("{RUNLOG_HEADER}\n1,2,3\n")).is_err());
}

#[test]
fn runlog_rejects_bad_rows() {
    let mut log = RunLog::new();
    let row = EpochRecord { epoch: 3, train_loss: 1.0, test_loss: 1.0, test_error_percent: 50.0 };
    log.push(row).unwrap();
    assert!(log.push(row).is_err());
    assert!(log.push(EpochRecord { epoch: 4, test_error_percent: 100.5, ..row }).is_err());
}

#[test]
fn evaluate_counts_argmax_mistakes() {
    // identity-like classifier on one-hot inputs is perfect
    let mut w = Tensor::zeros(&[10, 10]);
    for i in 0..10 {
        w.data_mut()[i * 11] = 1.0;
    }
    let perfect = Model::from_layers(vec![Layer::Dense(
        Dense::from_params(w, Tensor::zeros(&[10])).unwrap(),
    )]);
    let mut x = Tensor::zeros(&[30, 10]);
    let labels: Vec<usize> = (0..30).map(|i| (i * 7) % 10).collect();
    for (i, &l) in labels.iter().enumerate() {
        x.data_mut()[i * 10 + l] = 3.0;
    }
    let norm = Normalization { mean: vec![0.0], std: vec![1.0] };
    let ds = Dataset::new(x, labels.clone(), norm).unwrap();
    let (_, err) = evaluate(&perfect, &ds).unwrap();
    assert_eq!(err, 0.0);

    // constant logits predict class 0 everywhere
    let flat = Model::from_layers(vec![Layer::Dense(
        Dense::from_params(Tensor::zeros(&[10, 10]), Tensor::zeros(&[10])).unwrap(),
    )]);
    let (loss, err) = evaluate(&flat, &ds).unwrap();
    let zeros = labels.iter().filter(|&&l| l == 0).count() as f64;
    assert!((err - 100.0 * (1.0 - zeros / 30.0)).abs() < 1e-12);
    assert!((loss - 10f64.ln()).abs() < 1e-12);
}

#[test]
fn evaluate_leaves_model_untouched() {
    let m = mnist_model(Variant::Visp, 3);
    let ds = toy_mnist(20, 1);
    let states = m.noise_rng_states();
    let stats: Vec<_> = m.projections().map(|p| p.stats().clone()).collect();
    let a = evaluate(&m, &ds).unwrap();
    let b = evaluate(&m, &ds).unwrap();
    assert_eq!(a.0.to_bits(), b.0.to_bits());
    assert_eq!(m.noise_rng_states(), states);
    assert_eq!(m.projections().map(|p| p.stats().clone()).collect::<Vec<_>>(), stats);
}

#[test]
fn same_seed_same_runlog_and_step_accounting() {
    let (train_set, test_set) = (toy_mnist(40, 1), toy_mnist(12, 2));
    let run = || train(mnist_model(Variant::Visp, 9), &train_set, &test_set, small_config(2)).unwrap();
    let (m1, log1) = run();
    let (_, log2) = run();
    assert_eq!(log1, log2);
    assert_eq!(log1.rows().len(), 2);
    // 2 epochs × ⌈40/16⌉
    assert!(m1.projections().all(|p| p.stats().step_count() == 6));
}

#[test]
fn training_reduces_loss_on_learnable_data() {
    let (train_set, test_set) = (toy_mnist(256, 1), toy_mnist(64, 2));
    let cfg = TrainConfig { batch_size: 32, ..small_config(3) };
    let (_, log) = train(mnist_model(Variant::Baseline, 2), &train_set, &test_set, cfg).unwrap();
    let losses: Vec<f64> = log.rows().iter().map(|r| r.train_loss).collect();
    assert!(losses.windows(2).all(|w| w[1] < w[0]), "{losses:?}");
}

#[test]
fn resumed_run_matches_uninterrupted_run() {
    let (train_set, test_set) = (toy_mnist(40, 3), toy_mnist(10, 4));
    for variant in Variant::ALL {
        let (_, full) =
            train(mnist_model(variant, 4), &train_set, &test_set, small_config(4)).unwrap();

        let dir = tempfile::tempdir().unwrap();
        let mut cfg = small_config(4);
        cfg.out_dir = Some(dir.path().to_path_buf());
        let mut first = Trainer::new(mnist_model(variant, 4), cfg).unwrap();
        first.run_epoch(&train_set, &test_set, &mut ()).unwrap();
        first.run_epoch(&train_set, &test_set, &mut ()).unwrap();
        drop(first);

        let mut resumed = Trainer::resume(&dir.path().join(CHECKPOINT_FILE)).unwrap();
        assert_eq!((resumed.epoch(), resumed.step()), (2, 6));
        resumed.run(&train_set, &test_set, &mut ()).unwrap();
        assert_eq!(resumed.log(), &full, "{variant}");
        let on_disk = RunLog::read_csv(&dir.path().join(RUNLOG_FILE)).unwrap();
        assert_eq!(on_disk.rows().len(), 2);
    }
}

#[test]
fn checkpoint_round_trip_is_bitwise() {
    let (train_set, test_set) = (toy_mnist(20, 5), toy_mnist(8, 6));
    let mut t = Trainer::new(mnist_model(Variant::Visp, 8), small_config(1)).unwrap();
    t.run_epoch(&train_set, &test_set, &mut ()).unwrap();
    let ckpt = t.checkpoint().unwrap();
    let bytes = ckpt.to_bytes();
    let back = Checkpoint::from_bytes(&bytes).unwrap();
    assert_eq!(back, ckpt);
    assert_eq!(back.to_bytes(), bytes);

    let model = back.restore_model().unwrap();
    assert_eq!(model.params(), t.model().params());
    assert_eq!(model.noise_rng_states(), t.model().noise_rng_states());

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.bin");
    checkpoint_save(t.model(), &path).unwrap();
    let loaded = checkpoint_load(&path).unwrap();
    assert_eq!(loaded.params(), t.model().params());
}

#[test]
fn checkpoint_rejects_corruption() {
    let ckpt = Checkpoint::of_model(&mnist_model(Variant::FixedNoise, 1)).unwrap();
    let bytes = ckpt.to_bytes();

    let mut bad = bytes.clone();
    bad[0] ^= 0xff;
    assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::FormatVersionMismatch(_))));

    let mut bad = bytes.clone();
    bad[8] = 9;
    assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::FormatVersionMismatch(_))));

    assert!(matches!(
        Checkpoint::from_bytes(&bytes[..bytes.len() - 3]),
        Err(Error::FormatVersionMismatch(_))
    ));

    let mut wrong = ckpt.clone();
    wrong.params[0] = Tensor::zeros(&[3, 3]);
    assert!(matches!(wrong.restore_model(), Err(Error::ShapeMismatch { .. })));

    let mut wrong = ckpt;
    wrong.spec = ModelSpec::new(DatasetKind::Mnist, Variant::Visp, 1);
    assert!(wrong.restore_model().is_err());

    assert!(Checkpoint::of_model(&tiny_dense()).is_err());
}

#[test]
fn non_finite_loss_aborts_with_step() {
    let train_set = toy_mnist(32, 1);
    let mut x = train_set.images().clone();
    x.data_mut()[20 * 784] = f64::NAN;
    let poisoned = Dataset::new(x, train_set.labels().to_vec(), train_set.normalization().clone()).unwrap();
    let err = train(mnist_model(Variant::Baseline, 1), &poisoned, &train_set, small_config(1)).unwrap_err();
    assert!(matches!(err, Error::NonFiniteLoss { epoch: 1, .. }), "{err}");
}

#[test]
fn observer_sees_every_step_once() {
    struct Count(Vec<StepInfo>);
    impl StepObserver for Count {
        fn after_forward(&mut self, info: StepInfo, model: &Model) -> Result<()> {
            let steps = model.projections().next().unwrap().stats().step_count();
            assert_eq!(steps, info.step);
            self.0.push(info);
            Ok(())
        }
    }
    let (train_set, test_set) = (toy_mnist(33, 1), toy_mnist(5, 2));
    let mut obs = Count(Vec::new());
    train_observed(mnist_model(Variant::Visp, 1), &train_set, &test_set, small_config(2), &mut obs)
        .unwrap();
    let steps: Vec<u64> = obs.0.iter().map(|i| i.step).collect();
    assert_eq!(steps, (0..6).collect::<Vec<_>>());
    assert_eq!(obs.0.iter().filter(|i| i.is_final).count(), 1);
    assert!(obs.0[5].is_final);
    assert_eq!(obs.0[3].epoch, 2);
}
