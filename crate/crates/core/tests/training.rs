//! Training loop behaviour on synthetic data.

use ras_core::data::{generate_sample, Sample, SyntheticSpec};
use ras_core::training::{forward_backward, train, Sgd, TrainConfig};
use ras_core::{Error, Model, NetworkSpec, Shape, Tensor};

fn samples(count: usize, seed: u64) -> Vec<Sample<f64>> {
    let spec = SyntheticSpec::new(count, 64, seed);
    (0..count).map(|i| generate_sample(&spec, i).unwrap().to_sample().unwrap()).collect()
}

fn loss_of(model: &Model<f64>, s: &Sample<f64>, cfg: &TrainConfig) -> f64 {
    let mut sgd = Sgd::new(model, cfg);
    forward_backward(model, &s.image, &s.target(), cfg, &mut sgd).unwrap()
}

#[test]
fn one_small_step_lowers_the_loss() {
    let data = samples(10, 5);
    for seed in 0..10u64 {
        let cfg = TrainConfig {
            learning_rate: 1e-7,
            weight_decay: 0.0,
            seed,
            ..TrainConfig::toy()
        };
        let mut model = Model::<f64>::randomized(NetworkSpec::toy(), seed).unwrap();
        let sample = &data[seed as usize];
        let mut sgd = Sgd::new(&model, &cfg);
        let before = forward_backward(&model, &sample.image, &sample.target(), &cfg, &mut sgd).unwrap();
        sgd.step(&mut model, &cfg);
        let after = loss_of(&model, sample, &cfg);
        assert!(after < before, "seed {seed}: {before} -> {after}");
    }
}

#[test]
fn zero_iterations_leave_the_model_unchanged() {
    let cfg = TrainConfig {
        max_iterations: 0,
        ..TrainConfig::toy()
    };
    let mut model = Model::<f64>::new(NetworkSpec::toy(), 3).unwrap();
    let before = model.clone();
    let log = train(&mut model, &samples(2, 0), &cfg, |_, _| {}).unwrap();
    assert!(log.is_empty());
    for (a, b) in model.params().iter().zip(before.params()) {
        assert_eq!(a.tensor, b.tensor);
    }
}

#[test]
fn same_seed_same_run() {
    let data = samples(4, 1);
    let cfg = TrainConfig {
        max_iterations: 6,
        iter_size: 2,
        seed: 11,
        checkpoint_every: 3,
        ..TrainConfig::toy()
    };
    let run = || {
        let mut model = Model::<f64>::new(NetworkSpec::toy(), cfg.seed).unwrap();
        let mut checkpoints = Vec::new();
        let log = train(&mut model, &data, &cfg, |it, _| checkpoints.push(it)).unwrap();
        (model, log, checkpoints)
    };
    let (m1, l1, c1) = run();
    let (m2, l2, _) = run();
    assert_eq!(c1, [3, 6]);
    assert_eq!(l1.len(), 6);
    assert!(l1.iter().zip(&l2).all(|(a, b)| a.loss.to_bits() == b.loss.to_bits() && a.lr == b.lr));
    for (a, b) in m1.params().iter().zip(m2.params()) {
        assert!(a.tensor.data().iter().zip(b.tensor.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
    let other = TrainConfig { seed: 12, ..cfg.clone() };
    let mut m3 = Model::<f64>::new(NetworkSpec::toy(), cfg.seed).unwrap();
    let l3 = train(&mut m3, &data, &other, |_, _| {}).unwrap();
    assert_ne!(l1.iter().map(|e| e.loss).collect::<Vec<_>>(), l3.iter().map(|e| e.loss).collect::<Vec<_>>());
}

#[test]
fn divergence_reports_iteration_and_norms() {
    let cfg = TrainConfig {
        learning_rate: 1e3,
        max_iterations: 50,
        ..TrainConfig::toy()
    };
    let mut model = Model::<f64>::new(NetworkSpec::toy(), 0).unwrap();
    match train(&mut model, &samples(2, 2), &cfg, |_, _| {}) {
        Err(Error::NonFiniteLoss {
            iteration,
            param_norms,
        }) => {
            assert!((1..=50).contains(&iteration));
            assert_eq!(param_norms.len(), model.params().len());
            assert_eq!(param_norms[0].0, "stage1.conv1.weight");
        }
        other => panic!("expected divergence, got {other:?}"),
    }
}

#[test]
fn empty_dataset_is_rejected() {
    let mut model = Model::<f64>::new(NetworkSpec::toy(), 0).unwrap();
    assert_eq!(train(&mut model, &[], &TrainConfig::toy(), |_, _| {}), Err(Error::EmptyDataset));
}

#[test]
fn five_hundred_steps_halve_the_loss() {
    let data = samples(200, 0);
    let cfg = TrainConfig {
        max_iterations: 500,
        ..TrainConfig::toy()
    };
    let mut model = Model::<f64>::new(NetworkSpec::toy(), cfg.seed).unwrap();
    let log = train(&mut model, &data, &cfg, |_, _| {}).unwrap();
    let mean = |s: &[ras_core::training::LogEntry]| s.iter().map(|e| e.loss).sum::<f64>() / s.len() as f64;
    let (first, last) = (mean(&log[..50]), mean(&log[450..]));
    assert!(last < 0.5 * first, "{first} -> {last}");
}

/// FNV-1a over the outputs rounded to 1e-9, so the value does not depend
/// on the last bits the matrix kernels produce on a given CPU.
fn quantized_hash(values: &[f64]) -> u64 {
    values.iter().fold(0xcbf2_9ce4_8422_2325u64, |h, &v| {
        let q = (v * 1e9).round() as i64;
        q.to_le_bytes().iter().fold(h, |h, &b| (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01b3))
    })
}

#[test]
fn golden_forward_output() {
    let model = Model::<f64>::randomized(NetworkSpec::toy(), 42).unwrap();
    let shape = Shape::new(1, 3, 64, 64);
    let image = Tensor::new(shape, (0..shape.len()).map(|i| ((i * 37 % 101) as f64) / 101.0 - 0.5).collect()).unwrap();
    let p = model.predict(&image).unwrap();
    let mut all: Vec<f64> = p.sides.iter().flat_map(|s| s.data().to_vec()).collect();
    all.extend_from_slice(p.global.data());
    assert_eq!(quantized_hash(&all), GOLDEN);
}

const GOLDEN: u64 = 278_335_475_067_975_423;
