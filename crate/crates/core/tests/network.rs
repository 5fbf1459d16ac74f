//! Forward pass and loss checked against the plain-loop reference.

mod oracle;

use oracle::Map;
use ras_core::gradcheck::tiny_spec;
use ras_core::network::{reverse_attention, STAGES};
use ras_core::training::{side_stride, total_loss};
use ras_core::{ForwardOptions, Graph, Model, NetworkSpec, Shape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(rng: &mut ChaCha8Rng, shape: Shape, lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::new(shape, (0..shape.len()).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

fn map(t: &Tensor<f64>) -> Map {
    let s = t.shape();
    assert_eq!(s.n, 1);
    Map {
        c: s.c,
        h: s.h,
        w: s.w,
        data: t.data().to_vec(),
    }
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn oracle_conv(model: &Model<f64>, layer: &str, x: &Map) -> Map {
    let w = &model.param(&format!("{layer}.weight")).unwrap().tensor;
    let b = &model.param(&format!("{layer}.bias")).unwrap().tensor;
    oracle::conv2d(x, w.data(), b.data(), w.shape().h)
}

/// `up + R` computed with the reference convolution.
fn oracle_residual_unit(model: &Model<f64>, side: usize, tap: &Map, up: &Map) -> Map {
    let prefix = format!("side{}", side + 1);
    let mut feature = oracle_conv(model, &format!("{prefix}.reduce"), tap);
    if model.spec().attention_enabled {
        let plane = up.h * up.w;
        for (i, v) in feature.data.iter_mut().enumerate() {
            *v *= 1.0 - oracle::sigmoid(up.data[i % plane]);
        }
    }
    for k in 1..=model.spec().residual_depth {
        feature = oracle::relu(&oracle_conv(model, &format!("{prefix}.conv{k}"), &feature));
    }
    let residual = oracle_conv(model, &format!("{prefix}.score"), &feature);
    Map {
        data: up.data.iter().zip(&residual.data).map(|(u, r)| u + r).collect(),
        ..residual
    }
}

#[test]
fn residual_unit_matches_plain_loops() {
    for seed in 0..10u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let attention = seed % 2 == 0;
        let model = Model::<f64>::randomized(tiny_spec(), seed).unwrap().with_attention(attention);
        let side = (seed % STAGES as u64) as usize;
        let c = model.spec().stage_channels[side];
        let tap = random(&mut rng, Shape::new(1, c, 8, 6), 0.0, 1.0);
        let up = random(&mut rng, Shape::new(1, 1, 8, 6), -3.0, 3.0);

        let mut g = Graph::new();
        let bound = model.bind(&mut g, false);
        let (t, u) = (g.constant(tap.clone()), g.constant(up.clone()));
        let out = model.residual_unit(&mut g, &bound, side, t, u, ForwardOptions::default()).unwrap();
        let expected = oracle_residual_unit(&model, side, &map(&tap), &map(&up));
        let err = max_abs_diff(g.value(out.prediction).data(), &expected.data);
        assert!(err < 1e-12, "seed {seed}: {err}");
        assert_eq!(out.attention.is_some(), attention);
    }
}

#[test]
fn zero_side_scores_give_the_upsampled_global_map() {
    for seed in 0..5u64 {
        for size in [32, 64, 96] {
            let mut model = Model::<f64>::randomized(NetworkSpec::toy(), seed).unwrap();
            model.zero_score_layers(false);
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
            let image = random(&mut rng, Shape::new(1, 3, size, size), -0.5, 0.5);
            let p = model.predict(&image).unwrap();
            let mut expected = map(&p.global);
            for _ in 0..STAGES {
                expected = oracle::upsample(&expected, 2);
            }
            let err = max_abs_diff(p.sides[0].data(), &expected.data);
            assert!(err <= 1e-6, "seed {seed} size {size}: {err}");
            // every intermediate side output equals its upsampled deeper map
            for i in 0..STAGES {
                let deeper = if i + 1 < STAGES { &p.sides[i + 1] } else { &p.global };
                let err = max_abs_diff(p.sides[i].data(), &oracle::upsample(&map(deeper), 2).data);
                assert!(err <= 1e-12, "side {i}: {err}");
            }
        }
    }
}

#[test]
fn zeroing_all_six_score_layers_gives_zero_logits() {
    let mut model = Model::<f64>::randomized(NetworkSpec::toy(), 1).unwrap();
    model.zero_score_layers(true);
    let image = Tensor::full(Shape::new(1, 3, 64, 64), 0.25);
    let p = model.predict(&image).unwrap();
    assert!(p.sides.iter().chain([&p.global]).all(|s| s.data().iter().all(|&v| v == 0.0)));
    assert!(p.saliency().data().iter().all(|&v| v == 0.5));
}

#[test]
fn attention_maps_recompute_from_the_deeper_prediction() {
    for seed in 0..5u64 {
        let model = Model::<f64>::randomized(NetworkSpec::toy(), seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let image = random(&mut rng, Shape::new(1, 3, 64, 96), -0.5, 0.5);
        let mut g = Graph::new();
        let bound = model.bind(&mut g, false);
        let x = g.constant(image);
        let preds = model.forward(&mut g, &bound, x, ForwardOptions::default()).unwrap();
        let attention = preds.attention.unwrap();
        for i in 0..STAGES {
            let deeper = if i + 1 < STAGES { preds.sides[i + 1] } else { preds.global };
            let up = oracle::upsample(&map(g.value(deeper)), 2);
            let expected: Vec<f64> = up.data.iter().map(|&v| 1.0 - oracle::sigmoid(v)).collect();
            let stored = g.value(attention[i]).data().to_vec();
            assert!(max_abs_diff(&stored, &expected) <= 1e-12, "side {}", i + 1);
            assert!(stored.iter().all(|&a| a > 0.0 && a < 1.0));
            let again = reverse_attention(&mut g, preds.upsampled[i]);
            assert_eq!(g.value(again).data(), &stored[..]);
        }
    }
}

#[test]
fn no_attention_has_no_attention_maps() {
    let model = Model::<f64>::randomized(NetworkSpec::toy(), 0).unwrap().with_attention(false);
    let p = model.predict(&Tensor::full(Shape::new(1, 3, 32, 32), 0.1)).unwrap();
    assert!(p.attention.is_none());
}

#[test]
fn total_loss_is_the_sum_of_six_reference_terms() {
    for seed in 0..3u64 {
        let model = Model::<f64>::randomized(tiny_spec(), seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let image = random(&mut rng, Shape::new(1, 3, 32, 64), -0.5, 0.5);
        let target: Vec<f64> = (0..32 * 64).map(|_| f64::from(u8::from(rng.random_bool(0.3)))).collect();
        let target_t = Tensor::new(Shape::new(1, 1, 32, 64), target.clone()).unwrap();
        for balanced in [false, true] {
            let mut g = Graph::new();
            let bound = model.bind(&mut g, false);
            let x = g.constant(image.clone());
            let preds = model.forward(&mut g, &bound, x, ForwardOptions::default()).unwrap();
            let loss = total_loss(&mut g, &preds, &target_t, balanced).unwrap();
            let mut sum = 0.0;
            for i in 0..=STAGES {
                let s = if i < STAGES { preds.sides[i] } else { preds.global };
                let stride = side_stride(i);
                // one bilinear pass over the whole stride
                let direct = if stride == 1 { map(g.value(s)) } else { oracle::upsample(&map(g.value(s)), stride) };
                let term = oracle::bce(&direct.data, &target, balanced);
                let stored = g.value(loss.terms[i]).data()[0];
                assert!((stored - term).abs() <= 1e-12 * term.abs().max(1.0), "term {i}: {stored} vs {term}");
                sum += term;
            }
            let total = g.value(loss.total).data()[0];
            assert!((total - sum).abs() <= 1e-12 * sum.abs(), "{total} vs {sum}");
        }
    }
}
