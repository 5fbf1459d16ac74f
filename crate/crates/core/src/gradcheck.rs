//! Central-difference gradient checking and the per-op check suite.

use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::network::{ForwardOptions, Model, NetworkSpec};
use crate::tensor::{Shape, Tensor};
use crate::training::total_loss;

/// `|a - n| / max(1e-8, |a| + |n|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

/// [`relative_error`] of two gradients of one parameter, with Euclidean
/// norms in place of absolute values.
pub fn tensor_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |it: &mut dyn Iterator<Item = f64>| libm::sqrt(it.map(|v| v * v).sum());
    let diff = norm(&mut analytic.iter().zip(numeric).map(|(a, n)| a - n));
    diff / (norm(&mut analytic.iter().copied()) + norm(&mut numeric.iter().copied())).max(1e-8)
}

/// Largest per-input relative error between back-propagated and
/// central-difference gradients of the scalar `f` with respect to `inputs`.
pub fn grad_check<F>(inputs: &[Tensor<f64>], step: f64, f: F) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let all: Vec<usize> = (0..inputs.len()).collect();
    grad_check_subset(inputs, &all, step, f)
}

/// Like [`grad_check`] but only perturbs the inputs listed in `checked`.
pub fn grad_check_subset<F>(inputs: &[Tensor<f64>], checked: &[usize], step: f64, f: F) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs
        .iter()
        .enumerate()
        .map(|(i, t)| g.leaf(t.clone(), checked.contains(&i)))
        .collect();
    let root = f(&mut g, &vars)?;
    let base = g.branch_pattern();
    let f0 = g.value(root).data()[0];
    g.backward(root)?;

    let eval = |values: &[Tensor<f64>]| -> Result<(f64, Vec<u32>)> {
        let mut g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|t| g.constant(t.clone())).collect();
        let root = f(&mut g, &vars)?;
        Ok((g.value(root).data()[0], g.branch_pattern()))
    };

    let mut worst = 0.0f64;
    let mut work = inputs.to_vec();
    for &i in checked {
        let analytic = g.grad(vars[i]).expect("checked input has a gradient").clone();
        let mut numeric_grad = Vec::with_capacity(inputs[i].len());
        for j in 0..inputs[i].len() {
            let orig = inputs[i].data()[j];
            // A difference straddling a relu or pooling kink measures a
            // secant, not the derivative. Prefer the central difference when
            // both perturbations stay on the piece the analytic gradient is
            // for, fall back to a second-order one-sided difference when only
            // one side does, and shrink the step when neither does.
            let mut h = step;
            let numeric = loop {
                let mut at = |x: f64| -> Result<(f64, bool)> {
                    work[i].data_mut()[j] = x;
                    let (v, p) = eval(&work)?;
                    work[i].data_mut()[j] = orig;
                    Ok((v, p == base))
                };
                let (plus, plus_ok) = at(orig + h)?;
                let (minus, minus_ok) = at(orig - h)?;
                if plus_ok && minus_ok {
                    break (plus - minus) / (2.0 * h);
                }
                if plus_ok {
                    let (plus2, ok) = at(orig + 2.0 * h)?;
                    if ok {
                        break (4.0 * plus - plus2 - 3.0 * f0) / (2.0 * h);
                    }
                }
                if minus_ok {
                    let (minus2, ok) = at(orig - 2.0 * h)?;
                    if ok {
                        break (3.0 * f0 - 4.0 * minus + minus2) / (2.0 * h);
                    }
                }
                if h <= MIN_STEP {
                    break (plus - minus) / (2.0 * h);
                }
                h /= 10.0;
            };
            numeric_grad.push(numeric);
        }
        worst = worst.max(tensor_relative_error(analytic.data(), &numeric_grad));
    }
    Ok(worst)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub seeds: u64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance
    }
}

/// Tolerance for ops with curvature.
pub const NONLINEAR_TOL: f64 = 1e-4;
/// Tolerance for ops that are linear in the checked inputs.
pub const LINEAR_TOL: f64 = 1e-6;
const STEP: f64 = 1e-3;
/// Smallest step tried when backing off from a kink.
pub const MIN_STEP: f64 = 1e-6;

fn uniform(rng: &mut ChaCha8Rng, shape: Shape, lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::new(shape, (0..shape.len()).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Values bounded away from zero, for kinked ops.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: Shape) -> Tensor<f64> {
    Tensor::new(
        shape,
        (0..shape.len())
            .map(|_| {
                let m = rng.random_range(0.1..1.0);
                if rng.random_bool(0.5) {
                    m
                } else {
                    -m
                }
            })
            .collect(),
    )
    .unwrap()
}

/// Distinct values at least 0.05 apart, so no 2x2 window has a near-tie.
fn separated(rng: &mut ChaCha8Rng, shape: Shape) -> Tensor<f64> {
    let mut ranks: Vec<usize> = (0..shape.len()).collect();
    ranks.shuffle(rng);
    Tensor::new(shape, ranks.iter().map(|&r| r as f64 * 0.05 - 1.0).collect()).unwrap()
}

fn binary(rng: &mut ChaCha8Rng, shape: Shape) -> Tensor<f64> {
    Tensor::new(shape, (0..shape.len()).map(|_| f64::from(u8::from(rng.random_bool(0.4)))).collect()).unwrap()
}

/// Reduces a tensor to a scalar with fixed random weights so every output
/// element contributes with a distinct sensitivity.
fn project(g: &mut Graph<f64>, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let w = uniform(&mut rng, g.shape(y), -1.0, 1.0);
    g.weighted_sum(y, &w)
}

/// A network small enough for exhaustive finite differences.
pub fn tiny_spec() -> NetworkSpec {
    let mut spec = NetworkSpec::toy();
    spec.stage_channels = [2, 3, 3, 3, 3];
    spec.global_channels = 2;
    spec.side_channels = 2;
    spec
}

type Check = fn(u64) -> Result<f64>;

fn check_conv(seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = [1, 3, 5][(seed % 3) as usize];
    let inputs = [
        uniform(&mut rng, Shape::new(1, 2, 4, 4), -1.0, 1.0),
        uniform(&mut rng, Shape::new(2, 2, k, k), -1.0, 1.0),
        uniform(&mut rng, Shape::new(2, 1, 1, 1), -1.0, 1.0),
    ];
    grad_check(&inputs, STEP, |g, v| {
        let y = g.conv2d(v[0], v[1], v[2])?;
        project(g, y, seed)
    })
}

fn check_maxpool(seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inputs = [separated(&mut rng, Shape::new(1, 2, 4, 6))];
    grad_check(&inputs, STEP, |g, v| {
        let y = g.maxpool2(v[0])?;
        project(g, y, seed)
    })
}

fn check_relu(seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inputs = [away_from_zero(&mut rng, Shape::new(1, 2, 3, 3))];
    grad_check(&inputs, STEP, |g, v| {
        let y = g.relu(v[0]);
        project(g, y, seed)
    })
}

fn check_sigmoid(seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inputs = [uniform(&mut rng, Shape::new(1, 2, 3, 3), -4.0, 4.0)];
    grad_check(&inputs, STEP, |g, v| {
        let y = g.sigmoid(v[0]);
        project(g, y, seed)
    })
}

fn check_elementwise(seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inputs = [
        uniform(&mut rng, Shape::new(1, 3, 3, 3), -1.0, 1.0),
        uniform(&mut rng, Shape::new(1, 3, 3, 3), -1.0, 1.0),
        uniform(&mut rng, Shape::new(1, 1, 3, 3), 0.0, 1.0),
    ];
    grad_check(&inputs, STEP, |g, v| {
        let s = g.add(v[0], v[1])?;
        let p = g.mul(s, v[0])?;
        let r = g.reverse(v[2]);
        let b = g.mul(p, r)?;
        project(g, b, seed)
    })
}

fn check_upsample(seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let factor = [2, 4, 8][(seed % 3) as usize];
    let inputs = [uniform(&mut rng, Shape::new(1, 2, 3, 3), -1.0, 1.0)];
    grad_check(&inputs, STEP, |g, v| {
        let y = g.upsample(v[0], factor)?;
        project(g, y, seed)
    })
}

fn check_bce(seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = Shape::new(2, 1, 3, 4);
    let inputs = [uniform(&mut rng, shape, -3.0, 3.0)];
    let target = binary(&mut rng, shape);
    let balanced = seed.is_multiple_of(2);
    grad_check(&inputs, STEP, |g, v| g.bce_with_logits(v[0], &target, balanced))
}

/// One residual unit of the tiny network, checked with respect to its tap,
/// its upsampled input and the unit's own parameters.
fn check_residual_unit(seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let side = (seed % 5) as usize;
    let model = Model::<f64>::randomized(tiny_spec(), seed)?;
    let channels = model.spec().stage_channels[side];
    let mut inputs = vec![
        uniform(&mut rng, Shape::new(1, channels, 6, 6), 0.0, 1.0),
        uniform(&mut rng, Shape::new(1, 1, 6, 6), -2.0, 2.0),
    ];
    let prefix = alloc::format!("side{}.", side + 1);
    let mut checked = vec![0, 1];
    for (i, p) in model.params().iter().enumerate() {
        if p.name.starts_with(&prefix) {
            checked.push(i + 2);
        }
        inputs.push(p.tensor.clone());
    }
    grad_check_subset(&inputs, &checked, STEP, |g, v| {
        let out = model.residual_unit(g, &v[2..], side, v[0], v[1], ForwardOptions::default())?;
        project(g, out.prediction, seed)
    })
}

/// Full forward pass of the tiny network plus the six-term loss, checked
/// with respect to every parameter.
fn check_full_network(seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let model = Model::<f64>::randomized(tiny_spec(), seed)?;
    let image = uniform(&mut rng, Shape::new(1, 3, 32, 32), -0.5, 0.5);
    let target = binary(&mut rng, Shape::new(1, 1, 32, 32));
    let inputs: Vec<Tensor<f64>> = model.params().iter().map(|p| p.tensor.clone()).collect();
    grad_check(&inputs, STEP, |g, v| {
        let x = g.constant(image.clone());
        let preds = model.forward(g, v, x, ForwardOptions::default())?;
        Ok(total_loss(g, &preds, &target, true)?.total)
    })
}

/// Runs every op check over `seeds` seeds (the full-network check over
/// fewer, as it is far more expensive).
pub fn suite(seeds: u64) -> Result<Vec<CheckResult>> {
    let checks: [(&'static str, Check, f64, u64); 9] = [
        ("conv2d", check_conv, LINEAR_TOL, seeds),
        ("maxpool2", check_maxpool, LINEAR_TOL, seeds),
        ("relu", check_relu, LINEAR_TOL, seeds),
        ("sigmoid", check_sigmoid, NONLINEAR_TOL, seeds),
        ("elementwise", check_elementwise, NONLINEAR_TOL, seeds),
        ("bilinear_upsample", check_upsample, LINEAR_TOL, seeds),
        ("bce_from_logits", check_bce, NONLINEAR_TOL, seeds),
        ("residual_unit", check_residual_unit, NONLINEAR_TOL, seeds),
        ("full_network_loss", check_full_network, NONLINEAR_TOL, seeds.div_ceil(4)),
    ];
    checks
        .iter()
        .map(|&(name, check, tolerance, n)| {
            let mut worst = 0.0f64;
            for seed in 0..n {
                worst = worst.max(check(seed)?);
            }
            Ok(CheckResult {
                name,
                max_rel_error: worst,
                tolerance,
                seeds: n,
            })
        })
        .collect()
}
