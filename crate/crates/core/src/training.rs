//! Deep supervision and the SGD training loop.
//!
//! Every side output, and the global prediction, is upsampled to the input
//! resolution and scored against the mask with binary cross-entropy; the six
//! terms are summed with equal weight. Gradients of `iter_size` consecutive
//! passes are averaged into one momentum SGD step with weight decay.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Sample;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::network::{ForwardOptions, Model, SidePredictions, GLOBAL_STRIDE, STAGES};
use crate::real::Real;
use crate::tensor::Tensor;

/// Loss terms per side output including the global branch.
pub const SIDE_TERMS: usize = STAGES + 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Forward/backward passes averaged into one optimizer step.
    pub iter_size: usize,
    pub batch_size: usize,
    /// Optimizer steps to run.
    pub max_iterations: u64,
    pub lr_decay_factor: f64,
    /// Steps per plateau-detection window; 0 disables the schedule.
    pub plateau_window: usize,
    pub seed: u64,
    pub balanced_loss: bool,
    pub detach_attention: bool,
    /// Steps between checkpoints; 0 disables them.
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig::toy()
    }
}

impl TrainConfig {
    /// Hyperparameters for fine-tuning the VGG-16 network.
    pub fn vgg16() -> Self {
        TrainConfig {
            learning_rate: 1e-8,
            iter_size: 10,
            max_iterations: 10_000,
            ..TrainConfig::toy()
        }
    }

    /// Same semantics with a learning rate usable from scratch and a
    /// budget sized for desk-scale runs.
    pub fn toy() -> Self {
        TrainConfig {
            learning_rate: 1e-5,
            momentum: 0.9,
            weight_decay: 5e-4,
            iter_size: 1,
            batch_size: 1,
            max_iterations: 2000,
            lr_decay_factor: 0.1,
            plateau_window: 500,
            seed: 0,
            balanced_loss: true,
            detach_attention: false,
            checkpoint_every: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::InvalidConfig(msg.into()));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must lie in [0, 1)");
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad("weight_decay must be non-negative");
        }
        if self.iter_size == 0 {
            return bad("iter_size must be at least 1");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if !(self.lr_decay_factor > 0.0 && self.lr_decay_factor <= 1.0) {
            return bad("lr_decay_factor must lie in (0, 1]");
        }
        Ok(())
    }

    pub fn forward_options(&self) -> ForwardOptions {
        ForwardOptions {
            detach_attention: self.detach_attention,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LossTerms {
    pub total: Var,
    /// `terms[i]` scores side output `i + 1`; `terms[5]` the global branch.
    pub terms: [Var; SIDE_TERMS],
}

/// Upsampling factor that brings side output `i + 1` (or the global
/// prediction for `i == 5`) to input resolution.
pub fn side_stride(i: usize) -> usize {
    if i == STAGES {
        GLOBAL_STRIDE
    } else {
        1 << i
    }
}

/// Sum of the six per-side cross-entropy terms against `target` at input
/// resolution.
pub fn total_loss<T: Real>(
    g: &mut Graph<T>,
    preds: &SidePredictions,
    target: &Tensor<T>,
    balanced: bool,
) -> Result<LossTerms> {
    let maps: [Var; SIDE_TERMS] = core::array::from_fn(|i| if i == STAGES { preds.global } else { preds.sides[i] });
    let mut terms = [preds.global; SIDE_TERMS];
    for (i, &map) in maps.iter().enumerate() {
        let stride = side_stride(i);
        let full = if stride == 1 { map } else { g.upsample(map, stride)? };
        if g.shape(full) != target.shape() {
            return Err(Error::ShapeMismatch {
                op: "total_loss",
                left: g.shape(full),
                right: target.shape(),
            });
        }
        terms[i] = g.bce_with_logits(full, target, balanced)?;
    }
    let mut total = terms[0];
    for &t in &terms[1..] {
        total = g.add(total, t)?;
    }
    Ok(LossTerms { total, terms })
}

/// Momentum SGD state, gradient accumulators and the plateau schedule.
#[derive(Debug, Clone)]
pub struct Sgd<T> {
    velocity: Vec<Vec<T>>,
    accum: Vec<Vec<T>>,
    pending: usize,
    lr: f64,
    iteration: u64,
    losses: Vec<f64>,
    last_decay: Option<u64>,
}

impl<T: Real> Sgd<T> {
    pub fn new(model: &Model<T>, cfg: &TrainConfig) -> Self {
        let zeros = || model.params().iter().map(|p| vec![T::ZERO; p.tensor.len()]).collect();
        Sgd {
            velocity: zeros(),
            accum: zeros(),
            pending: 0,
            lr: cfg.learning_rate,
            iteration: 0,
            losses: Vec::new(),
            last_decay: None,
        }
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn iteration(&self) -> u64 {
        self.iteration
    }

    pub fn velocity(&self) -> &[Vec<T>] {
        &self.velocity
    }

    /// Number of gradient sets accumulated since the last step.
    pub fn pending(&self) -> usize {
        self.pending
    }

    /// Adds one pass's gradients, in parameter order.
    pub fn accumulate<'a>(&mut self, grads: impl IntoIterator<Item = &'a [T]>) {
        for (acc, g) in self.accum.iter_mut().zip(grads) {
            for (a, &v) in acc.iter_mut().zip(g) {
                *a += v;
            }
        }
        self.pending += 1;
    }

    /// Collects gradients of the bound parameter leaves of `graph`.
    pub fn accumulate_from_graph(&mut self, graph: &Graph<T>, bound: &[Var]) {
        let grads: Vec<&[T]> = bound
            .iter()
            .map(|&v| graph.grad(v).map(|t| t.data()).unwrap_or(&[]))
            .collect();
        self.accumulate(grads);
    }

    /// `g = acc / k + wd * w; v = m * v + g; w -= lr * v`, where `k` is the
    /// number of accumulated passes; then clears the accumulators.
    pub fn step(&mut self, model: &mut Model<T>, cfg: &TrainConfig) {
        let k = T::from_f64(self.pending.max(1) as f64);
        let (lr, m, wd) = (T::from_f64(self.lr), T::from_f64(cfg.momentum), T::from_f64(cfg.weight_decay));
        for ((param, vel), acc) in model.params_mut().iter_mut().zip(&mut self.velocity).zip(&mut self.accum) {
            for ((w, v), a) in param.tensor.data_mut().iter_mut().zip(vel.iter_mut()).zip(acc.iter_mut()) {
                let g = *a / k + wd * *w;
                *v = m * *v + g;
                *w -= lr * *v;
                *a = T::ZERO;
            }
        }
        self.pending = 0;
        self.iteration += 1;
    }

    /// Records the loss of the step just taken and applies the plateau
    /// rule. Returns whether the learning rate decayed.
    pub fn record_loss(&mut self, loss: f64, cfg: &TrainConfig) -> bool {
        self.losses.push(loss);
        self.lr_schedule(cfg)
    }

    /// Decays the learning rate by `lr_decay_factor` when the mean loss of
    /// the last `plateau_window` steps improved by less than 1% on the
    /// window before it. Fires at most once per window.
    pub fn lr_schedule(&mut self, cfg: &TrainConfig) -> bool {
        let w = cfg.plateau_window;
        let n = self.losses.len();
        if w == 0 || n < 2 * w {
            return false;
        }
        if let Some(last) = self.last_decay {
            if (n as u64) < last + w as u64 {
                return false;
            }
        }
        let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
        let recent = mean(&self.losses[n - w..]);
        let previous = mean(&self.losses[n - 2 * w..n - w]);
        if previous - recent < 0.01 * previous.abs() {
            self.lr *= cfg.lr_decay_factor;
            self.last_decay = Some(n as u64);
            true
        } else {
            false
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogEntry {
    pub iteration: u64,
    pub lr: f64,
    pub loss: f64,
}

/// Runs one forward/backward pass and returns the loss value.
pub fn forward_backward<T: Real>(
    model: &Model<T>,
    image: &Tensor<T>,
    target: &Tensor<T>,
    cfg: &TrainConfig,
    sgd: &mut Sgd<T>,
) -> Result<f64> {
    let mut g = Graph::new();
    let bound = model.bind(&mut g, true);
    let x = g.constant(image.clone());
    let preds = model.forward(&mut g, &bound, x, cfg.forward_options())?;
    let loss = total_loss(&mut g, &preds, target, cfg.balanced_loss)?;
    g.backward(loss.total)?;
    sgd.accumulate_from_graph(&g, &bound);
    Ok(g.value(loss.total).data()[0].to_f64())
}

/// Trains for `cfg.max_iterations` optimizer steps. Sample order is a fresh
/// seeded shuffle per epoch. `checkpoint` is called every
/// `cfg.checkpoint_every` steps with the step number.
pub fn train<T: Real>(
    model: &mut Model<T>,
    samples: &[Sample<T>],
    cfg: &TrainConfig,
    mut checkpoint: impl FnMut(u64, &Model<T>),
) -> Result<Vec<LogEntry>> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;
    let mut next = |rng: &mut ChaCha8Rng| {
        if cursor == order.len() {
            order = (0..samples.len()).collect();
            order.shuffle(rng);
            cursor = 0;
        }
        cursor += 1;
        order[cursor - 1]
    };

    let targets: Vec<Tensor<T>> = samples.iter().map(Sample::target).collect();
    let mut sgd = Sgd::new(model, cfg);
    let mut log = Vec::with_capacity(cfg.max_iterations as usize);
    for it in 1..=cfg.max_iterations {
        let mut step_loss = 0.0;
        for _ in 0..cfg.iter_size {
            let picks: Vec<usize> = (0..cfg.batch_size).map(|_| next(&mut rng)).collect();
            let loss = if let [single] = picks[..] {
                forward_backward(model, &samples[single].image, &targets[single], cfg, &mut sgd)?
            } else {
                let images: Vec<&Tensor<T>> = picks.iter().map(|&i| &samples[i].image).collect();
                let masks: Vec<&Tensor<T>> = picks.iter().map(|&i| &targets[i]).collect();
                let image = Tensor::concat_batch(&images)?;
                let target = Tensor::concat_batch(&masks)?;
                forward_backward(model, &image, &target, cfg, &mut sgd)?
            };
            if !loss.is_finite() {
                return Err(non_finite(it, model));
            }
            step_loss += loss;
        }
        step_loss /= cfg.iter_size as f64;
        let lr = sgd.lr();
        sgd.step(model, cfg);
        if model.params().iter().any(|p| !p.tensor.all_finite()) {
            return Err(non_finite(it, model));
        }
        log.push(LogEntry {
            iteration: it,
            lr,
            loss: step_loss,
        });
        sgd.record_loss(step_loss, cfg);
        if cfg.checkpoint_every > 0 && it % cfg.checkpoint_every == 0 {
            checkpoint(it, model);
        }
    }
    Ok(log)
}

fn non_finite<T: Real>(iteration: u64, model: &Model<T>) -> Error {
    let param_norms: Vec<(String, f64)> = model.params().iter().map(|p| (p.name.clone(), p.tensor.l2_norm())).collect();
    Error::NonFiniteLoss {
        iteration,
        param_norms,
    }
}

/// Loss log as CSV with header `iteration,lr,loss`.
pub fn loss_log_csv(log: &[LogEntry]) -> String {
    let mut out = String::from("iteration,lr,loss\n");
    for e in log {
        out.push_str(&format!("{},{:e},{:.17e}\n", e.iteration, e.lr, e.loss));
    }
    out
}
