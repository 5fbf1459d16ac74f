//! The saliency network: a five-stage backbone, a global saliency branch on
//! top of the last pooling layer, and five side-output residual units that
//! refine the global prediction back to full resolution.
//!
//! Each residual unit receives the 2x-upsampled prediction of the unit
//! below it, `up`, reduces its backbone tap to a narrow feature `T`, and
//! (with attention enabled) weights it by `A = 1 - sigmoid(up)` so that
//! regions the deeper prediction already marks salient are erased. A short
//! stack of 3x3 convolutions turns the attentive feature into a one-channel
//! residual `R`, and the unit outputs `up + R`. There is no fusion layer:
//! the shallowest side output is the final prediction.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::real::Real;
use crate::tensor::{Shape, Tensor};

/// Number of backbone stages, and of side outputs.
pub const STAGES: usize = 5;
/// Total stride of the global branch input (after the fifth pooling).
pub const GLOBAL_STRIDE: usize = 32;

const VGG16_CHANNELS: [usize; 5] = [64, 128, 256, 512, 512];
const VGG16_CONVS: [usize; 5] = [2, 2, 3, 3, 3];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Backbone {
    Vgg16,
    Toy,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub backbone: Backbone,
    pub stage_channels: [usize; 5],
    pub convs_per_stage: [usize; 5],
    /// Number of stacked 3x3 convolutions in each residual unit (`D`).
    pub residual_depth: usize,
    pub attention_enabled: bool,
    pub global_channels: usize,
    pub side_channels: usize,
}

impl NetworkSpec {
    pub fn vgg16() -> Self {
        NetworkSpec {
            backbone: Backbone::Vgg16,
            stage_channels: VGG16_CHANNELS,
            convs_per_stage: VGG16_CONVS,
            residual_depth: 2,
            attention_enabled: true,
            global_channels: 256,
            side_channels: 64,
        }
    }

    /// Small from-scratch backbone for CPU training. Kept under one
    /// megabyte of `f32` parameters.
    pub fn toy() -> Self {
        NetworkSpec {
            backbone: Backbone::Toy,
            stage_channels: [16, 32, 64, 64, 64],
            convs_per_stage: [1; 5],
            residual_depth: 2,
            attention_enabled: true,
            global_channels: 16,
            side_channels: 32,
        }
    }

    pub fn for_backbone(backbone: Backbone) -> Self {
        match backbone {
            Backbone::Vgg16 => NetworkSpec::vgg16(),
            Backbone::Toy => NetworkSpec::toy(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.residual_depth == 0 {
            return Err(Error::InvalidSpec("residual_depth must be at least 1".into()));
        }
        if self.stage_channels.contains(&0) || self.convs_per_stage.contains(&0) {
            return Err(Error::InvalidSpec("every stage needs at least one conv and one channel".into()));
        }
        if self.global_channels == 0 || self.side_channels == 0 {
            return Err(Error::InvalidSpec("global_channels and side_channels must be positive".into()));
        }
        if self.backbone == Backbone::Vgg16
            && (self.stage_channels != VGG16_CHANNELS || self.convs_per_stage != VGG16_CONVS)
        {
            return Err(Error::InvalidSpec(
                "vgg16 backbone has stage channels (64, 128, 256, 512, 512) and (2, 2, 3, 3, 3) convs".into(),
            ));
        }
        Ok(())
    }

    /// Every parameter the spec implies, in storage order.
    pub fn layer_plan(&self) -> Vec<LayerPlan> {
        let mut plan = Vec::new();
        let mut c_in = 3;
        for (s, (&c, &convs)) in self.stage_channels.iter().zip(&self.convs_per_stage).enumerate() {
            for k in 0..convs {
                plan.push(LayerPlan::new(format!("stage{}.conv{}", s + 1, k + 1), c_in, c, 3, Init::He));
                c_in = c;
            }
        }
        let g = self.global_channels;
        plan.push(LayerPlan::new("global.reduce".into(), c_in, g, 1, Init::He));
        for k in 0..3 {
            plan.push(LayerPlan::new(format!("global.conv{}", k + 1), g, g, 5, Init::He));
        }
        plan.push(LayerPlan::new("global.score".into(), g, 1, 1, Init::Zero));
        let m = self.side_channels;
        for (s, &c) in self.stage_channels.iter().enumerate() {
            plan.push(LayerPlan::new(format!("side{}.reduce", s + 1), c, m, 1, Init::He));
            for k in 0..self.residual_depth {
                plan.push(LayerPlan::new(format!("side{}.conv{}", s + 1, k + 1), m, m, 3, Init::He));
            }
            plan.push(LayerPlan::new(format!("side{}.score", s + 1), m, 1, 3, Init::Zero));
        }
        plan
    }

    pub fn param_count(&self) -> usize {
        self.layer_plan().iter().map(LayerPlan::param_count).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Init {
    /// Uniform in `+-sqrt(6 / fan_in)`, zero bias.
    He,
    Zero,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerPlan {
    pub name: String,
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub init: Init,
}

impl LayerPlan {
    fn new(name: String, c_in: usize, c_out: usize, kernel: usize, init: Init) -> Self {
        LayerPlan {
            name,
            c_in,
            c_out,
            kernel,
            init,
        }
    }

    pub fn weight_shape(&self) -> Shape {
        Shape::new(self.c_out, self.c_in, self.kernel, self.kernel)
    }

    pub fn bias_shape(&self) -> Shape {
        Shape::new(self.c_out, 1, 1, 1)
    }

    pub fn param_count(&self) -> usize {
        self.kernel * self.kernel * self.c_in * self.c_out + self.c_out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    /// `[K, C, kh, kw]` convolution kernel.
    Weight,
    /// `K` values, stored as `[K, 1, 1, 1]`.
    Bias,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub kind: ParamKind,
    pub tensor: Tensor<T>,
}

#[derive(Debug, Clone, Copy)]
struct Conv {
    weight: usize,
    bias: usize,
}

#[derive(Debug, Clone)]
struct Side {
    reduce: Conv,
    convs: Vec<Conv>,
    score: Conv,
}

#[derive(Debug, Clone)]
struct Layout {
    stages: Vec<Vec<Conv>>,
    global_reduce: Conv,
    global_convs: Vec<Conv>,
    global_score: Conv,
    sides: Vec<Side>,
}

impl Layout {
    fn for_spec(spec: &NetworkSpec) -> Self {
        // Parameters come in (weight, bias) pairs in layer_plan order.
        let mut next = 0;
        let mut conv = || {
            let c = Conv {
                weight: next,
                bias: next + 1,
            };
            next += 2;
            c
        };
        let stages = spec.convs_per_stage.iter().map(|&n| (0..n).map(|_| conv()).collect()).collect();
        let global_reduce = conv();
        let global_convs = (0..3).map(|_| conv()).collect();
        let global_score = conv();
        let sides = (0..STAGES)
            .map(|_| Side {
                reduce: conv(),
                convs: (0..spec.residual_depth).map(|_| conv()).collect(),
                score: conv(),
            })
            .collect();
        Layout {
            stages,
            global_reduce,
            global_convs,
            global_score,
            sides,
        }
    }
}

/// Network weights together with the spec that shapes them.
#[derive(Debug, Clone)]
pub struct Model<T> {
    spec: NetworkSpec,
    params: Vec<Param<T>>,
    layout: Layout,
}

impl<T: Real> PartialEq for Model<T> {
    fn eq(&self, other: &Self) -> bool {
        self.spec == other.spec && self.params == other.params
    }
}

/// Options that change the computation graph but not the weights.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ForwardOptions {
    /// Stop gradients from flowing through the attention maps into the
    /// deeper prediction.
    pub detach_attention: bool,
}

/// Graph handles for one forward pass. All maps have one channel and are
/// logits except `attention`.
#[derive(Debug, Clone)]
pub struct SidePredictions {
    /// Stride-32 prediction of the global branch.
    pub global: Var,
    /// `sides[i]` is side output `i + 1`, at stride `2^i`.
    pub sides: [Var; STAGES],
    /// Reverse-attention map of each side output, when attention is enabled.
    pub attention: Option<[Var; STAGES]>,
    /// The 2x-upsampled deeper prediction each residual unit started from.
    pub upsampled: [Var; STAGES],
}

/// Plain tensors of one inference pass.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction<T> {
    pub global: Tensor<T>,
    pub sides: Vec<Tensor<T>>,
    pub attention: Option<Vec<Tensor<T>>>,
}

impl<T: Real> Prediction<T> {
    /// `sigmoid(S_1)`, the final saliency map.
    pub fn saliency(&self) -> Tensor<T> {
        self.sides[0].map(crate::ops::sigmoid)
    }

    /// `sigmoid(S_1) .. sigmoid(S_5)` followed by `sigmoid(S_global)`, each
    /// bilinearly upsampled to the input resolution.
    pub fn side_maps(&self) -> Vec<Tensor<T>> {
        self.sides
            .iter()
            .chain(core::iter::once(&self.global))
            .enumerate()
            .map(|(i, s)| {
                let up = if i == 0 { s.clone() } else { crate::ops::upsample_forward(s, 1 << i) };
                up.map(crate::ops::sigmoid)
            })
            .collect()
    }
}

impl<T: Real> Model<T> {
    /// Builds a model with deterministic initialization: He-uniform kernels
    /// and zero biases, except the global score layer and every side score
    /// layer, which start at zero so the untrained network sits at the
    /// zero-residual identity.
    pub fn new(spec: NetworkSpec, seed: u64) -> Result<Self> {
        Self::init(spec, seed, false)
    }

    /// Like [`Model::new`] but the score layers and all biases are random
    /// too. Useful where a non-trivial untrained network is needed; nonzero
    /// biases also keep dead receptive fields off the relu kink.
    pub fn randomized(spec: NetworkSpec, seed: u64) -> Result<Self> {
        Self::init(spec, seed, true)
    }

    fn init(spec: NetworkSpec, seed: u64, randomize: bool) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::new();
        for layer in spec.layer_plan() {
            let ws = layer.weight_shape();
            let weight = if layer.init == Init::He || randomize {
                let fan_in = (layer.c_in * layer.kernel * layer.kernel) as f64;
                let bound = libm::sqrt(6.0 / fan_in);
                let data = (0..ws.len()).map(|_| T::from_f64(rng.random_range(-bound..bound))).collect();
                Tensor::new(ws, data)?
            } else {
                Tensor::zeros(ws)
            };
            params.push(Param {
                name: format!("{}.weight", layer.name),
                kind: ParamKind::Weight,
                tensor: weight,
            });
            params.push(Param {
                name: format!("{}.bias", layer.name),
                kind: ParamKind::Bias,
                tensor: if randomize {
                    let bs = layer.bias_shape();
                    Tensor::new(bs, (0..bs.len()).map(|_| T::from_f64(rng.random_range(-0.1..0.1))).collect())?
                } else {
                    Tensor::zeros(layer.bias_shape())
                },
            });
        }
        let layout = Layout::for_spec(&spec);
        Ok(Model { spec, params, layout })
    }

    /// Reassembles a model from named tensors, which must match the spec's
    /// layout exactly (names, order and shapes).
    pub fn from_params(spec: NetworkSpec, named: Vec<(String, Tensor<T>)>) -> Result<Self> {
        spec.validate()?;
        let plan = spec.layer_plan();
        if named.len() != plan.len() * 2 {
            return Err(Error::Parameter(format!(
                "expected {} tensors, found {}",
                plan.len() * 2,
                named.len()
            )));
        }
        let mut params = Vec::with_capacity(named.len());
        for (i, (name, tensor)) in named.into_iter().enumerate() {
            let layer = &plan[i / 2];
            let (kind, suffix, shape) = if i % 2 == 0 {
                (ParamKind::Weight, "weight", layer.weight_shape())
            } else {
                (ParamKind::Bias, "bias", layer.bias_shape())
            };
            let expected = format!("{}.{}", layer.name, suffix);
            if name != expected {
                return Err(Error::Parameter(format!("tensor {i} is named {name:?}, expected {expected:?}")));
            }
            if tensor.shape() != shape {
                return Err(Error::Parameter(format!("{name} has shape {}, expected {shape}", tensor.shape())));
            }
            params.push(Param { name, kind, tensor });
        }
        let layout = Layout::for_spec(&spec);
        Ok(Model { spec, params, layout })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn params(&self) -> &[Param<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param<T>] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Param<T>> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Param<T>> {
        self.params.iter_mut().find(|p| p.name == name)
    }

    /// Number of scalar parameters in the store.
    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.tensor.len()).sum()
    }

    /// Zeroes the weight and bias of every side score layer and, with
    /// `include_global`, of the global score layer.
    pub fn zero_score_layers(&mut self, include_global: bool) {
        let sides: Vec<usize> = self.layout.sides.iter().flat_map(|s| [s.score.weight, s.score.bias]).collect();
        let global = [self.layout.global_score.weight, self.layout.global_score.bias];
        for &i in sides.iter().chain(if include_global { &global[..] } else { &[] }) {
            self.params[i].tensor.data_mut().fill(T::ZERO);
        }
    }

    pub fn with_attention(mut self, enabled: bool) -> Self {
        self.spec.attention_enabled = enabled;
        self
    }

    pub fn cast<U: Real>(&self) -> Model<U> {
        Model {
            spec: self.spec.clone(),
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    kind: p.kind,
                    tensor: p.tensor.cast(),
                })
                .collect(),
            layout: self.layout.clone(),
        }
    }

    /// Places every parameter on `graph` as a leaf, in storage order.
    pub fn bind(&self, graph: &mut Graph<T>, requires_grad: bool) -> Vec<Var> {
        self.params.iter().map(|p| graph.leaf(p.tensor.clone(), requires_grad)).collect()
    }

    fn conv(&self, g: &mut Graph<T>, bound: &[Var], conv: Conv, x: Var) -> Result<Var> {
        g.conv2d(x, bound[conv.weight], bound[conv.bias])
    }

    /// Full forward pass. `image` is `[N, 3, H, W]` with `H` and `W`
    /// multiples of 32; `bound` comes from [`Model::bind`] on the same graph.
    pub fn forward(&self, g: &mut Graph<T>, bound: &[Var], image: Var, opts: ForwardOptions) -> Result<SidePredictions> {
        let s = g.shape(image);
        if s.c != 3 {
            return Err(Error::ShapeMismatch {
                op: "forward",
                left: s,
                right: Shape::new(s.n, 3, s.h, s.w),
            });
        }
        if !s.h.is_multiple_of(GLOBAL_STRIDE) || !s.w.is_multiple_of(GLOBAL_STRIDE) || s.h == 0 || s.w == 0 {
            return Err(Error::NotDivisible {
                height: s.h,
                width: s.w,
            });
        }

        let mut x = image;
        let mut taps = Vec::with_capacity(STAGES);
        for (i, stage) in self.layout.stages.iter().enumerate() {
            if i > 0 {
                x = g.maxpool2(x)?;
            }
            for &conv in stage {
                let y = self.conv(g, bound, conv, x)?;
                x = g.relu(y);
            }
            taps.push(x);
        }

        let pooled = g.maxpool2(x)?;
        let mut y = self.conv(g, bound, self.layout.global_reduce, pooled)?;
        for &conv in &self.layout.global_convs {
            let z = self.conv(g, bound, conv, y)?;
            y = g.relu(z);
        }
        let global = self.conv(g, bound, self.layout.global_score, y)?;

        let mut sides = [global; STAGES];
        let mut upsampled = [global; STAGES];
        let mut attention = [global; STAGES];
        let mut deeper = global;
        for i in (0..STAGES).rev() {
            let up = g.upsample(deeper, 2)?;
            let out = self.residual_unit(g, bound, i, taps[i], up, opts)?;
            sides[i] = out.prediction;
            upsampled[i] = up;
            if let Some(a) = out.attention {
                attention[i] = a;
            }
            deeper = out.prediction;
        }
        Ok(SidePredictions {
            global,
            sides,
            attention: self.spec.attention_enabled.then_some(attention),
            upsampled,
        })
    }

    /// Residual unit of side output `side + 1`: returns `up + R` where `R`
    /// is learned from the (optionally reverse-attended) backbone tap.
    pub fn residual_unit(
        &self,
        g: &mut Graph<T>,
        bound: &[Var],
        side: usize,
        tap: Var,
        up: Var,
        opts: ForwardOptions,
    ) -> Result<ResidualOutput> {
        let (ts, us) = (g.shape(tap), g.shape(up));
        if (ts.n, ts.h, ts.w) != (us.n, us.h, us.w) || us.c != 1 {
            return Err(Error::ShapeMismatch {
                op: "residual_unit",
                left: ts,
                right: us,
            });
        }
        let layout = &self.layout.sides[side];
        let reduced = self.conv(g, bound, layout.reduce, tap)?;
        let (mut feature, attention) = if self.spec.attention_enabled {
            let source = if opts.detach_attention { g.detach(up) } else { up };
            let a = reverse_attention(g, source);
            (g.mul(reduced, a)?, Some(a))
        } else {
            (reduced, None)
        };
        for &conv in &layout.convs {
            let z = self.conv(g, bound, conv, feature)?;
            feature = g.relu(z);
        }
        let residual = self.conv(g, bound, layout.score, feature)?;
        let prediction = g.add(up, residual)?;
        Ok(ResidualOutput {
            prediction,
            residual,
            attention,
        })
    }

    /// Inference without gradient tracking.
    pub fn predict(&self, image: &Tensor<T>) -> Result<Prediction<T>> {
        let mut g = Graph::new();
        let bound = self.bind(&mut g, false);
        let x = g.constant(image.clone());
        let p = self.forward(&mut g, &bound, x, ForwardOptions::default())?;
        Ok(Prediction {
            global: g.value(p.global).clone(),
            sides: p.sides.iter().map(|&v| g.value(v).clone()).collect(),
            attention: p.attention.map(|a| a.iter().map(|&v| g.value(v).clone()).collect()),
        })
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ResidualOutput {
    pub prediction: Var,
    pub residual: Var,
    pub attention: Option<Var>,
}

/// `A = 1 - sigmoid(up)`: near zero where the deeper prediction is
/// confidently salient, near one where it is confidently background.
pub fn reverse_attention<T: Real>(g: &mut Graph<T>, up: Var) -> Var {
    let p = g.sigmoid(up);
    g.reverse(p)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn image(h: usize, w: usize, seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = Shape::new(1, 3, h, w);
        Tensor::new(s, (0..s.len()).map(|_| rng.random_range(-0.5..0.5)).collect()).unwrap()
    }

    #[test]
    fn single_conv_param_count() {
        let l = LayerPlan::new("x".into(), 64, 64, 3, Init::He);
        assert_eq!(l.param_count(), 36_928);
    }

    #[test]
    fn toy_shapes_follow_strides() {
        let model = Model::<f64>::new(NetworkSpec::toy(), 1).unwrap();
        let p = model.predict(&image(64, 64, 2)).unwrap();
        assert_eq!(p.global.shape(), Shape::new(1, 1, 2, 2));
        for (i, s) in p.sides.iter().enumerate() {
            assert_eq!(s.shape(), Shape::new(1, 1, 64 >> i, 64 >> i));
        }
        assert_eq!(p.attention.as_ref().unwrap().len(), 5);
    }

    #[test]
    fn same_seed_same_weights() {
        let a = Model::<f64>::new(NetworkSpec::toy(), 9).unwrap();
        let b = Model::<f64>::new(NetworkSpec::toy(), 9).unwrap();
        let c = Model::<f64>::new(NetworkSpec::toy(), 10).unwrap();
        assert!(a == b);
        assert!(a != c);
    }

    #[test]
    fn fresh_model_predicts_one_half() {
        let model = Model::<f64>::new(NetworkSpec::toy(), 3).unwrap();
        let p = model.predict(&image(32, 64, 4)).unwrap();
        assert!(p.saliency().data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn rejects_bad_inputs() {
        let model = Model::<f64>::new(NetworkSpec::toy(), 3).unwrap();
        let err = model.predict(&image(48, 64, 4)).unwrap_err();
        assert_eq!(err, Error::NotDivisible { height: 48, width: 64 });
        assert!(err.to_string().contains("pad by 16 rows"));
        let gray = Tensor::zeros(Shape::new(1, 1, 32, 32));
        assert!(model.predict(&gray).is_err());
    }

    #[test]
    fn spec_validation() {
        let mut spec = NetworkSpec::toy();
        spec.residual_depth = 0;
        assert!(spec.validate().is_err());
        let mut vgg = NetworkSpec::vgg16();
        vgg.stage_channels[0] = 32;
        assert!(vgg.validate().is_err());
        assert!(NetworkSpec::vgg16().validate().is_ok());
    }

    #[test]
    fn reverse_attention_values() {
        let mut g = Graph::<f64>::new();
        let s = g.constant(Tensor::from_f64(Shape::new(1, 1, 1, 3), &[0.0, 100.0, -(3f64.ln())]).unwrap());
        let a = reverse_attention(&mut g, s);
        let v = g.value(a).data();
        assert_eq!(v[0], 0.5);
        assert!(v[1] < 1e-6);
        assert!((v[2] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn from_params_checks_layout() {
        let model = Model::<f64>::new(NetworkSpec::toy(), 1).unwrap();
        let named: Vec<_> = model.params().iter().map(|p| (p.name.clone(), p.tensor.clone())).collect();
        let rebuilt = Model::from_params(NetworkSpec::toy(), named.clone()).unwrap();
        assert!(rebuilt == model);

        let mut renamed = named.clone();
        renamed[3].0 = "bogus".into();
        assert!(Model::from_params(NetworkSpec::toy(), renamed).is_err());
        let mut reshaped = named;
        reshaped[0].1 = Tensor::zeros(Shape::new(1, 1, 1, 1));
        assert!(Model::from_params(NetworkSpec::toy(), reshaped).is_err());
    }
}
