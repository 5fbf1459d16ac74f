//! Tape-based reverse-mode differentiation over [`Tensor`]s.
//!
//! A [`Graph`] records every operation as a node in creation order, which is
//! already a topological order. [`Graph::backward`] walks the nodes in
//! reverse once, so each node is visited exactly once, and adds the result
//! into the gradient buffers of the leaves that were created with
//! `requires_grad`. Calling it again without [`Graph::zero_grad`]
//! accumulates.
//!
//! ```
//! use ras_core::{Graph, Shape, Tensor};
//!
//! let mut g = Graph::<f64>::new();
//! let x = g.leaf(Tensor::full(Shape::new(1, 1, 2, 2), 0.0), true);
//! let y = g.sigmoid(x);
//! let loss = g.sum(y);
//! g.backward(loss).unwrap();
//! assert!(g.grad(x).unwrap().data().iter().all(|&d| d == 0.25));
//! ```

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::ops;
use crate::real::Real;
use crate::tensor::{Shape, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Conv2d { input: Var, weight: Var, bias: Var },
    MaxPool2 { input: Var, argmax: Vec<u32> },
    Relu(Var),
    Sigmoid(Var),
    Add(Var, Var),
    Mul(Var, Var),
    /// `b` has one channel and is repeated across the channels of `a`.
    MulBroadcast(Var, Var),
    Reverse(Var),
    Upsample { input: Var, factor: usize },
    Bce { logits: Var, target: Vec<T>, weights: Vec<(T, T)> },
    Sum(Var),
    Scale(Var, T),
    WeightedSum(Var, Vec<T>),
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    requires_grad: bool,
    op: Op<T>,
    grad: Option<Tensor<T>>,
}

#[derive(Debug, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Which piece of every piecewise-linear op was taken: the active mask of
    /// each relu and the winner of each pooling window. Two evaluations with
    /// equal patterns lie on the same smooth piece of the function.
    pub fn branch_pattern(&self) -> Vec<u32> {
        let mut pattern = Vec::new();
        for node in &self.nodes {
            match &node.op {
                Op::Relu(x) => pattern.extend(self.value(*x).data().iter().map(|&v| u32::from(v > T::ZERO))),
                Op::MaxPool2 { argmax, .. } => pattern.extend_from_slice(argmax),
                _ => {}
            }
        }
        pattern
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Tensor<T>> {
        self.nodes[v.0].grad.take()
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    /// New leaf holding the value of `v`, cut off from its history.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Stride-1 convolution with zero "same" padding. `weight` is
    /// `[K, C, kh, kw]` with odd `kh`, `kw`; `bias` holds `K` values.
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let s = self.shape(input);
        let ws = self.shape(weight);
        if ws.c != s.c {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                left: s,
                right: ws,
            });
        }
        if ws.h.is_multiple_of(2) || ws.w.is_multiple_of(2) {
            return Err(Error::EvenKernel { kh: ws.h, kw: ws.w });
        }
        let bs = self.shape(bias);
        if bs.len() != ws.n {
            return Err(Error::ShapeMismatch {
                op: "conv2d bias",
                left: ws,
                right: bs,
            });
        }
        let out = ops::conv2d_forward(self.value(input), self.value(weight), self.value(bias).data());
        let rg = self.any_grad(&[input, weight, bias]);
        Ok(self.push(out, Op::Conv2d { input, weight, bias }, rg))
    }

    pub fn maxpool2(&mut self, input: Var) -> Result<Var> {
        let s = self.shape(input);
        if !s.h.is_multiple_of(2) || !s.w.is_multiple_of(2) {
            return Err(Error::OddSpatial { op: "maxpool2", shape: s });
        }
        let (out, argmax) = ops::maxpool2_forward(self.value(input));
        let rg = self.any_grad(&[input]);
        Ok(self.push(out, Op::MaxPool2 { input, argmax }, rg))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| if v > T::ZERO { v } else { T::ZERO });
        let rg = self.any_grad(&[x]);
        self.push(out, Op::Relu(x), rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(ops::sigmoid);
        let rg = self.any_grad(&[x]);
        self.push(out, Op::Sigmoid(x), rg)
    }

    /// `1 - x`, elementwise.
    pub fn reverse(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| T::ONE - v);
        let rg = self.any_grad(&[x]);
        self.push(out, Op::Reverse(x), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::ShapeMismatch {
                op: "add",
                left: sa,
                right: sb,
            });
        }
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| x + y).collect();
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::new(sa, data)?, Op::Add(a, b), rg))
    }

    /// Elementwise product. `b` may have a single channel, in which case it
    /// is broadcast over the channels of `a`.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa == sb {
            let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| x * y).collect();
            let rg = self.any_grad(&[a, b]);
            return Ok(self.push(Tensor::new(sa, data)?, Op::Mul(a, b), rg));
        }
        if sb.c != 1 || (sa.n, sa.h, sa.w) != (sb.n, sb.h, sb.w) {
            return Err(Error::ShapeMismatch {
                op: "mul",
                left: sa,
                right: sb,
            });
        }
        let plane = sa.plane();
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let mut data = Vec::with_capacity(sa.len());
        for n in 0..sa.n {
            let mask = &bv[n * plane..(n + 1) * plane];
            for c in 0..sa.c {
                let start = (n * sa.c + c) * plane;
                data.extend(av[start..start + plane].iter().zip(mask).map(|(&x, &m)| x * m));
            }
        }
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::new(sa, data)?, Op::MulBroadcast(a, b), rg))
    }

    /// Half-pixel-aligned bilinear upsampling by 2, 4, 8, 16 or 32.
    pub fn upsample(&mut self, x: Var, factor: usize) -> Result<Var> {
        if !ops::UPSAMPLE_FACTORS.contains(&factor) {
            return Err(Error::InvalidUpsampleFactor(factor));
        }
        let out = ops::upsample_forward(self.value(x), factor);
        let rg = self.any_grad(&[x]);
        Ok(self.push(out, Op::Upsample { input: x, factor }, rg))
    }

    /// Summed binary cross-entropy of `sigmoid(logits)` against a `{0, 1}`
    /// target of the same shape.
    ///
    /// With `balanced`, each image weights its positive pixels by the
    /// fraction of negatives and its negative pixels by the fraction of
    /// positives.
    pub fn bce_with_logits(&mut self, logits: Var, target: &Tensor<T>, balanced: bool) -> Result<Var> {
        let s = self.shape(logits);
        if target.shape() != s || s.c != 1 {
            return Err(Error::ShapeMismatch {
                op: "bce_with_logits",
                left: s,
                right: target.shape(),
            });
        }
        if let Some(index) = target.data().iter().position(|&t| t != T::ZERO && t != T::ONE) {
            return Err(Error::NonBinaryTarget { index });
        }
        let plane = s.plane();
        let weights: Vec<(T, T)> = target
            .data()
            .chunks_exact(plane)
            .map(|img| {
                if !balanced {
                    return (T::ONE, T::ONE);
                }
                let pos = img.iter().filter(|&&t| t == T::ONE).count();
                let total = T::from_f64(plane as f64);
                let neg_frac = T::from_f64((plane - pos) as f64) / total;
                let pos_frac = T::from_f64(pos as f64) / total;
                (neg_frac, pos_frac)
            })
            .collect();
        let x = self.value(logits).data();
        let mut loss = T::ZERO;
        for (n, &(wp, wn)) in weights.iter().enumerate() {
            for i in n * plane..(n + 1) * plane {
                loss += if target.data()[i] == T::ONE {
                    wp * ops::softplus(-x[i])
                } else {
                    wn * ops::softplus(x[i])
                };
            }
        }
        let rg = self.any_grad(&[logits]);
        let op = Op::Bce {
            logits,
            target: target.data().to_vec(),
            weights,
        };
        Ok(self.push(Tensor::scalar(loss), op, rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.value(x).sum();
        let rg = self.any_grad(&[x]);
        self.push(Tensor::scalar(total), Op::Sum(x), rg)
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Var {
        let out = self.value(x).map(|v| v * factor);
        let rg = self.any_grad(&[x]);
        self.push(out, Op::Scale(x, factor), rg)
    }

    /// `sum(x * weights)` for a constant weight tensor of the same shape.
    pub fn weighted_sum(&mut self, x: Var, weights: &Tensor<T>) -> Result<Var> {
        let s = self.shape(x);
        if weights.shape() != s {
            return Err(Error::ShapeMismatch {
                op: "weighted_sum",
                left: s,
                right: weights.shape(),
            });
        }
        let total = self.value(x).data().iter().zip(weights.data()).map(|(&a, &b)| a * b).sum();
        let rg = self.any_grad(&[x]);
        Ok(self.push(Tensor::scalar(total), Op::WeightedSum(x, weights.data().to_vec()), rg))
    }

    /// Back-propagates from a single-element `root`, adding `d root / d leaf`
    /// into every `requires_grad` leaf the root depends on. Leaves that do
    /// not influence the root receive a zero gradient.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        let rs = self.shape(root);
        if rs.len() != 1 {
            return Err(Error::NotScalar(rs));
        }
        let mut grads: Vec<Option<Vec<T>>> = Vec::new();
        grads.resize_with(root.0 + 1, || None);
        grads[root.0] = Some(vec![T::ONE]);

        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else {
                if matches!(node.op, Op::Leaf) {
                    self.accumulate_leaf(i, None);
                }
                continue;
            };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => {
                    self.accumulate_leaf(i, Some(g));
                }
                Op::Conv2d { input, weight, bias } => {
                    let need = [self.requires_grad(*input), self.requires_grad(*weight), self.requires_grad(*bias)];
                    let cg = ops::conv2d_backward(self.value(*input), self.value(*weight), &g, need);
                    self.send(&mut grads, *input, cg.input);
                    self.send(&mut grads, *weight, cg.weight);
                    self.send(&mut grads, *bias, cg.bias);
                }
                Op::MaxPool2 { input, argmax } => {
                    let mut dx = vec![T::ZERO; self.shape(*input).len()];
                    for (&src, &gv) in argmax.iter().zip(&g) {
                        dx[src as usize] += gv;
                    }
                    self.send(&mut grads, *input, Some(dx));
                }
                Op::Relu(x) => {
                    let dx = self.value(*x).data().iter().zip(&g).map(|(&v, &gv)| if v > T::ZERO { gv } else { T::ZERO }).collect();
                    self.send(&mut grads, *x, Some(dx));
                }
                Op::Sigmoid(x) => {
                    let dx = node.value.data().iter().zip(&g).map(|(&s, &gv)| gv * s * (T::ONE - s)).collect();
                    self.send(&mut grads, *x, Some(dx));
                }
                Op::Reverse(x) => {
                    let dx = g.iter().map(|&gv| -gv).collect();
                    self.send(&mut grads, *x, Some(dx));
                }
                Op::Add(a, b) => {
                    let (a, b) = (*a, *b);
                    if self.requires_grad(b) {
                        self.send(&mut grads, b, Some(g.clone()));
                    }
                    self.send(&mut grads, a, Some(g));
                }
                Op::Mul(a, b) => {
                    let (a, b) = (*a, *b);
                    let da = self.requires_grad(a).then(|| mul_slices(&g, self.value(b).data()));
                    let db = self.requires_grad(b).then(|| mul_slices(&g, self.value(a).data()));
                    self.send(&mut grads, a, da);
                    self.send(&mut grads, b, db);
                }
                Op::MulBroadcast(a, b) => {
                    let (a, b) = (*a, *b);
                    let sa = self.shape(a);
                    let plane = sa.plane();
                    let (av, bv) = (self.value(a).data(), self.value(b).data());
                    let da = self.requires_grad(a).then(|| {
                        let mut da = Vec::with_capacity(sa.len());
                        for (idx, chunk) in g.chunks_exact(plane).enumerate() {
                            let n = idx / sa.c;
                            let mask = &bv[n * plane..(n + 1) * plane];
                            da.extend(chunk.iter().zip(mask).map(|(&gv, &m)| gv * m));
                        }
                        da
                    });
                    let db = self.requires_grad(b).then(|| {
                        let mut db = vec![T::ZERO; sa.n * plane];
                        for (idx, chunk) in g.chunks_exact(plane).enumerate() {
                            let n = idx / sa.c;
                            let src = &av[idx * plane..(idx + 1) * plane];
                            for ((d, &gv), &x) in db[n * plane..(n + 1) * plane].iter_mut().zip(chunk).zip(src) {
                                *d += gv * x;
                            }
                        }
                        db
                    });
                    self.send(&mut grads, a, da);
                    self.send(&mut grads, b, db);
                }
                Op::Upsample { input, factor } => {
                    let dx = ops::upsample_backward(self.shape(*input), *factor, &g);
                    self.send(&mut grads, *input, Some(dx));
                }
                Op::Bce { logits, target, weights } => {
                    let plane = self.shape(*logits).plane();
                    let x = self.value(*logits).data();
                    let scale = g[0];
                    let mut dx = Vec::with_capacity(x.len());
                    for (i, (&xi, &t)) in x.iter().zip(target).enumerate() {
                        let (wp, wn) = weights[i / plane];
                        let p = ops::sigmoid(xi);
                        let d = if t == T::ONE { wp * (p - T::ONE) } else { wn * p };
                        dx.push(scale * d);
                    }
                    self.send(&mut grads, *logits, Some(dx));
                }
                Op::Sum(x) => {
                    let dx = vec![g[0]; self.shape(*x).len()];
                    self.send(&mut grads, *x, Some(dx));
                }
                Op::Scale(x, factor) => {
                    let dx = g.iter().map(|&gv| gv * *factor).collect();
                    self.send(&mut grads, *x, Some(dx));
                }
                Op::WeightedSum(x, w) => {
                    let dx = w.iter().map(|&wv| wv * g[0]).collect();
                    self.send(&mut grads, *x, Some(dx));
                }
            }
        }
        Ok(())
    }

    fn send(&self, grads: &mut [Option<Vec<T>>], to: Var, g: Option<Vec<T>>) {
        let Some(g) = g else { return };
        if !self.nodes[to.0].requires_grad {
            return;
        }
        match &mut grads[to.0] {
            Some(existing) => {
                for (e, v) in existing.iter_mut().zip(g) {
                    *e += v;
                }
            }
            slot @ None => *slot = Some(g),
        }
    }

    fn accumulate_leaf(&mut self, i: usize, g: Option<Vec<T>>) {
        let node = &mut self.nodes[i];
        let shape = node.value.shape();
        match (&mut node.grad, g) {
            (Some(existing), Some(g)) => {
                for (e, v) in existing.data_mut().iter_mut().zip(g) {
                    *e += v;
                }
            }
            (slot @ None, Some(g)) => *slot = Some(Tensor::new(shape, g).expect("grad shape")),
            (slot @ None, None) => *slot = Some(Tensor::zeros(shape)),
            (Some(_), None) => {}
        }
    }
}

fn mul_slices<T: Real>(a: &[T], b: &[T]) -> Vec<T> {
    a.iter().zip(b).map(|(&x, &y)| x * y).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: Shape, v: &[f64]) -> Tensor<f64> {
        Tensor::new(shape, v.to_vec()).unwrap()
    }

    fn s1(h: usize, w: usize) -> Shape {
        Shape::new(1, 1, h, w)
    }

    #[test]
    fn conv_scalar_multiply() {
        let mut g = Graph::new();
        let x = g.constant(t(s1(1, 1), &[3.0]));
        let w = g.constant(t(s1(1, 1), &[2.0]));
        let b = g.constant(t(Shape::new(1, 1, 1, 1), &[0.0]));
        let y = g.conv2d(x, w, b).unwrap();
        assert_eq!(g.value(y).data(), &[6.0]);
    }

    #[test]
    fn conv_identity_kernel() {
        let mut g = Graph::new();
        let data: Vec<f64> = (0..20).map(|i| (i as f64).sin()).collect();
        let x = g.constant(t(s1(4, 5), &data));
        let mut k = [0.0; 9];
        k[4] = 1.0;
        let w = g.constant(t(Shape::new(1, 1, 3, 3), &k));
        let b = g.constant(t(Shape::new(1, 1, 1, 1), &[0.0]));
        let y = g.conv2d(x, w, b).unwrap();
        assert_eq!(g.value(y).data(), &data[..]);
    }

    #[test]
    fn conv_all_ones_kernel() {
        // nested-loop values: centre sums all nine, corner sums 1+2+4+5
        let mut g = Graph::new();
        let x = g.constant(t(s1(3, 3), &[1., 2., 3., 4., 5., 6., 7., 8., 9.]));
        let w = g.constant(Tensor::full(Shape::new(1, 1, 3, 3), 1.0));
        let b = g.constant(t(Shape::new(1, 1, 1, 1), &[0.0]));
        let y = g.conv2d(x, w, b).unwrap();
        let out = g.value(y);
        assert_eq!(out.get(0, 0, 1, 1), 45.0);
        assert_eq!(out.get(0, 0, 0, 0), 12.0);
    }

    #[test]
    fn conv_rejects_channel_mismatch_and_even_kernels() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::zeros(Shape::new(1, 2, 4, 4)));
        let w = g.constant(Tensor::zeros(Shape::new(1, 3, 3, 3)));
        let b = g.constant(Tensor::zeros(Shape::new(1, 1, 1, 1)));
        assert!(matches!(g.conv2d(x, w, b), Err(Error::ShapeMismatch { .. })));
        let w2 = g.constant(Tensor::zeros(Shape::new(1, 2, 2, 2)));
        assert!(matches!(g.conv2d(x, w2, b), Err(Error::EvenKernel { .. })));
    }

    #[test]
    fn maxpool_cases() {
        let mut g = Graph::new();
        let x = g.constant(t(s1(2, 2), &[1., 2., 3., 4.]));
        let y = g.maxpool2(x).unwrap();
        assert_eq!(g.value(y).data(), &[4.0]);

        let ramp: Vec<f64> = (0..16).map(f64::from).collect();
        let x = g.constant(t(s1(4, 4), &ramp));
        let y = g.maxpool2(x).unwrap();
        assert_eq!(g.value(y).data(), &[5., 7., 13., 15.]);

        let x = g.constant(Tensor::full(Shape::new(1, 2, 4, 6), 1.5));
        let y = g.maxpool2(x).unwrap();
        assert_eq!(g.shape(y), Shape::new(1, 2, 2, 3));
        assert!(g.value(y).data().iter().all(|&v| v == 1.5));

        let odd = g.constant(Tensor::zeros(s1(3, 4)));
        assert!(matches!(g.maxpool2(odd), Err(Error::OddSpatial { .. })));
    }

    #[test]
    fn maxpool_tie_routes_to_first_cell() {
        let mut g = Graph::new();
        let x = g.leaf(t(s1(2, 2), &[7., 7., 7., 7.]), true);
        let y = g.maxpool2(x).unwrap();
        let l = g.sum(y);
        g.backward(l).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[1., 0., 0., 0.]);
    }

    #[test]
    fn relu_and_sigmoid_values() {
        let mut g = Graph::new();
        let x = g.leaf(t(s1(1, 3), &[-1., 0., 2.]), true);
        let r = g.relu(x);
        assert_eq!(g.value(r).data(), &[0., 0., 2.]);
        let l = g.sum(r);
        g.backward(l).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[0., 0., 1.]);

        let z = g.constant(t(s1(1, 2), &[0.0, 3f64.ln()]));
        let s = g.sigmoid(z);
        assert_eq!(g.value(s).data()[0], 0.5);
        assert!((g.value(s).data()[1] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn sigmoid_stays_inside_unit_interval() {
        let mut g = Graph::new();
        let x = g.constant(t(s1(1, 4), &[-30.0, -5.0, 5.0, 30.0]));
        let s = g.sigmoid(x);
        assert!(g.value(s).data().iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn broadcast_mul_and_reverse() {
        let mut g = Graph::new();
        let a = g.leaf(t(Shape::new(1, 2, 1, 1), &[2.0, 4.0]), true);
        let m = g.leaf(t(Shape::new(1, 1, 1, 1), &[0.5]), true);
        let y = g.mul(a, m).unwrap();
        assert_eq!(g.value(y).data(), &[1.0, 2.0]);
        let l = g.sum(y);
        g.backward(l).unwrap();
        // broadcast gradient sums over channels
        assert_eq!(g.grad(m).unwrap().data(), &[6.0]);
        assert_eq!(g.grad(a).unwrap().data(), &[0.5, 0.5]);

        let x = g.constant(t(s1(1, 3), &[0.0, 0.5, 1.0]));
        let r = g.reverse(x);
        assert_eq!(g.value(r).data(), &[1.0, 0.5, 0.0]);
    }

    #[test]
    fn elementwise_rejects_incompatible_shapes() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::zeros(Shape::new(1, 2, 2, 2)));
        let b = g.constant(Tensor::zeros(Shape::new(1, 2, 2, 3)));
        let c = g.constant(Tensor::zeros(Shape::new(1, 1, 2, 2)));
        assert!(g.add(a, b).is_err());
        assert!(g.add(a, c).is_err());
        assert!(g.mul(a, b).is_err());
        let d = g.constant(Tensor::zeros(Shape::new(1, 2, 2, 2)));
        let e = g.constant(Tensor::zeros(Shape::new(1, 3, 2, 2)));
        assert!(g.mul(d, e).is_err());
    }

    #[test]
    fn upsample_cases() {
        let mut g = Graph::new();
        let x = g.constant(t(s1(2, 2), &[0., 1., 2., 3.]));
        let y = g.upsample(x, 2).unwrap();
        let out = g.value(y);
        assert_eq!(out.shape(), s1(4, 4));
        assert_eq!(&out.data()[..4], &[0.0, 0.25, 0.75, 1.0]);
        assert_eq!(&out.data()[12..], &[2.0, 2.25, 2.75, 3.0]);

        let v = g.constant(t(s1(1, 1), &[0.3]));
        let y = g.upsample(v, 2).unwrap();
        assert_eq!(g.value(y).data(), &[0.3; 4]);

        assert!(matches!(g.upsample(x, 3), Err(Error::InvalidUpsampleFactor(3))));
        assert!(matches!(g.upsample(x, 64), Err(Error::InvalidUpsampleFactor(64))));
    }

    #[test]
    fn bce_cases() {
        let mut g = Graph::new();
        let x = g.constant(t(s1(1, 1), &[100.0]));
        let l = g.bce_with_logits(x, &t(s1(1, 1), &[1.0]), false).unwrap();
        assert!(g.value(l).data()[0] < 1e-6);

        let zeros = g.constant(Tensor::zeros(s1(3, 5)));
        let target = t(s1(3, 5), &[1., 0., 1., 0., 0., 1., 1., 1., 0., 0., 0., 0., 1., 0., 1.]);
        let l = g.bce_with_logits(zeros, &target, false).unwrap();
        assert!((g.value(l).data()[0] - 15.0 * core::f64::consts::LN_2).abs() < 1e-12);

        let ln3 = 3f64.ln();
        let x = g.constant(t(s1(1, 2), &[ln3, -ln3]));
        let l = g.bce_with_logits(x, &t(s1(1, 2), &[1.0, 0.0]), false).unwrap();
        let expected = -(0.75f64.ln() + 0.75f64.ln());
        assert!((g.value(l).data()[0] - expected).abs() < 1e-12);
        assert!((expected - 0.57536).abs() < 1e-5);

        let big = g.constant(t(s1(1, 2), &[-100.0, 100.0]));
        let l = g.bce_with_logits(big, &t(s1(1, 2), &[1.0, 0.0]), true).unwrap();
        assert!(g.value(l).data()[0].is_finite());
    }

    #[test]
    fn bce_balanced_weights_by_opposite_fraction() {
        // 1 positive, 3 negatives, logits 0: 0.75*ln2 + 3*0.25*ln2
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(s1(2, 2)));
        let l = g.bce_with_logits(x, &t(s1(2, 2), &[1., 0., 0., 0.]), true).unwrap();
        assert!((g.value(l).data()[0] - 1.5 * core::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn bce_rejects_non_binary_target() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(s1(1, 2)));
        let err = g.bce_with_logits(x, &t(s1(1, 2), &[1.0, 0.5]), true).unwrap_err();
        assert_eq!(err, Error::NonBinaryTarget { index: 1 });
    }

    #[test]
    fn backward_basics() {
        let mut g = Graph::new();
        let x = g.leaf(t(s1(2, 3), &[1., -2., 3., 0.5, 0., 9.]), true);
        let l = g.sum(x);
        g.backward(l).unwrap();
        assert!(g.grad(x).unwrap().data().iter().all(|&d| d == 1.0));
        // a second call accumulates
        g.backward(l).unwrap();
        assert!(g.grad(x).unwrap().data().iter().all(|&d| d == 2.0));
        g.zero_grad();
        assert!(g.grad(x).is_none());

        let z = g.leaf(Tensor::zeros(s1(2, 2)), true);
        let s = g.sigmoid(z);
        let l = g.sum(s);
        g.backward(l).unwrap();
        assert!(g.grad(z).unwrap().data().iter().all(|&d| d == 0.25));

        assert!(matches!(g.backward(s), Err(Error::NotScalar(_))));
    }

    #[test]
    fn unreached_leaf_gets_zero_gradient() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::full(s1(1, 2), 1.0), true);
        let unused = g.leaf(Tensor::full(s1(1, 2), 1.0), true);
        let _ = g.relu(unused);
        let l = g.sum(x);
        g.backward(l).unwrap();
        assert!(g.grad(unused).unwrap().data().iter().all(|&d| d == 0.0));
    }

    #[test]
    fn detach_blocks_gradient() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::full(s1(1, 2), 1.0), true);
        let y = g.scale(x, 3.0);
        let d = g.detach(y);
        let z = g.mul(y, d).unwrap();
        let l = g.sum(z);
        g.backward(l).unwrap();
        // d/dx (3x * const 3) = 9
        assert_eq!(g.grad(x).unwrap().data(), &[9.0, 9.0]);
    }
}
