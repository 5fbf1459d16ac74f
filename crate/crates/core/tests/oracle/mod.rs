//! Straightforward reference implementations, written directly from the
//! definitions with plain loops, for checking the optimized code paths.

#![allow(dead_code)]

/// One `[C, H, W]` feature map.
#[derive(Debug, Clone, PartialEq)]
pub struct Map {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl Map {
    pub fn at(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.h + y) * self.w + x]
    }
}

/// Zero-padded "same" convolution with an odd `k x k` kernel laid out as
/// `[K, C, k, k]`.
pub fn conv2d(x: &Map, weight: &[f64], bias: &[f64], k: usize) -> Map {
    let out_c = bias.len();
    let pad = (k / 2) as isize;
    let mut data = vec![0.0; out_c * x.h * x.w];
    for o in 0..out_c {
        for y in 0..x.h {
            for xx in 0..x.w {
                let mut acc = bias[o];
                for c in 0..x.c {
                    for dy in 0..k {
                        for dx in 0..k {
                            let sy = y as isize + dy as isize - pad;
                            let sx = xx as isize + dx as isize - pad;
                            if sy < 0 || sx < 0 || sy >= x.h as isize || sx >= x.w as isize {
                                continue;
                            }
                            acc += weight[((o * x.c + c) * k + dy) * k + dx] * x.at(c, sy as usize, sx as usize);
                        }
                    }
                }
                data[(o * x.h + y) * x.w + xx] = acc;
            }
        }
    }
    Map {
        c: out_c,
        h: x.h,
        w: x.w,
        data,
    }
}

pub fn relu(x: &Map) -> Map {
    Map {
        data: x.data.iter().map(|&v| v.max(0.0)).collect(),
        ..x.clone()
    }
}

pub fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

/// Bilinear upsampling by `f` with half-pixel centres: output pixel `o`
/// samples the input at `(o + 0.5) / f - 0.5`, clamped to the valid range.
pub fn upsample(x: &Map, f: usize) -> Map {
    let source = |o: usize, n: usize| {
        let s = ((o as f64 + 0.5) / f as f64 - 0.5).clamp(0.0, (n - 1) as f64);
        let i0 = s.floor() as usize;
        let i1 = (i0 + 1).min(n - 1);
        (i0, i1, s - i0 as f64)
    };
    let (h, w) = (x.h * f, x.w * f);
    let mut data = Vec::with_capacity(x.c * h * w);
    for c in 0..x.c {
        for y in 0..h {
            let (y0, y1, ty) = source(y, x.h);
            for xx in 0..w {
                let (x0, x1, tx) = source(xx, x.w);
                let top = x.at(c, y0, x0) * (1.0 - tx) + x.at(c, y0, x1) * tx;
                let bottom = x.at(c, y1, x0) * (1.0 - tx) + x.at(c, y1, x1) * tx;
                data.push(top * (1.0 - ty) + bottom * ty);
            }
        }
    }
    Map { c: x.c, h, w, data }
}

/// Summed binary cross-entropy of logits against a 0/1 target. Balanced
/// mode weights positives by the negative fraction and vice versa.
pub fn bce(logits: &[f64], target: &[f64], balanced: bool) -> f64 {
    let n = target.len() as f64;
    let pos = target.iter().filter(|&&t| t == 1.0).count() as f64;
    let (wp, wn) = if balanced { ((n - pos) / n, pos / n) } else { (1.0, 1.0) };
    logits
        .iter()
        .zip(target)
        .map(|(&x, &t)| {
            let p = sigmoid(x);
            -(wp * t * p.ln() + wn * (1.0 - t) * (1.0 - p).ln())
        })
        .sum()
}

/// Per-threshold `(TP, FP, FN)` of one image, by testing every pixel
/// against every threshold `t / 255`.
pub fn counts(pred: &[f64], mask: &[u8]) -> Vec<(u64, u64, u64)> {
    (0..256)
        .map(|t| {
            let mut c = (0, 0, 0);
            for (&s, &g) in pred.iter().zip(mask) {
                let positive = s >= t as f64 / 255.0;
                match (positive, g == 1) {
                    (true, true) => c.0 += 1,
                    (true, false) => c.1 += 1,
                    (false, true) => c.2 += 1,
                    (false, false) => {}
                }
            }
            c
        })
        .collect()
}

pub fn precision_recall((tp, fp, fn_): (u64, u64, u64)) -> (f64, f64) {
    let p = if tp + fp == 0 { 1.0 } else { tp as f64 / (tp + fp) as f64 };
    let r = if tp + fn_ == 0 { 0.0 } else { tp as f64 / (tp + fn_) as f64 };
    (p, r)
}

pub fn f_measure(p: f64, r: f64, beta2: f64) -> f64 {
    let d = beta2 * p + r;
    if d == 0.0 {
        0.0
    } else {
        (1.0 + beta2) * p * r / d
    }
}

pub fn mae(pred: &[f64], mask: &[u8]) -> f64 {
    pred.iter().zip(mask).map(|(&s, &g)| (s - g as f64).abs()).sum::<f64>() / pred.len() as f64
}

/// Aggregate curve, max F with the smallest argmax, and mean MAE over
/// `(prediction, mask)` pairs. Masks without positives stay out of the
/// curve.
pub struct Evaluation {
    pub counts: Vec<(u64, u64, u64)>,
    pub points: Vec<(f64, f64)>,
    pub max_f: f64,
    pub argmax: usize,
    pub mae: f64,
}

pub fn evaluate(pairs: &[(Vec<f64>, Vec<u8>)], beta2: f64) -> Evaluation {
    let mut total = vec![(0, 0, 0); 256];
    for (pred, mask) in pairs {
        if !mask.contains(&1) {
            continue;
        }
        for (acc, c) in total.iter_mut().zip(counts(pred, mask)) {
            acc.0 += c.0;
            acc.1 += c.1;
            acc.2 += c.2;
        }
    }
    let points: Vec<(f64, f64)> = total.iter().map(|&c| precision_recall(c)).collect();
    let mut max_f = -1.0;
    let mut argmax = 0;
    for (t, &(p, r)) in points.iter().enumerate() {
        let f = f_measure(p, r, beta2);
        if f > max_f {
            max_f = f;
            argmax = t;
        }
    }
    let mae = pairs.iter().map(|(p, m)| mae(p, m)).sum::<f64>() / pairs.len() as f64;
    Evaluation {
        counts: total,
        points,
        max_f,
        argmax,
        mae,
    }
}
