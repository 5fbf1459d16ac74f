//! Saliency metrics: precision/recall over 256 thresholds, maximum
//! F-measure and mean absolute error.
//!
//! A prediction pixel counts as positive at threshold `t` (0..=255) when
//! its value `s` satisfies `s >= t / 255`. Counts are integers, so curves
//! aggregated over a dataset do not depend on image order.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};

pub const THRESHOLDS: usize = 256;
/// Weight of precision over recall in the F-measure.
pub const DEFAULT_BETA2: f64 = 0.3;

/// Prediction normalized to `[0, 1]`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct SaliencyMap {
    width: usize,
    height: usize,
    values: Vec<f64>,
}

impl SaliencyMap {
    pub fn new(width: usize, height: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != width * height {
            return Err(Error::Metric(format!(
                "saliency map has {} values for {width}x{height}",
                values.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Metric(format!("saliency value {} at {i} is outside [0, 1]", values[i])));
        }
        Ok(SaliencyMap { width, height, values })
    }

    /// Interprets 8-bit gray levels as `v / 255`.
    pub fn from_gray(width: usize, height: usize, bytes: &[u8]) -> Result<Self> {
        SaliencyMap::new(width, height, bytes.iter().map(|&b| f64::from(b) / 255.0).collect())
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

/// Binary ground truth, row-major, values in `{0, 1}`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroundTruthMask {
    width: usize,
    height: usize,
    values: Vec<u8>,
}

impl GroundTruthMask {
    pub fn new(width: usize, height: usize, values: Vec<u8>) -> Result<Self> {
        if values.len() != width * height {
            return Err(Error::Metric(format!("mask has {} values for {width}x{height}", values.len())));
        }
        if let Some(i) = values.iter().position(|&v| v > 1) {
            return Err(Error::NonBinaryTarget { index: i });
        }
        Ok(GroundTruthMask { width, height, values })
    }

    /// Gray levels of 128 and above are foreground.
    pub fn from_gray(width: usize, height: usize, bytes: &[u8]) -> Result<Self> {
        GroundTruthMask::new(width, height, bytes.iter().map(|&b| u8::from(b >= 128)).collect())
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn values(&self) -> &[u8] {
        &self.values
    }

    pub fn positives(&self) -> usize {
        self.values.iter().filter(|&&v| v == 1).count()
    }

    pub fn to_gray(&self) -> Vec<u8> {
        self.values.iter().map(|&v| v * 255).collect()
    }
}

/// Largest threshold index `t` with `s >= t / 255`.
fn level(s: f64) -> usize {
    let mut k = libm::floor(s * 255.0).clamp(0.0, 255.0) as usize;
    while k < 255 && s >= (k + 1) as f64 / 255.0 {
        k += 1;
    }
    while k > 0 && s < k as f64 / 255.0 {
        k -= 1;
    }
    k
}

/// True/false positive and false negative counts per threshold.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Counts {
    pub tp: Vec<u64>,
    pub fp: Vec<u64>,
    pub fn_: Vec<u64>,
}

impl Counts {
    fn zero() -> Self {
        Counts {
            tp: vec![0; THRESHOLDS],
            fp: vec![0; THRESHOLDS],
            fn_: vec![0; THRESHOLDS],
        }
    }

    fn add(&mut self, other: &Counts) {
        for t in 0..THRESHOLDS {
            self.tp[t] += other.tp[t];
            self.fp[t] += other.fp[t];
            self.fn_[t] += other.fn_[t];
        }
    }

    pub fn precision(&self, t: usize) -> f64 {
        precision(self.tp[t], self.fp[t])
    }

    pub fn recall(&self, t: usize) -> f64 {
        recall(self.tp[t], self.fn_[t])
    }
}

/// `TP / (TP + FP)`, or 1 when nothing is predicted positive.
pub fn precision(tp: u64, fp: u64) -> f64 {
    if tp + fp == 0 {
        1.0
    } else {
        tp as f64 / (tp + fp) as f64
    }
}

/// `TP / (TP + FN)`, or 0 when there are no positives.
pub fn recall(tp: u64, fn_: u64) -> f64 {
    if tp + fn_ == 0 {
        0.0
    } else {
        tp as f64 / (tp + fn_) as f64
    }
}

fn check_dims(s: &SaliencyMap, g: &GroundTruthMask) -> Result<()> {
    if (s.width, s.height) != (g.width, g.height) {
        return Err(Error::Metric(format!(
            "prediction is {}x{} but mask is {}x{}",
            s.width, s.height, g.width, g.height
        )));
    }
    Ok(())
}

/// Per-threshold counts for one image, from a 256-bin histogram.
pub fn image_counts(s: &SaliencyMap, g: &GroundTruthMask) -> Result<Counts> {
    check_dims(s, g)?;
    let mut pos = [0u64; THRESHOLDS];
    let mut neg = [0u64; THRESHOLDS];
    for (&v, &m) in s.values.iter().zip(&g.values) {
        let k = level(v);
        if m == 1 {
            pos[k] += 1;
        } else {
            neg[k] += 1;
        }
    }
    let total_pos: u64 = pos.iter().sum();
    let mut counts = Counts::zero();
    let (mut tp, mut fp) = (0, 0);
    for t in (0..THRESHOLDS).rev() {
        tp += pos[t];
        fp += neg[t];
        counts.tp[t] = tp;
        counts.fp[t] = fp;
        counts.fn_[t] = total_pos - tp;
    }
    Ok(counts)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CurveMode {
    /// Sum TP/FP/FN over the dataset, then take ratios.
    #[default]
    Aggregate,
    /// Take ratios per image, then average over images.
    PerImage,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PrCurve {
    /// `(precision, recall)` for thresholds 0..=255.
    pub points: Vec<(f64, f64)>,
    /// Dataset-summed counts (filled in both modes).
    pub counts: Counts,
    /// Indices of pairs left out because their mask has no positives.
    pub excluded: Vec<usize>,
}

pub fn pr_curve(pairs: &[(SaliencyMap, GroundTruthMask)], mode: CurveMode) -> Result<PrCurve> {
    if pairs.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut total = Counts::zero();
    let mut sums = vec![(0.0, 0.0); THRESHOLDS];
    let mut excluded = Vec::new();
    let mut used = 0usize;
    for (i, (s, g)) in pairs.iter().enumerate() {
        check_dims(s, g)?;
        if g.positives() == 0 {
            excluded.push(i);
            continue;
        }
        let c = image_counts(s, g)?;
        if mode == CurveMode::PerImage {
            for (t, acc) in sums.iter_mut().enumerate() {
                acc.0 += c.precision(t);
                acc.1 += c.recall(t);
            }
        }
        total.add(&c);
        used += 1;
    }
    if used == 0 {
        return Err(Error::Metric("every mask is empty; precision/recall undefined".into()));
    }
    let points = match mode {
        CurveMode::Aggregate => (0..THRESHOLDS).map(|t| (total.precision(t), total.recall(t))).collect(),
        CurveMode::PerImage => sums.iter().map(|&(p, r)| (p / used as f64, r / used as f64)).collect(),
    };
    Ok(PrCurve {
        points,
        counts: total,
        excluded,
    })
}

/// `(1 + b2) P R / (b2 P + R)`, zero when the denominator vanishes.
pub fn f_measure(precision: f64, recall: f64, beta2: f64) -> f64 {
    let den = beta2 * precision + recall;
    if den == 0.0 {
        0.0
    } else {
        (1.0 + beta2) * precision * recall / den
    }
}

/// Maximum F-measure over the curve and the smallest threshold reaching it.
pub fn max_f_measure(points: &[(f64, f64)], beta2: f64) -> (f64, usize) {
    let mut best = (0.0, 0);
    for (t, &(p, r)) in points.iter().enumerate() {
        let f = f_measure(p, r, beta2);
        if f > best.0 {
            best = (f, t);
        }
    }
    best
}

/// Mean absolute difference between a prediction and its mask.
pub fn mae(s: &SaliencyMap, g: &GroundTruthMask) -> Result<f64> {
    check_dims(s, g)?;
    let n = s.values.len();
    if n == 0 {
        return Ok(0.0);
    }
    let total: f64 = s.values.iter().zip(&g.values).map(|(&v, &m)| (v - f64::from(m)).abs()).sum();
    Ok(total / n as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub per_image_mae: Vec<f64>,
    pub mae: f64,
    pub curve: PrCurve,
    pub max_f_measure: f64,
    pub argmax_threshold: usize,
    pub beta2: f64,
    pub num_images: usize,
}

/// Evaluates a whole set of prediction/mask pairs.
pub fn evaluate(pairs: &[(SaliencyMap, GroundTruthMask)], beta2: f64, mode: CurveMode) -> Result<EvalReport> {
    let curve = pr_curve(pairs, mode)?;
    let per_image_mae = pairs.iter().map(|(s, g)| mae(s, g)).collect::<Result<Vec<_>>>()?;
    let mean = per_image_mae.iter().sum::<f64>() / per_image_mae.len() as f64;
    let (max_f, argmax) = max_f_measure(&curve.points, beta2);
    Ok(EvalReport {
        mae: mean,
        per_image_mae,
        curve,
        max_f_measure: max_f,
        argmax_threshold: argmax,
        beta2,
        num_images: pairs.len(),
    })
}
