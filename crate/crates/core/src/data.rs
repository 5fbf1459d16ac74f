//! Training samples, augmentation and the synthetic shape generator.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::GroundTruthMask;
use crate::network::GLOBAL_STRIDE;
use crate::real::Real;
use crate::tensor::{Shape, Tensor};

/// Per-channel means subtracted after scaling RGB to `[0, 1]`.
pub const CHANNEL_MEANS: [f64; 3] = [0.485, 0.456, 0.406];

/// Interleaved 8-bit RGB, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self> {
        if pixels.len() != width * height * 3 {
            return Err(Error::InvalidConfig(format!(
                "rgb buffer has {} bytes for {width}x{height}",
                pixels.len()
            )));
        }
        Ok(RgbImage { width, height, pixels })
    }
}

/// Scales to `[0, 1]` and subtracts [`CHANNEL_MEANS`], giving `[1, 3, H, W]`.
pub fn normalize<T: Real>(img: &RgbImage) -> Tensor<T> {
    let plane = img.width * img.height;
    let mut data = vec![T::ZERO; 3 * plane];
    for (i, px) in img.pixels.chunks_exact(3).enumerate() {
        for c in 0..3 {
            data[c * plane + i] = T::from_f64(f64::from(px[c]) / 255.0 - CHANNEL_MEANS[c]);
        }
    }
    Tensor::new(Shape::new(1, 3, img.height, img.width), data).expect("normalized shape")
}

pub fn check_divisible(height: usize, width: usize) -> Result<()> {
    if height == 0 || width == 0 || !height.is_multiple_of(GLOBAL_STRIDE) || !width.is_multiple_of(GLOBAL_STRIDE) {
        return Err(Error::NotDivisible { height, width });
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample<T> {
    /// `[1, 3, H, W]`, normalized.
    pub image: Tensor<T>,
    pub mask: GroundTruthMask,
    pub stem: String,
}

impl<T: Real> Sample<T> {
    pub fn new(stem: impl Into<String>, image: &RgbImage, mask: GroundTruthMask) -> Result<Self> {
        check_divisible(image.height, image.width)?;
        if (mask.width(), mask.height()) != (image.width, image.height) {
            return Err(Error::InvalidConfig(format!(
                "mask is {}x{} but image is {}x{}",
                mask.width(),
                mask.height(),
                image.width,
                image.height
            )));
        }
        Ok(Sample {
            image: normalize(image),
            mask,
            stem: stem.into(),
        })
    }

    /// The mask as a `[1, 1, H, W]` tensor of zeros and ones.
    pub fn target(&self) -> Tensor<T> {
        let data = self.mask.values().iter().map(|&v| if v == 1 { T::ONE } else { T::ZERO }).collect();
        Tensor::new(Shape::new(1, 1, self.mask.height(), self.mask.width()), data).expect("mask shape")
    }
}

fn flip_rows<U: Copy>(data: &mut [U], width: usize) {
    for row in data.chunks_exact_mut(width) {
        row.reverse();
    }
}

/// Mirrors image and mask about the vertical axis.
pub fn flip_horizontal<T: Real>(s: &Sample<T>) -> Sample<T> {
    let mut image = s.image.clone();
    let w = image.shape().w;
    flip_rows(image.data_mut(), w);
    let mut values = s.mask.values().to_vec();
    flip_rows(&mut values, s.mask.width());
    Sample {
        image,
        mask: GroundTruthMask::new(s.mask.width(), s.mask.height(), values).expect("flipped mask"),
        stem: format!("{}_flip", s.stem),
    }
}

/// The originals followed by their mirrored copies.
pub fn augment_with_flips<T: Real>(samples: &[Sample<T>]) -> Vec<Sample<T>> {
    samples.iter().cloned().chain(samples.iter().map(flip_horizontal)).collect()
}

fn reflect(i: usize, len: usize) -> usize {
    // mirror without repeating the edge: ... 2 1 | 0 1 2 ... n-1 | n-2 ...
    if len == 1 {
        return 0;
    }
    let period = 2 * (len - 1);
    let r = i % period;
    if r < len {
        r
    } else {
        period - r
    }
}

/// Reflect-pads `[N, C, H, W]` at the bottom and right up to multiples of
/// `multiple`.
pub fn pad_reflect<T: Real>(x: &Tensor<T>, multiple: usize) -> Tensor<T> {
    let s = x.shape();
    let h = s.h.div_ceil(multiple) * multiple;
    let w = s.w.div_ceil(multiple) * multiple;
    let out_shape = Shape::new(s.n, s.c, h, w);
    let mut data = Vec::with_capacity(out_shape.len());
    for plane in x.data().chunks_exact(s.plane()) {
        for y in 0..h {
            let sy = reflect(y, s.h);
            data.extend((0..w).map(|xx| plane[sy * s.w + reflect(xx, s.w)]));
        }
    }
    Tensor::new(out_shape, data).expect("padded shape")
}

/// Top-left `height x width` window of every plane.
pub fn crop<T: Real>(x: &Tensor<T>, height: usize, width: usize) -> Tensor<T> {
    let s = x.shape();
    let out_shape = Shape::new(s.n, s.c, height.min(s.h), width.min(s.w));
    let mut data = Vec::with_capacity(out_shape.len());
    for plane in x.data().chunks_exact(s.plane()) {
        for y in 0..out_shape.h {
            data.extend_from_slice(&plane[y * s.w..y * s.w + out_shape.w]);
        }
    }
    Tensor::new(out_shape, data).expect("cropped shape")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Ellipse,
    Rectangle,
    Triangle,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub count: usize,
    /// Side length; images are square.
    pub size: usize,
    pub seed: u64,
    pub min_shapes: usize,
    pub max_shapes: usize,
    pub kinds: Vec<ShapeKind>,
    /// Brightness gap between foreground and background, drawn per image.
    pub contrast: (f64, f64),
    /// Amplitude of the background texture.
    pub noise: f64,
}

impl SyntheticSpec {
    pub fn new(count: usize, size: usize, seed: u64) -> Self {
        SyntheticSpec {
            count,
            size,
            seed,
            min_shapes: 1,
            max_shapes: 3,
            kinds: vec![ShapeKind::Ellipse, ShapeKind::Rectangle, ShapeKind::Triangle],
            contrast: (0.3, 0.6),
            noise: 0.08,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.count == 0 {
            return Err(Error::InvalidConfig("synthetic count must be at least 1".into()));
        }
        if self.size < 64 {
            return Err(Error::InvalidConfig(format!("synthetic size {} is below 64", self.size)));
        }
        check_divisible(self.size, self.size)?;
        if self.min_shapes == 0 || self.min_shapes > self.max_shapes {
            return Err(Error::InvalidConfig("shape count range must satisfy 1 <= min <= max".into()));
        }
        if self.kinds.is_empty() {
            return Err(Error::InvalidConfig("at least one shape kind is required".into()));
        }
        let (lo, hi) = self.contrast;
        if !(0.0 < lo && lo <= hi && hi <= 1.0) {
            return Err(Error::InvalidConfig("contrast range must lie in (0, 1]".into()));
        }
        if !(0.0..=0.5).contains(&self.noise) {
            return Err(Error::InvalidConfig("noise amplitude must lie in [0, 0.5]".into()));
        }
        Ok(())
    }

    pub fn stem(&self, index: usize) -> String {
        format!("{index:05}")
    }
}

/// Mask positive fraction every generated sample satisfies.
pub const MIN_FOREGROUND: f64 = 0.01;
pub const MAX_FOREGROUND: f64 = 0.60;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SyntheticSample {
    pub stem: String,
    pub image: RgbImage,
    pub mask: GroundTruthMask,
}

/// 64-bit FNV-1a.
fn stem_hash(stem: &str) -> u64 {
    stem.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01b3))
}

enum Figure {
    /// Center, semi-axes, rotation (cos, sin).
    Ellipse { cx: f64, cy: f64, a: f64, b: f64, rot: (f64, f64) },
    Rectangle { cx: f64, cy: f64, a: f64, b: f64, rot: (f64, f64) },
    Triangle { p: [(f64, f64); 3] },
}

impl Figure {
    fn random(kind: ShapeKind, size: f64, rng: &mut ChaCha8Rng) -> Self {
        let cx = rng.random_range(0.15..0.85) * size;
        let cy = rng.random_range(0.15..0.85) * size;
        let a = rng.random_range(0.08..0.28) * size;
        let b = rng.random_range(0.08..0.28) * size;
        let angle = rng.random_range(0.0..core::f64::consts::PI);
        let rot = (libm::cos(angle), libm::sin(angle));
        match kind {
            ShapeKind::Ellipse => Figure::Ellipse { cx, cy, a, b, rot },
            ShapeKind::Rectangle => Figure::Rectangle { cx, cy, a, b, rot },
            ShapeKind::Triangle => {
                let r = a.max(b) * 1.2;
                let mut p = [(0.0, 0.0); 3];
                for (k, v) in p.iter_mut().enumerate() {
                    let t = angle + k as f64 * 2.0 * core::f64::consts::PI / 3.0 + rng.random_range(-0.4..0.4);
                    let rr = r * rng.random_range(0.7..1.0);
                    *v = (cx + rr * libm::cos(t), cy + rr * libm::sin(t));
                }
                Figure::Triangle { p }
            }
        }
    }

    fn contains(&self, x: f64, y: f64) -> bool {
        match *self {
            Figure::Ellipse { cx, cy, a, b, rot } => {
                let (u, v) = local(x - cx, y - cy, rot);
                (u / a) * (u / a) + (v / b) * (v / b) <= 1.0
            }
            Figure::Rectangle { cx, cy, a, b, rot } => {
                let (u, v) = local(x - cx, y - cy, rot);
                u.abs() <= a && v.abs() <= b
            }
            Figure::Triangle { p } => {
                let side = |(ax, ay): (f64, f64), (bx, by): (f64, f64)| (bx - ax) * (y - ay) - (by - ay) * (x - ax);
                let d = [side(p[0], p[1]), side(p[1], p[2]), side(p[2], p[0])];
                d.iter().all(|&v| v >= 0.0) || d.iter().all(|&v| v <= 0.0)
            }
        }
    }
}

fn local(dx: f64, dy: f64, (c, s): (f64, f64)) -> (f64, f64) {
    (c * dx + s * dy, -s * dx + c * dy)
}

/// Renders sample `index`. Each sample has its own generator seeded from
/// the dataset seed and its stem, so samples can be produced in any order.
pub fn generate_sample(spec: &SyntheticSpec, index: usize) -> Result<SyntheticSample> {
    spec.validate()?;
    let stem = spec.stem(index);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ stem_hash(&stem));
    let n = spec.size;
    let size = n as f64;

    let mut mask = vec![0u8; n * n];
    loop {
        let count = rng.random_range(spec.min_shapes..=spec.max_shapes);
        let figures: Vec<Figure> = (0..count)
            .map(|_| {
                let kind = spec.kinds[rng.random_range(0..spec.kinds.len())];
                Figure::random(kind, size, &mut rng)
            })
            .collect();
        for y in 0..n {
            for x in 0..n {
                let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                mask[y * n + x] = u8::from(figures.iter().any(|f| f.contains(px, py)));
            }
        }
        let frac = mask.iter().filter(|&&m| m == 1).count() as f64 / (n * n) as f64;
        if (MIN_FOREGROUND..=MAX_FOREGROUND).contains(&frac) {
            break;
        }
    }

    // Background: dim base color with a smooth texture and pixel noise.
    // Foreground: the base color raised by the drawn contrast, tinted per
    // channel, with weaker noise.
    let base: [f64; 3] = core::array::from_fn(|_| rng.random_range(0.1..0.4));
    let contrast = rng.random_range(spec.contrast.0..=spec.contrast.1);
    let tint: [f64; 3] = core::array::from_fn(|_| rng.random_range(0.75..1.0));
    let waves: Vec<(f64, f64, f64, f64)> = (0..3)
        .map(|_| {
            (
                rng.random_range(1.0..5.0) * 2.0 * core::f64::consts::PI / size,
                rng.random_range(1.0..5.0) * 2.0 * core::f64::consts::PI / size,
                rng.random_range(0.0..2.0 * core::f64::consts::PI),
                rng.random_range(0.3..1.0),
            )
        })
        .collect();
    let wave_norm: f64 = waves.iter().map(|w| w.3).sum();

    let mut pixels = Vec::with_capacity(n * n * 3);
    for y in 0..n {
        for x in 0..n {
            let texture: f64 = waves
                .iter()
                .map(|&(fx, fy, phase, amp)| amp * libm::sin(fx * x as f64 + fy * y as f64 + phase))
                .sum::<f64>()
                / wave_norm;
            let fg = mask[y * n + x] == 1;
            for c in 0..3 {
                let jitter = rng.random_range(-1.0..1.0);
                let v = if fg {
                    base[c] + contrast * tint[c] + 0.25 * spec.noise * jitter
                } else {
                    base[c] + spec.noise * (0.6 * texture + 0.4 * jitter)
                };
                pixels.push(libm::round(v.clamp(0.0, 1.0) * 255.0) as u8);
            }
        }
    }

    Ok(SyntheticSample {
        stem,
        image: RgbImage::new(n, n, pixels)?,
        mask: GroundTruthMask::new(n, n, mask)?,
    })
}

impl SyntheticSample {
    pub fn to_sample<T: Real>(&self) -> Result<Sample<T>> {
        Sample::new(self.stem.clone(), &self.image, self.mask.clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flip_is_an_involution_and_moves_the_mask() {
        let mut values = vec![0u8; 64 * 64];
        for y in 0..64 {
            values[y * 64..y * 64 + 32].fill(1);
        }
        let mask = GroundTruthMask::new(64, 64, values).unwrap();
        let pixels = (0..64 * 64 * 3).map(|i| (i * 7 % 251) as u8).collect();
        let img = RgbImage::new(64, 64, pixels).unwrap();
        let s = Sample::<f64>::new("a", &img, mask).unwrap();
        let f = flip_horizontal(&s);
        assert!(f.mask.values()[..64].iter().enumerate().all(|(x, &v)| v == u8::from(x >= 32)));
        let ff = flip_horizontal(&f);
        assert_eq!(ff.image, s.image);
        assert_eq!(ff.mask, s.mask);
        assert_eq!(augment_with_flips(&[s.clone(), f]).len(), 4);
    }

    #[test]
    fn sample_rejects_non_divisible_dims() {
        let img = RgbImage::new(60, 64, vec![0; 60 * 64 * 3]).unwrap();
        let mask = GroundTruthMask::new(60, 64, vec![0; 60 * 64]).unwrap();
        assert!(matches!(Sample::<f64>::new("x", &img, mask), Err(Error::NotDivisible { .. })));
    }

    #[test]
    fn normalization_constants() {
        let img = RgbImage::new(1, 1, vec![255, 0, 51]).unwrap();
        let t = normalize::<f64>(&img);
        assert!((t.data()[0] - (1.0 - 0.485)).abs() < 1e-15);
        assert!((t.data()[1] + 0.456).abs() < 1e-15);
        assert!((t.data()[2] - (0.2 - 0.406)).abs() < 1e-15);
    }

    #[test]
    fn reflect_pad_then_crop() {
        let x = Tensor::<f64>::from_f64(Shape::new(1, 1, 2, 3), &[1., 2., 3., 4., 5., 6.]).unwrap();
        let p = pad_reflect(&x, 4);
        assert_eq!(p.shape(), Shape::new(1, 1, 4, 4));
        assert_eq!(&p.data()[..4], &[1., 2., 3., 2.]);
        assert_eq!(&p.data()[8..12], &[1., 2., 3., 2.]);
        assert_eq!(crop(&p, 2, 3), x);
    }

    #[test]
    fn generator_is_deterministic_and_bounded() {
        let spec = SyntheticSpec::new(12, 64, 7);
        for i in 0..spec.count {
            let a = generate_sample(&spec, i).unwrap();
            let b = generate_sample(&spec, i).unwrap();
            assert_eq!(a, b);
            let frac = a.mask.positives() as f64 / (64.0 * 64.0);
            assert!((MIN_FOREGROUND..=MAX_FOREGROUND).contains(&frac), "{frac}");
        }
        let other = generate_sample(&SyntheticSpec::new(12, 64, 8), 0).unwrap();
        assert_ne!(other.image, generate_sample(&spec, 0).unwrap().image);
    }

    #[test]
    fn generator_validates_spec() {
        assert!(generate_sample(&SyntheticSpec::new(1, 60, 0), 0).is_err());
        assert!(generate_sample(&SyntheticSpec::new(1, 32, 0), 0).is_err());
        assert!(generate_sample(&SyntheticSpec::new(0, 64, 0), 0).is_err());
    }
}
