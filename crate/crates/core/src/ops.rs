//! Forward and backward kernels on raw buffers. The graph owns bookkeeping;
//! these functions only do arithmetic.

use alloc::vec;
use alloc::vec::Vec;

use crate::real::Real;
use crate::tensor::{Shape, Tensor};

pub(crate) const UPSAMPLE_FACTORS: [usize; 5] = [2, 4, 8, 16, 32];

/// Unfolds one `[C, H, W]` image into `[C*kh*kw, H*W]` columns with zero
/// "same" padding.
fn im2col<T: Real>(src: &[T], c: usize, h: usize, w: usize, kh: usize, kw: usize, cols: &mut [T]) {
    let (ph, pw) = (kh / 2, kw / 2);
    let plane = h * w;
    for ci in 0..c {
        let img = &src[ci * plane..(ci + 1) * plane];
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (ci * kh + ky) * kw + kx;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                let x_lo = pw.saturating_sub(kx);
                let x_hi = (w + pw).saturating_sub(kx).min(w);
                for y in 0..h {
                    let out = &mut dst[y * w..(y + 1) * w];
                    let sy = y + ky;
                    if sy < ph || sy - ph >= h || x_lo >= x_hi {
                        out.fill(T::ZERO);
                        continue;
                    }
                    let sy = sy - ph;
                    out[..x_lo].fill(T::ZERO);
                    out[x_hi..].fill(T::ZERO);
                    let sx_lo = x_lo + kx - pw;
                    let run = x_hi - x_lo;
                    out[x_lo..x_hi].copy_from_slice(&img[sy * w + sx_lo..sy * w + sx_lo + run]);
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters columns back, accumulating into `dst`.
fn col2im<T: Real>(cols: &[T], c: usize, h: usize, w: usize, kh: usize, kw: usize, dst: &mut [T]) {
    let (ph, pw) = (kh / 2, kw / 2);
    let plane = h * w;
    for ci in 0..c {
        let img = &mut dst[ci * plane..(ci + 1) * plane];
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (ci * kh + ky) * kw + kx;
                let src = &cols[row * plane..(row + 1) * plane];
                let x_lo = pw.saturating_sub(kx);
                let x_hi = (w + pw).saturating_sub(kx).min(w);
                if x_lo >= x_hi {
                    continue;
                }
                for y in 0..h {
                    let sy = y + ky;
                    if sy < ph || sy - ph >= h {
                        continue;
                    }
                    let sy = sy - ph;
                    let sx_lo = x_lo + kx - pw;
                    let run = x_hi - x_lo;
                    let target = &mut img[sy * w + sx_lo..sy * w + sx_lo + run];
                    for (t, &s) in target.iter_mut().zip(&src[y * w + x_lo..y * w + x_hi]) {
                        *t += s;
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward<T: Real>(input: &Tensor<T>, weight: &Tensor<T>, bias: &[T]) -> Tensor<T> {
    let s = input.shape();
    let ws = weight.shape();
    let (k, kh, kw) = (ws.n, ws.h, ws.w);
    let plane = s.plane();
    let patch = s.c * kh * kw;
    let out_shape = Shape::new(s.n, k, s.h, s.w);
    let mut out = vec![T::ZERO; out_shape.len()];
    let pointwise = kh == 1 && kw == 1;
    let mut cols = if pointwise { Vec::new() } else { vec![T::ZERO; patch * plane] };
    for n in 0..s.n {
        let src = &input.data()[n * s.c * plane..(n + 1) * s.c * plane];
        let dst = &mut out[n * k * plane..(n + 1) * k * plane];
        for (ki, row) in dst.chunks_exact_mut(plane).enumerate() {
            row.fill(bias[ki]);
        }
        let cols_ref: &[T] = if pointwise {
            src
        } else {
            im2col(src, s.c, s.h, s.w, kh, kw, &mut cols);
            &cols
        };
        T::gemm(
            k,
            patch,
            plane,
            weight.data(),
            patch as isize,
            1,
            cols_ref,
            plane as isize,
            1,
            T::ONE,
            dst,
            plane as isize,
            1,
        );
    }
    Tensor::new(out_shape, out).expect("conv output shape")
}

pub(crate) struct ConvGrads<T> {
    pub input: Option<Vec<T>>,
    pub weight: Option<Vec<T>>,
    pub bias: Option<Vec<T>>,
}

pub(crate) fn conv2d_backward<T: Real>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &[T],
    need: [bool; 3],
) -> ConvGrads<T> {
    let s = input.shape();
    let ws = weight.shape();
    let (k, kh, kw) = (ws.n, ws.h, ws.w);
    let plane = s.plane();
    let patch = s.c * kh * kw;
    let pointwise = kh == 1 && kw == 1;

    let mut d_input = need[0].then(|| vec![T::ZERO; s.len()]);
    let mut d_weight = need[1].then(|| vec![T::ZERO; ws.len()]);
    let d_bias = need[2].then(|| {
        let mut db = vec![T::ZERO; k];
        for n in 0..s.n {
            for (ki, d) in db.iter_mut().enumerate() {
                let start = (n * k + ki) * plane;
                *d += grad_out[start..start + plane].iter().copied().sum::<T>();
            }
        }
        db
    });

    let mut cols = if pointwise || !need[1] { Vec::new() } else { vec![T::ZERO; patch * plane] };
    let mut d_cols = if pointwise || !need[0] { Vec::new() } else { vec![T::ZERO; patch * plane] };
    for n in 0..s.n {
        let src = &input.data()[n * s.c * plane..(n + 1) * s.c * plane];
        let g = &grad_out[n * k * plane..(n + 1) * k * plane];
        if let Some(dw) = d_weight.as_mut() {
            let cols_ref: &[T] = if pointwise {
                src
            } else {
                im2col(src, s.c, s.h, s.w, kh, kw, &mut cols);
                &cols
            };
            // dW[k, p] += sum_z g[k, z] * cols[p, z]
            T::gemm(k, plane, patch, g, plane as isize, 1, cols_ref, 1, plane as isize, T::ONE, dw, patch as isize, 1);
        }
        if let Some(dx) = d_input.as_mut() {
            let dst = &mut dx[n * s.c * plane..(n + 1) * s.c * plane];
            // dcols[p, z] = sum_k W[k, p] * g[k, z]
            if pointwise {
                T::gemm(patch, k, plane, weight.data(), 1, patch as isize, g, plane as isize, 1, T::ZERO, dst, plane as isize, 1);
            } else {
                T::gemm(
                    patch,
                    k,
                    plane,
                    weight.data(),
                    1,
                    patch as isize,
                    g,
                    plane as isize,
                    1,
                    T::ZERO,
                    &mut d_cols,
                    plane as isize,
                    1,
                );
                col2im(&d_cols, s.c, s.h, s.w, kh, kw, dst);
            }
        }
    }
    ConvGrads {
        input: d_input,
        weight: d_weight,
        bias: d_bias,
    }
}

/// Returns the pooled tensor and, per output cell, the flat input index of
/// its maximum (first in row-major order on ties).
pub(crate) fn maxpool2_forward<T: Real>(input: &Tensor<T>) -> (Tensor<T>, Vec<u32>) {
    let s = input.shape();
    let out_shape = Shape::new(s.n, s.c, s.h / 2, s.w / 2);
    let mut out = Vec::with_capacity(out_shape.len());
    let mut arg = Vec::with_capacity(out_shape.len());
    let x = input.data();
    for plane in 0..s.n * s.c {
        let base = plane * s.plane();
        for oy in 0..out_shape.h {
            for ox in 0..out_shape.w {
                let mut best = base + 2 * oy * s.w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let i = base + (2 * oy + dy) * s.w + 2 * ox + dx;
                    if x[i] > x[best] {
                        best = i;
                    }
                }
                out.push(x[best]);
                arg.push(best as u32);
            }
        }
    }
    (Tensor::new(out_shape, out).expect("pool shape"), arg)
}

#[inline]
pub(crate) fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::ZERO {
        T::ONE / (T::ONE + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::ONE + e)
    }
}

/// `ln(1 + e^x)` without overflow.
#[inline]
pub(crate) fn softplus<T: Real>(x: T) -> T {
    let pos = if x > T::ZERO { x } else { T::ZERO };
    pos + (-x.abs()).exp().ln_1p()
}

/// Source taps for half-pixel-aligned bilinear upsampling along one axis:
/// output `i` reads `(1 - frac) * src[lo] + frac * src[hi]`.
pub(crate) fn upsample_taps(len: usize, factor: usize) -> Vec<(usize, usize, f64)> {
    let f = factor as f64;
    let last = (len - 1) as f64;
    (0..len * factor)
        .map(|i| {
            let pos = ((i as f64 + 0.5) / f - 0.5).clamp(0.0, last);
            let lo = libm::floor(pos) as usize;
            let hi = (lo + 1).min(len - 1);
            (lo, hi, pos - lo as f64)
        })
        .collect()
}

type Taps<T> = Vec<(usize, usize, T, T)>;

fn typed_taps<T: Real>(len: usize, factor: usize) -> Taps<T> {
    upsample_taps(len, factor)
        .into_iter()
        .map(|(lo, hi, frac)| (lo, hi, T::from_f64(1.0 - frac), T::from_f64(frac)))
        .collect()
}

pub(crate) fn upsample_forward<T: Real>(input: &Tensor<T>, factor: usize) -> Tensor<T> {
    let s = input.shape();
    let out_shape = Shape::new(s.n, s.c, s.h * factor, s.w * factor);
    let ty = typed_taps::<T>(s.h, factor);
    let tx = typed_taps::<T>(s.w, factor);
    let mut out = Vec::with_capacity(out_shape.len());
    let mut row_lo = vec![T::ZERO; out_shape.w];
    let mut row_hi = vec![T::ZERO; out_shape.w];
    for plane in input.data().chunks_exact(s.plane()) {
        for &(ylo, yhi, _, wy1) in &ty {
            interp_row(&plane[ylo * s.w..(ylo + 1) * s.w], &tx, &mut row_lo);
            interp_row(&plane[yhi * s.w..(yhi + 1) * s.w], &tx, &mut row_hi);
            out.extend(row_lo.iter().zip(&row_hi).map(|(&a, &b)| lerp(a, b, wy1)));
        }
    }
    Tensor::new(out_shape, out).expect("upsample shape")
}

// `a + t * (b - a)` returns `a` exactly when `a == b`, so constant fields
// survive interpolation bit for bit.
#[inline]
fn lerp<T: Real>(a: T, b: T, t: T) -> T {
    a + t * (b - a)
}

fn interp_row<T: Real>(src: &[T], taps: &Taps<T>, dst: &mut [T]) {
    for (d, &(lo, hi, _, t)) in dst.iter_mut().zip(taps) {
        *d = lerp(src[lo], src[hi], t);
    }
}

pub(crate) fn upsample_backward<T: Real>(in_shape: Shape, factor: usize, grad_out: &[T]) -> Vec<T> {
    let ty = typed_taps::<T>(in_shape.h, factor);
    let tx = typed_taps::<T>(in_shape.w, factor);
    let ow = in_shape.w * factor;
    let oplane = ow * in_shape.h * factor;
    let mut grad = vec![T::ZERO; in_shape.len()];
    let mut row = vec![T::ZERO; in_shape.w];
    for (g_plane, dst) in grad_out.chunks_exact(oplane).zip(grad.chunks_exact_mut(in_shape.plane())) {
        for (oy, &(ylo, yhi, wy0, wy1)) in ty.iter().enumerate() {
            row.fill(T::ZERO);
            for (&g, &(xlo, xhi, wx0, wx1)) in g_plane[oy * ow..(oy + 1) * ow].iter().zip(&tx) {
                row[xlo] += wx0 * g;
                row[xhi] += wx1 * g;
            }
            for (x, &r) in row.iter().enumerate() {
                dst[ylo * in_shape.w + x] += wy0 * r;
                dst[yhi * in_shape.w + x] += wy1 * r;
            }
        }
    }
    grad
}
