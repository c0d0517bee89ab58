//! Separable bicubic resampling with antialiasing on downscale.
//!
//! Output sample `i` (1-based) maps to input coordinate
//! `i / factor + 0.5 * (1 - 1 / factor)`. When shrinking, the kernel is
//! stretched by `1 / factor`. Samples beyond the border are mirrored
//! (`... 2 1 | 1 2 ... n | n n-1 ...`).

use crate::error::{Error, Result};
use crate::tensor::{Element, Shape, Tensor};

/// Keys cubic with `a = -0.5`.
pub fn cubic(x: f64) -> f64 {
    let ax = x.abs();
    let ax2 = ax * ax;
    let ax3 = ax2 * ax;
    if ax <= 1.0 {
        1.5 * ax3 - 2.5 * ax2 + 1.0
    } else if ax <= 2.0 {
        -0.5 * ax3 + 2.5 * ax2 - 4.0 * ax + 2.0
    } else {
        0.0
    }
}

/// 0-based index of 1-based sample `idx` under half-sample mirroring.
fn mirror(idx: i64, len: usize) -> usize {
    let n = len as i64;
    let m = (idx - 1).rem_euclid(2 * n);
    (if m < n { m } else { 2 * n - 1 - m }) as usize
}

/// Per output sample: input indices and normalized weights.
fn contributions(in_len: usize, out_len: usize, factor: f64) -> Vec<Vec<(usize, f64)>> {
    let shrink = factor < 1.0;
    let width = if shrink { 4.0 / factor } else { 4.0 };
    let taps = width.ceil() as i64 + 2;
    (1..=out_len)
        .map(|i| {
            let u = i as f64 / factor + 0.5 * (1.0 - 1.0 / factor);
            let left = (u - width / 2.0).floor() as i64;
            let mut row: Vec<(usize, f64)> = (0..taps)
                .map(|j| {
                    let idx = left + j;
                    let d = u - idx as f64;
                    let w = if shrink { factor * cubic(factor * d) } else { cubic(d) };
                    (mirror(idx, in_len), w)
                })
                .filter(|&(_, w)| w != 0.0)
                .collect();
            let total: f64 = row.iter().map(|&(_, w)| w).sum();
            for (_, w) in &mut row {
                *w /= total;
            }
            row
        })
        .collect()
}

/// Output length for an input of `len` samples.
pub fn scaled_len(len: usize, factor: f64) -> usize {
    // guard against products like 255.99999 for exact ratios
    ((len as f64 * factor) - 1e-9).ceil().max(1.0) as usize
}

/// Resizes every plane of `img` by `factor` along both axes.
pub fn bicubic_resize<T: Element>(img: &Tensor<T>, factor: f64) -> Result<Tensor<T>> {
    if !(factor.is_finite() && factor > 0.0) {
        return Err(Error::config(format!("resize factor must be positive, got {factor}")));
    }
    let s = img.shape();
    let (oh, ow) = (scaled_len(s.h, factor), scaled_len(s.w, factor));
    let rows = contributions(s.h, oh, factor);
    let cols = contributions(s.w, ow, factor);
    let out_shape = Shape::new(s.n, s.c, oh, ow);
    let mut out = Vec::with_capacity(out_shape.numel());
    let mut tmp = vec![0.0f64; oh * s.w];
    for plane in img.data().chunks(s.h * s.w) {
        for (y, row) in rows.iter().enumerate() {
            for x in 0..s.w {
                tmp[y * s.w + x] = row.iter().map(|&(iy, w)| w * plane[iy * s.w + x].as_f64()).sum();
            }
        }
        for y in 0..oh {
            let line = &tmp[y * s.w..(y + 1) * s.w];
            for col in &cols {
                let v: f64 = col.iter().map(|&(ix, w)| w * line[ix]).sum();
                out.push(T::from_f64_lossy(v));
            }
        }
    }
    Tensor::new(out_shape, out)
}
