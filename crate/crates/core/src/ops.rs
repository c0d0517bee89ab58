//! Forward and backward kernels for the primitive operations.
//!
//! These are plain functions on tensors. [`crate::graph::Graph`] records
//! them for reverse-mode differentiation and [`crate::nn::Eager`] calls them
//! directly for inference.

use crate::error::{Error, Result};
use crate::tensor::{Element, Shape, Tensor};

/// Output extents and window parameters of a 2-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.pad == 0
    }
}

pub fn conv_geometry(input: Shape, weight: Shape, stride: usize, pad: usize) -> Result<ConvGeometry> {
    if weight.h != weight.w {
        return Err(Error::config(format!("non-square kernel {weight}")));
    }
    if input.c != weight.c {
        return Err(Error::config(format!(
            "conv2d: input has {} channels but weight {weight} expects {}",
            input.c, weight.c
        )));
    }
    if stride == 0 {
        return Err(Error::config("conv2d: stride must be positive"));
    }
    let k = weight.h;
    let (ph, pw) = (input.h + 2 * pad, input.w + 2 * pad);
    if ph < k || pw < k {
        return Err(Error::config(format!(
            "conv2d: {k}x{k} kernel does not fit padded input {input}"
        )));
    }
    Ok(ConvGeometry {
        kernel: k,
        stride,
        pad,
        out_h: (ph - k) / stride + 1,
        out_w: (pw - k) / stride + 1,
    })
}

fn ensure_finite<T: Element>(t: &Tensor<T>, what: &str) -> Result<()> {
    if t.is_finite() {
        Ok(())
    } else {
        Err(Error::numeric(format!("{what}: non-finite value in input {}", t.shape())))
    }
}

fn im2col<T: Element>(x: &[T], c: usize, h: usize, w: usize, g: &ConvGeometry, col: &mut [T]) {
    let (k, s, p) = (g.kernel, g.stride, g.pad as isize);
    let area = g.out_h * g.out_w;
    for ci in 0..c {
        let plane = &x[ci * h * w..(ci + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                let dst = &mut col[row * area..(row + 1) * area];
                for oh in 0..g.out_h {
                    let ih = (oh * s + ki) as isize - p;
                    let seg = &mut dst[oh * g.out_w..(oh + 1) * g.out_w];
                    if ih < 0 || ih >= h as isize {
                        seg.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let src = &plane[ih as usize * w..(ih as usize + 1) * w];
                    for (ow, v) in seg.iter_mut().enumerate() {
                        let iw = (ow * s + kj) as isize - p;
                        *v = if iw < 0 || iw >= w as isize {
                            T::zero()
                        } else {
                            src[iw as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im<T: Element>(col: &[T], c: usize, h: usize, w: usize, g: &ConvGeometry, x: &mut [T]) {
    let (k, s, p) = (g.kernel, g.stride, g.pad as isize);
    let area = g.out_h * g.out_w;
    for ci in 0..c {
        let plane = &mut x[ci * h * w..(ci + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                let src = &col[row * area..(row + 1) * area];
                for oh in 0..g.out_h {
                    let ih = (oh * s + ki) as isize - p;
                    if ih < 0 || ih >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[ih as usize * w..(ih as usize + 1) * w];
                    for ow in 0..g.out_w {
                        let iw = (ow * s + kj) as isize - p;
                        if iw >= 0 && iw < w as isize {
                            dst[iw as usize] = dst[iw as usize] + src[oh * g.out_w + ow];
                        }
                    }
                }
            }
        }
    }
}

fn check_bias<T: Element>(bias: &Tensor<T>, channels: usize, op: &str) -> Result<()> {
    if bias.numel() != channels {
        return Err(Error::config(format!(
            "{op}: bias has {} elements, expected {channels}",
            bias.numel()
        )));
    }
    Ok(())
}

/// Zero-padded 2-D cross-correlation.
///
/// `weight` is `(C_out, C_in, k, k)` and `bias` holds `C_out` values.
pub fn conv2d<T: Element>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    let xs = input.shape();
    let ws = weight.shape();
    let g = conv_geometry(xs, ws, stride, pad)?;
    check_bias(bias, ws.n, "conv2d")?;
    ensure_finite(input, "conv2d")?;

    let ckk = ws.c * g.kernel * g.kernel;
    let area = g.out_h * g.out_w;
    let mut out = Tensor::zeros(Shape::new(xs.n, ws.n, g.out_h, g.out_w));
    let mut col = if g.is_pointwise() { Vec::new() } else { vec![T::zero(); ckk * area] };
    let in_len = xs.c * xs.plane();
    let out_len = ws.n * area;
    for n in 0..xs.n {
        let x_n = &input.data()[n * in_len..(n + 1) * in_len];
        let b_mat: &[T] = if g.is_pointwise() {
            x_n
        } else {
            im2col(x_n, xs.c, xs.h, xs.w, &g, &mut col);
            &col
        };
        let out_n = &mut out.data_mut()[n * out_len..(n + 1) * out_len];
        for (co, plane) in out_n.chunks_mut(area).enumerate() {
            let b = bias.data()[co];
            plane.iter_mut().for_each(|v| *v = b);
        }
        T::gemm(
            ws.n,
            ckk,
            area,
            T::one(),
            weight.data(),
            (ckk as isize, 1),
            b_mat,
            (area as isize, 1),
            T::one(),
            out_n,
            (area as isize, 1),
        );
    }
    Ok(out)
}

/// Gradients of [`conv2d`]; `None` entries were not requested.
pub struct ConvGrads<T: Element> {
    pub input: Option<Tensor<T>>,
    pub weight: Option<Tensor<T>>,
    pub bias: Option<Tensor<T>>,
}

pub fn conv2d_backward<T: Element>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    stride: usize,
    pad: usize,
    grad_out: &Tensor<T>,
    need: [bool; 3],
) -> Result<ConvGrads<T>> {
    let xs = input.shape();
    let ws = weight.shape();
    let g = conv_geometry(xs, ws, stride, pad)?;
    let ckk = ws.c * g.kernel * g.kernel;
    let area = g.out_h * g.out_w;
    let in_len = xs.c * xs.plane();
    let out_len = ws.n * area;

    let mut dx = need[0].then(|| Tensor::zeros(xs));
    let mut dw = need[1].then(|| Tensor::zeros(ws));
    let mut db = need[2].then(|| Tensor::zeros(Shape::new(ws.n, 1, 1, 1)));
    let mut col = if g.is_pointwise() { Vec::new() } else { vec![T::zero(); ckk * area] };
    let mut dcol = if g.is_pointwise() || dx.is_none() {
        Vec::new()
    } else {
        vec![T::zero(); ckk * area]
    };

    for n in 0..xs.n {
        let dy_n = &grad_out.data()[n * out_len..(n + 1) * out_len];
        if let Some(db) = db.as_mut() {
            for (co, plane) in dy_n.chunks(area).enumerate() {
                let s: T = plane.iter().copied().sum();
                db.data_mut()[co] = db.data()[co] + s;
            }
        }
        if let Some(dw) = dw.as_mut() {
            let x_n = &input.data()[n * in_len..(n + 1) * in_len];
            let b_mat: &[T] = if g.is_pointwise() {
                x_n
            } else {
                im2col(x_n, xs.c, xs.h, xs.w, &g, &mut col);
                &col
            };
            // dW += dY * col^T
            T::gemm(
                ws.n,
                area,
                ckk,
                T::one(),
                dy_n,
                (area as isize, 1),
                b_mat,
                (1, area as isize),
                T::one(),
                dw.data_mut(),
                (ckk as isize, 1),
            );
        }
        if let Some(dx) = dx.as_mut() {
            let dx_n = &mut dx.data_mut()[n * in_len..(n + 1) * in_len];
            // dcol = W^T * dY
            let target: &mut [T] = if g.is_pointwise() { dx_n } else { &mut dcol };
            T::gemm(
                ckk,
                ws.n,
                area,
                T::one(),
                weight.data(),
                (1, ckk as isize),
                dy_n,
                (area as isize, 1),
                T::zero(),
                target,
                (area as isize, 1),
            );
            if !g.is_pointwise() {
                col2im(&dcol, xs.c, xs.h, xs.w, &g, dx_n);
            }
        }
    }
    Ok(ConvGrads {
        input: dx,
        weight: dw,
        bias: db,
    })
}

fn depthwise_check(xs: Shape, ws: Shape) -> Result<usize> {
    if ws.n != xs.c || ws.c != 1 {
        return Err(Error::config(format!(
            "depthwise_conv2d: weight {ws} does not match {} input channels",
            xs.c
        )));
    }
    if ws.h != ws.w || ws.h % 2 == 0 {
        return Err(Error::config(format!("depthwise_conv2d: kernel {ws} must be square and odd")));
    }
    Ok(ws.h)
}

/// Per-channel convolution, stride 1, size-preserving zero padding.
pub fn depthwise_conv2d<T: Element>(input: &Tensor<T>, weight: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    let xs = input.shape();
    let k = depthwise_check(xs, weight.shape())?;
    check_bias(bias, xs.c, "depthwise_conv2d")?;
    ensure_finite(input, "depthwise_conv2d")?;
    let r = (k / 2) as isize;
    let (h, w) = (xs.h as isize, xs.w as isize);
    let mut out = Tensor::zeros(xs);
    for n in 0..xs.n {
        for c in 0..xs.c {
            let base = xs.offset(n, c, 0, 0);
            let x = &input.data()[base..base + xs.plane()];
            let kern = &weight.data()[c * k * k..(c + 1) * k * k];
            let b = bias.data()[c];
            let y = &mut out.data_mut()[base..base + xs.plane()];
            for oh in 0..h {
                for ow in 0..w {
                    let mut acc = b;
                    for ki in 0..k as isize {
                        let ih = oh + ki - r;
                        if ih < 0 || ih >= h {
                            continue;
                        }
                        for kj in 0..k as isize {
                            let iw = ow + kj - r;
                            if iw < 0 || iw >= w {
                                continue;
                            }
                            acc = acc + kern[(ki * k as isize + kj) as usize] * x[(ih * w + iw) as usize];
                        }
                    }
                    y[(oh * w + ow) as usize] = acc;
                }
            }
        }
    }
    Ok(out)
}

pub fn depthwise_conv2d_backward<T: Element>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
    need: [bool; 3],
) -> Result<ConvGrads<T>> {
    let xs = input.shape();
    let ws = weight.shape();
    let k = depthwise_check(xs, ws)?;
    let r = (k / 2) as isize;
    let (h, w) = (xs.h as isize, xs.w as isize);
    let mut dx = need[0].then(|| Tensor::zeros(xs));
    let mut dw = need[1].then(|| Tensor::zeros(ws));
    let mut db = need[2].then(|| Tensor::zeros(Shape::new(xs.c, 1, 1, 1)));
    for n in 0..xs.n {
        for c in 0..xs.c {
            let base = xs.offset(n, c, 0, 0);
            let x = &input.data()[base..base + xs.plane()];
            let dy = &grad_out.data()[base..base + xs.plane()];
            let kern = &weight.data()[c * k * k..(c + 1) * k * k];
            if let Some(db) = db.as_mut() {
                let s: T = dy.iter().copied().sum();
                db.data_mut()[c] = db.data()[c] + s;
            }
            for oh in 0..h {
                for ow in 0..w {
                    let g = dy[(oh * w + ow) as usize];
                    for ki in 0..k as isize {
                        let ih = oh + ki - r;
                        if ih < 0 || ih >= h {
                            continue;
                        }
                        for kj in 0..k as isize {
                            let iw = ow + kj - r;
                            if iw < 0 || iw >= w {
                                continue;
                            }
                            let ki_kj = (ki * k as isize + kj) as usize;
                            let xi = (ih * w + iw) as usize;
                            if let Some(dw) = dw.as_mut() {
                                let d = &mut dw.data_mut()[c * k * k + ki_kj];
                                *d = *d + g * x[xi];
                            }
                            if let Some(dx) = dx.as_mut() {
                                let d = &mut dx.data_mut()[base + xi];
                                *d = *d + g * kern[ki_kj];
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(ConvGrads {
        input: dx,
        weight: dw,
        bias: db,
    })
}

pub fn relu<T: Element>(input: &Tensor<T>) -> Tensor<T> {
    input.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// Passes the gradient where the input was strictly positive.
pub fn relu_backward<T: Element>(input: &Tensor<T>, grad_out: &Tensor<T>) -> Tensor<T> {
    let data = input
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&x, &g)| if x > T::zero() { g } else { T::zero() })
        .collect();
    Tensor::new(input.shape(), data).expect("same shape")
}

/// Rearranges `(N, C*r*r, H, W)` into `(N, C, H*r, W*r)`.
pub fn pixel_shuffle<T: Element>(input: &Tensor<T>, r: usize) -> Result<Tensor<T>> {
    let s = input.shape();
    if r == 0 || s.c % (r * r) != 0 {
        return Err(Error::config(format!(
            "pixel_shuffle: {} channels not divisible by r^2 = {}",
            s.c,
            r * r
        )));
    }
    let out_shape = Shape::new(s.n, s.c / (r * r), s.h * r, s.w * r);
    let mut out = Tensor::zeros(out_shape);
    for n in 0..s.n {
        for c in 0..out_shape.c {
            for i in 0..r {
                for j in 0..r {
                    let src_c = c * r * r + i * r + j;
                    for h in 0..s.h {
                        for w in 0..s.w {
                            let v = input.at(n, src_c, h, w);
                            out.set(n, c, h * r + i, w * r + j, v);
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Inverse of [`pixel_shuffle`].
pub fn pixel_unshuffle<T: Element>(input: &Tensor<T>, r: usize) -> Result<Tensor<T>> {
    let s = input.shape();
    if r == 0 || s.h % r != 0 || s.w % r != 0 {
        return Err(Error::config(format!(
            "pixel_unshuffle: spatial size {}x{} not divisible by {r}",
            s.h, s.w
        )));
    }
    let out_shape = Shape::new(s.n, s.c * r * r, s.h / r, s.w / r);
    let mut out = Tensor::zeros(out_shape);
    for n in 0..s.n {
        for c in 0..s.c {
            for i in 0..r {
                for j in 0..r {
                    let dst_c = c * r * r + i * r + j;
                    for h in 0..out_shape.h {
                        for w in 0..out_shape.w {
                            out.set(n, dst_c, h, w, input.at(n, c, h * r + i, w * r + j));
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Channel-wise concatenation in list order.
pub fn concat_channels<T: Element>(inputs: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = inputs
        .first()
        .ok_or_else(|| Error::config("concat_channels: empty input list"))?
        .shape();
    let mut channels = 0;
    for t in inputs {
        let s = t.shape();
        if (s.n, s.h, s.w) != (first.n, first.h, first.w) {
            return Err(Error::config(format!("concat_channels: {s} does not match {first}")));
        }
        channels += s.c;
    }
    let plane = first.plane();
    let mut data = Vec::with_capacity(first.n * channels * plane);
    for n in 0..first.n {
        for t in inputs {
            let len = t.shape().c * plane;
            data.extend_from_slice(&t.data()[n * len..(n + 1) * len]);
        }
    }
    Tensor::new(Shape::new(first.n, channels, first.h, first.w), data)
}

/// Channels `[start, start + len)` of `input`.
pub fn slice_channels<T: Element>(input: &Tensor<T>, start: usize, len: usize) -> Result<Tensor<T>> {
    let s = input.shape();
    if len == 0 || start + len > s.c {
        return Err(Error::config(format!(
            "slice_channels: [{start}, {}) out of range for {s}",
            start + len
        )));
    }
    let plane = s.plane();
    let mut data = Vec::with_capacity(s.n * len * plane);
    for n in 0..s.n {
        let base = (n * s.c + start) * plane;
        data.extend_from_slice(&input.data()[base..base + len * plane]);
    }
    Tensor::new(Shape::new(s.n, len, s.h, s.w), data)
}

fn same_shape<T: Element>(a: &Tensor<T>, b: &Tensor<T>, op: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::config(format!("{op}: shape {} vs {}", a.shape(), b.shape())));
    }
    Ok(())
}

/// `a + alpha * b`.
pub fn add_scaled<T: Element>(a: &Tensor<T>, b: &Tensor<T>, alpha: T) -> Result<Tensor<T>> {
    same_shape(a, b, "add_scaled")?;
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x + alpha * y).collect();
    Tensor::new(a.shape(), data)
}

pub fn mul<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    same_shape(a, b, "mul")?;
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x * y).collect();
    Tensor::new(a.shape(), data)
}

pub fn sum<T: Element>(a: &Tensor<T>) -> Tensor<T> {
    Tensor::scalar(a.data().iter().copied().sum())
}

/// Adds a constant per channel, e.g. the dataset mean shift.
pub fn channel_shift<T: Element>(input: &Tensor<T>, shift: &[T]) -> Result<Tensor<T>> {
    let s = input.shape();
    if shift.len() != s.c {
        return Err(Error::config(format!(
            "channel_shift: {} offsets for {} channels",
            shift.len(),
            s.c
        )));
    }
    let mut out = input.clone();
    out.clear_grad();
    out.set_requires_grad(false);
    let plane = s.plane();
    for (i, chunk) in out.data_mut().chunks_mut(plane).enumerate() {
        let d = shift[i % s.c];
        chunk.iter_mut().for_each(|v| *v = *v + d);
    }
    Ok(out)
}

/// Mean absolute error as a scalar tensor.
pub fn l1_loss<T: Element>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<Tensor<T>> {
    same_shape(pred, target, "l1_loss")?;
    let total: T = pred.data().iter().zip(target.data()).map(|(&p, &t)| (p - t).abs()).sum();
    Ok(Tensor::scalar(total / T::from_usize(pred.numel()).expect("count")))
}

/// Gradient of [`l1_loss`] w.r.t. `pred`, scaled by the upstream gradient.
pub fn l1_loss_backward<T: Element>(pred: &Tensor<T>, target: &Tensor<T>, upstream: T) -> Tensor<T> {
    let scale = upstream / T::from_usize(pred.numel()).expect("count");
    let data = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(&p, &t)| {
            let d = p - t;
            if d > T::zero() {
                scale
            } else if d < T::zero() {
                -scale
            } else {
                T::zero()
            }
        })
        .collect();
    Tensor::new(pred.shape(), data).expect("same shape")
}
