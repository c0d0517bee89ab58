//! Luma extraction, PSNR and SSIM on a `[0, 255]` scale.

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};
use crate::transform::shave;

/// PSNR reported for identical inputs.
pub const PSNR_IDENTICAL: f64 = 99.0;

/// Studio-swing BT.601 luma of `(N, 3, H, W)` RGB levels.
pub fn rgb_to_y(img: &Tensor<f64>) -> Result<Tensor<f64>> {
    let s = img.shape();
    if s.c != 3 {
        return Err(Error::config(format!("rgb_to_y needs 3 channels, got {s}")));
    }
    Ok(Tensor::from_fn(Shape::new(s.n, 1, s.h, s.w), |n, _, h, w| {
        16.0 + (65.738 * img.at(n, 0, h, w) + 129.057 * img.at(n, 1, h, w) + 25.064 * img.at(n, 2, h, w)) / 256.0
    }))
}

/// `10 log10(255^2 / MSE)` after removing `border` pixels on each side.
pub fn psnr(a: &Tensor<f64>, b: &Tensor<f64>, border: usize) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::config(format!("psnr: shapes {} and {} differ", a.shape(), b.shape())));
    }
    let (a, b) = if border > 0 {
        (shave(a, border)?, shave(b, border)?)
    } else {
        (a.clone(), b.clone())
    };
    let sse: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum();
    if sse == 0.0 {
        return Ok(PSNR_IDENTICAL);
    }
    let mse = sse / a.numel() as f64;
    Ok(10.0 * (255.0 * 255.0 / mse).log10())
}

pub const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const C1: f64 = (0.01 * 255.0) * (0.01 * 255.0);
const C2: f64 = (0.03 * 255.0) * (0.03 * 255.0);

/// Normalized 1-D Gaussian taps; the 2-D window is their outer product.
pub fn gaussian_taps() -> [f64; SSIM_WINDOW] {
    let mut g = [0.0; SSIM_WINDOW];
    let r = (SSIM_WINDOW / 2) as f64;
    for (i, v) in g.iter_mut().enumerate() {
        let d = i as f64 - r;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = g.iter().sum();
    g.map(|v| v / s)
}

/// Valid-mode separable filtering of an `h x w` plane.
fn filter_valid(plane: &[f64], h: usize, w: usize, g: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let k = SSIM_WINDOW;
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut rows = vec![0.0; oh * w];
    for y in 0..oh {
        for x in 0..w {
            rows[y * w + x] = (0..k).map(|i| g[i] * plane[(y + i) * w + x]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..k).map(|j| g[j] * rows[y * w + x + j]).sum();
        }
    }
    out
}

/// Mean SSIM over every valid 11x11 Gaussian window of a single plane.
pub fn ssim(a: &Tensor<f64>, b: &Tensor<f64>) -> Result<f64> {
    let s = a.shape();
    if s != b.shape() {
        return Err(Error::config(format!("ssim: shapes {s} and {} differ", b.shape())));
    }
    if s.n != 1 || s.c != 1 {
        return Err(Error::config(format!("ssim needs a single plane, got {s}")));
    }
    if s.h < SSIM_WINDOW || s.w < SSIM_WINDOW {
        return Err(Error::config(format!("ssim: image {s} is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")));
    }
    let g = gaussian_taps();
    let (x, y) = (a.data(), b.data());
    let prod = |f: &dyn Fn(usize) -> f64| -> Vec<f64> { (0..x.len()).map(f).collect() };
    let mu1 = filter_valid(x, s.h, s.w, &g);
    let mu2 = filter_valid(y, s.h, s.w, &g);
    let xx = filter_valid(&prod(&|i| x[i] * x[i]), s.h, s.w, &g);
    let yy = filter_valid(&prod(&|i| y[i] * y[i]), s.h, s.w, &g);
    let xy = filter_valid(&prod(&|i| x[i] * y[i]), s.h, s.w, &g);
    let mut total = 0.0;
    for i in 0..mu1.len() {
        let (m1, m2) = (mu1[i], mu2[i]);
        let s1 = xx[i] - m1 * m1;
        let s2 = yy[i] - m2 * m2;
        let s12 = xy[i] - m1 * m2;
        total += ((2.0 * m1 * m2 + C1) * (2.0 * s12 + C2)) / ((m1 * m1 + m2 * m2 + C1) * (s1 + s2 + C2));
    }
    Ok(total / mu1.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_plane(h: usize, w: usize, seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(Shape::new(1, 1, h, w), |_, _, _, _| rng.random_range(0..256) as f64)
    }

    fn naive_ssim(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
        let s = a.shape();
        let g = gaussian_taps();
        let mut total = 0.0;
        let mut count = 0;
        for y in 0..=s.h - 11 {
            for x in 0..=s.w - 11 {
                let (mut m1, mut m2, mut v1, mut v2, mut cv) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for i in 0..11 {
                    for j in 0..11 {
                        let wgt = g[i] * g[j];
                        let p = a.at(0, 0, y + i, x + j);
                        let q = b.at(0, 0, y + i, x + j);
                        m1 += wgt * p;
                        m2 += wgt * q;
                    }
                }
                for i in 0..11 {
                    for j in 0..11 {
                        let wgt = g[i] * g[j];
                        let p = a.at(0, 0, y + i, x + j) - m1;
                        let q = b.at(0, 0, y + i, x + j) - m2;
                        v1 += wgt * p * p;
                        v2 += wgt * q * q;
                        cv += wgt * p * q;
                    }
                }
                total += ((2.0 * m1 * m2 + C1) * (2.0 * cv + C2)) / ((m1 * m1 + m2 * m2 + C1) * (v1 + v2 + C2));
                count += 1;
            }
        }
        total / count as f64
    }

    #[test]
    fn luma_reference_points() {
        let px = |v: f64| Tensor::full(Shape::new(1, 3, 1, 1), v);
        assert!((rgb_to_y(&px(255.0)).unwrap().item().unwrap() - 235.0).abs() < 0.01);
        assert!((rgb_to_y(&px(0.0)).unwrap().item().unwrap() - 16.0).abs() < 1e-12);
        let gray = rgb_to_y(&px(128.0)).unwrap().item().unwrap();
        assert!((gray - (16.0 + 219.859 * 128.0 / 256.0)).abs() < 1e-9);
        assert!(rgb_to_y(&Tensor::<f64>::zeros(Shape::new(1, 1, 2, 2))).is_err());
    }

    #[test]
    fn psnr_reference_points() {
        let a = random_plane(20, 20, 1);
        assert_eq!(psnr(&a, &a, 4).unwrap(), PSNR_IDENTICAL);
        let b = a.map(|v| v + 1.0);
        assert!((psnr(&a, &b, 0).unwrap() - 48.1308).abs() < 0.01);
        assert!(psnr(&a, &b, 10).is_err());
        assert!(psnr(&a, &random_plane(20, 21, 1), 0).is_err());
    }

    #[test]
    fn psnr_matches_two_pass_oracle() {
        let a = random_plane(30, 25, 2);
        let b = random_plane(30, 25, 3);
        let mut sum = 0.0;
        let mut n = 0.0;
        for y in 3..27 {
            for x in 3..22 {
                let d = a.at(0, 0, y, x) - b.at(0, 0, y, x);
                sum += d * d;
                n += 1.0;
            }
        }
        let mse = sum / n;
        let oracle = 20.0 * 255f64.log10() - 10.0 * mse.log10();
        assert!((psnr(&a, &b, 3).unwrap() - oracle).abs() < 1e-9);
    }

    #[test]
    fn ssim_basics() {
        let a = random_plane(24, 30, 4);
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        let inv = a.map(|v| 255.0 - v);
        assert!(ssim(&a, &inv).unwrap() < 1.0);
        let b = random_plane(24, 30, 5);
        let s = ssim(&a, &b).unwrap();
        assert!((s - naive_ssim(&a, &b)).abs() < 1e-6);
        assert_eq!(s, ssim(&b, &a).unwrap());
        assert!(ssim(&random_plane(10, 30, 1), &random_plane(10, 30, 1)).is_err());
    }

    proptest! {
        #[test]
        fn ssim_matches_windowed_oracle(seed in 0u64..500, h in 11usize..18, w in 11usize..18, noise in 0.0f64..60.0) {
            let a = random_plane(h, w, seed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
            let b = Tensor::new(a.shape(), a.data().iter().map(|v| (v + rng.random_range(-noise..=noise)).clamp(0.0, 255.0)).collect()).unwrap();
            let s = ssim(&a, &b).unwrap();
            prop_assert!((s - naive_ssim(&a, &b)).abs() < 1e-6);
            prop_assert!((-1.0..=1.0 + 1e-12).contains(&s));
        }

        #[test]
        fn psnr_symmetric_and_monotone(seed in 0u64..500, amp in 1.0f64..40.0) {
            let a = random_plane(16, 16, seed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
            let dir = Tensor::from_fn(a.shape(), |_, _, _, _| if rng.random_bool(0.5) { 1.0 } else { -1.0 });
            let noisy = |k: f64| Tensor::new(a.shape(), a.data().iter().zip(dir.data()).map(|(v, d)| v + k * d).collect()).unwrap();
            let (b, c) = (noisy(amp), noisy(amp * 1.5));
            prop_assert_eq!(psnr(&a, &b, 2).unwrap(), psnr(&b, &a, 2).unwrap());
            prop_assert!(psnr(&a, &c, 2).unwrap() < psnr(&a, &b, 2).unwrap());
        }

        #[test]
        fn luma_range(r in 0.0f64..=255.0, g in 0.0f64..=255.0, b in 0.0f64..=255.0) {
            let t = Tensor::from_fn(Shape::new(1, 3, 1, 1), |_, c, _, _| [r, g, b][c]);
            let y = rgb_to_y(&t).unwrap().item().unwrap();
            prop_assert!((16.0 - 1e-9..=235.0 + 0.01).contains(&y));
        }
    }
}
