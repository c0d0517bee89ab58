//! Dataset scoring on the luma channel and report formatting.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::eval::ensemble::{upscale, Upscaler};
use crate::eval::metrics::{psnr, rgb_to_y, ssim};
use crate::eval::resize::bicubic_resize;
use crate::imageio::{file_stem, list_pngs, quantize, read_png, to_levels};
use crate::tensor::{Shape, Tensor};
use crate::transform::{crop, modcrop, shave};

#[derive(Clone, Debug, PartialEq)]
pub struct ImageScore {
    pub name: String,
    pub psnr: f64,
    pub ssim: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub dataset: String,
    pub model_id: String,
    pub scale: usize,
    pub ensemble: bool,
    pub images: Vec<ImageScore>,
}

impl EvalReport {
    pub fn mean_psnr(&self) -> f64 {
        mean(self.images.iter().map(|s| s.psnr))
    }

    pub fn mean_ssim(&self) -> f64 {
        mean(self.images.iter().map(|s| s.ssim))
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("dataset,model,scale,ensemble,image,psnr,ssim\n");
        let head = format!("{},{},{},{}", self.dataset, self.model_id, self.scale, self.ensemble);
        for s in &self.images {
            let _ = writeln!(out, "{head},{},{:.4},{:.6}", s.name, s.psnr, s.ssim);
        }
        let _ = writeln!(out, "{head},mean,{:.4},{:.6}", self.mean_psnr(), self.mean_ssim());
        out
    }

    pub fn to_table(&self) -> String {
        let width = self.images.iter().map(|s| s.name.len()).max().unwrap_or(4).max(4);
        let mut out = format!(
            "{} x{} {}{}\n",
            self.dataset,
            self.scale,
            self.model_id,
            if self.ensemble { "+" } else { "" }
        );
        let _ = writeln!(out, "{:<width$}  {:>9}  {:>7}", "image", "PSNR (dB)", "SSIM");
        for s in &self.images {
            let _ = writeln!(out, "{:<width$}  {:>9.2}  {:>7.4}", s.name, s.psnr, s.ssim);
        }
        let _ = writeln!(out, "{:<width$}  {:>9.2}  {:>7.4}", "mean", self.mean_psnr(), self.mean_ssim());
        out
    }
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        sum / n as f64
    }
}

/// Bicubic `1/scale` downscale of `hr`, snapped to 8-bit levels.
pub fn degrade(hr: &Tensor<f32>, scale: usize) -> Result<Tensor<f32>> {
    Ok(quantize(&bicubic_resize(hr, 1.0 / scale as f64)?))
}

/// Luma PSNR and SSIM of an 8-bit-quantized `sr` against `hr`, with `scale`
/// pixels shaved from each border.
pub fn score(sr: &Tensor<f32>, hr: &Tensor<f32>, scale: usize) -> Result<(f64, f64)> {
    if sr.shape() != hr.shape() {
        return Err(Error::config(format!("output {} does not match reference {}", sr.shape(), hr.shape())));
    }
    let ys = rgb_to_y(&to_levels(sr))?;
    let yh = rgb_to_y(&to_levels(hr))?;
    let p = psnr(&ys, &yh, scale)?;
    let s = ssim(&shave(&ys, scale)?, &shave(&yh, scale)?)?;
    Ok((p, s))
}

/// Scores one HR image: crop to a multiple of the scale, degrade, upscale.
pub fn evaluate_image(up: &dyn Upscaler, name: &str, hr: &Tensor<f32>, ensemble: bool) -> Result<ImageScore> {
    let scale = up.scale();
    let hr = modcrop(hr, scale)?;
    let lr = degrade(&hr, scale)?;
    let sr = upscale(up, &lr, ensemble)?;
    let (psnr, ssim) = score(&sr, &hr, scale)?;
    Ok(ImageScore {
        name: name.to_string(),
        psnr,
        ssim,
    })
}

/// HR images of a benchmark directory; an `HR` subdirectory is preferred.
pub fn dataset_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let hr = dir.join("HR");
    let files = list_pngs(if hr.is_dir() { &hr } else { dir })?;
    if files.is_empty() {
        return Err(Error::data(format!("no PNG images in {}", dir.display())));
    }
    Ok(files)
}

pub fn evaluate_file(up: &dyn Upscaler, path: &Path, ensemble: bool) -> Result<ImageScore> {
    evaluate_image(up, &file_stem(path), &read_png(path)?, ensemble)
}

/// Sequential evaluation of every image under `dir`.
pub fn evaluate_dataset(
    up: &dyn Upscaler,
    dir: &Path,
    dataset: &str,
    model_id: &str,
    ensemble: bool,
) -> Result<EvalReport> {
    let images = dataset_files(dir)?
        .iter()
        .map(|p| evaluate_file(up, p, ensemble))
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalReport {
        dataset: dataset.to_string(),
        model_id: model_id.to_string(),
        scale: up.scale(),
        ensemble,
        images,
    })
}

/// Same-position crops of several images placed left to right with a white
/// two-pixel gap.
pub fn side_by_side(images: &[&Tensor<f32>], y: usize, x: usize, size: usize) -> Result<Tensor<f32>> {
    const GAP: usize = 2;
    let crops = images
        .iter()
        .map(|im| crop(im, y, x, size, size))
        .collect::<Result<Vec<_>>>()?;
    let n = crops.len();
    let width = n * size + n.saturating_sub(1) * GAP;
    Ok(Tensor::from_fn(Shape::new(1, 3, size, width), |_, c, h, w| {
        let (k, off) = (w / (size + GAP), w % (size + GAP));
        if off < size {
            crops[k].at(0, c, h, off)
        } else {
            1.0
        }
    }))
}

/// Bicubic, model output and ground truth around the centre of `hr`.
pub fn comparison_strip(up: &dyn Upscaler, hr: &Tensor<f32>, ensemble: bool, size: usize) -> Result<Tensor<f32>> {
    let scale = up.scale();
    let hr = modcrop(hr, scale)?;
    let lr = degrade(&hr, scale)?;
    let base = quantize(&bicubic_resize(&lr, scale as f64)?);
    let sr = quantize(&upscale(up, &lr, ensemble)?);
    let s = hr.shape();
    let size = size.min(s.h).min(s.w);
    side_by_side(&[&base, &sr, &hr], (s.h - size) / 2, (s.w - size) / 2, size)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::ensemble::Bicubic;

    fn image(h: usize, w: usize) -> Tensor<f32> {
        Tensor::from_fn(Shape::new(1, 3, h, w), |_, c, y, x| {
            (0.5 + 0.4 * ((y as f32 * 0.3 + c as f32).sin() * (x as f32 * 0.2).cos())).clamp(0.0, 1.0)
        })
    }

    #[test]
    fn score_identical_and_bicubic() {
        let hr = image(40, 44);
        let (p, s) = score(&hr, &hr, 4).unwrap();
        assert_eq!(p, 99.0);
        assert!((s - 1.0).abs() < 1e-12);
        let r = evaluate_image(&Bicubic { scale: 4 }, "x", &image(42, 45), false).unwrap();
        assert!(r.psnr > 20.0 && r.psnr < 99.0, "{}", r.psnr);
        assert!(r.ssim > 0.5 && r.ssim < 1.0);
    }

    #[test]
    fn report_means_and_csv() {
        let r = EvalReport {
            dataset: "d".into(),
            model_id: "m".into(),
            scale: 4,
            ensemble: false,
            images: vec![
                ImageScore {
                    name: "a".into(),
                    psnr: 30.0,
                    ssim: 0.8,
                },
                ImageScore {
                    name: "b".into(),
                    psnr: 32.0,
                    ssim: 0.9,
                },
            ],
        };
        assert_eq!(r.mean_psnr(), 31.0);
        assert!((r.mean_ssim() - 0.85).abs() < 1e-12);
        assert_eq!(r.to_csv().lines().count(), 4);
        assert!(r.to_table().contains("31.00"));
    }

    #[test]
    fn strip_layout() {
        let a = Tensor::full(Shape::new(1, 3, 8, 8), 0.25f32);
        let b = Tensor::full(Shape::new(1, 3, 8, 8), 0.5f32);
        let s = side_by_side(&[&a, &b], 1, 1, 4).unwrap();
        assert_eq!(s.shape(), Shape::new(1, 3, 4, 10));
        assert_eq!(s.at(0, 0, 0, 3), 0.25);
        assert_eq!(s.at(0, 0, 0, 4), 1.0);
        assert_eq!(s.at(0, 0, 0, 6), 0.5);
    }
}
