//! PNG input and output for `(1, 3, H, W)` tensors holding values in `[0, 1]`.

use std::fs;
use std::path::{Path, PathBuf};

use image::{ImageBuffer, Rgb, RgbImage};

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

pub fn read_png(path: &Path) -> Result<Tensor<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let img = image::load_from_memory(&bytes)
        .map_err(|e| Error::data(format!("cannot decode {}: {e}", path.display())))?
        .to_rgb8();
    Ok(from_rgb8(&img))
}

pub fn from_rgb8(img: &RgbImage) -> Tensor<f32> {
    let (w, h) = img.dimensions();
    Tensor::from_fn(Shape::new(1, 3, h as usize, w as usize), |_, c, y, x| {
        f32::from(img.get_pixel(x as u32, y as u32)[c]) / 255.0
    })
}

/// Rounds to the nearest 8-bit level after clamping to `[0, 1]`.
pub fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn to_rgb8(t: &Tensor<f32>) -> Result<RgbImage> {
    let s = t.shape();
    if s.n != 1 || s.c != 3 {
        return Err(Error::config(format!("expected a (1, 3, H, W) image, got {s}")));
    }
    Ok(ImageBuffer::from_fn(s.w as u32, s.h as u32, |x, y| {
        Rgb([0, 1, 2].map(|c| to_u8(t.at(0, c, y as usize, x as usize))))
    }))
}

/// Snaps every value onto the 8-bit grid, still on a `[0, 1]` scale.
pub fn quantize(t: &Tensor<f32>) -> Tensor<f32> {
    t.map(|v| f32::from(to_u8(v)) / 255.0)
}

/// 8-bit levels as `f64` values in `[0, 255]`.
pub fn to_levels(t: &Tensor<f32>) -> Tensor<f64> {
    t.cast::<f64>().map(|v| f64::from(to_u8(v as f32)))
}

pub fn write_png(path: &Path, t: &Tensor<f32>) -> Result<()> {
    let img = to_rgb8(t)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| Error::data(format!("cannot write {}: {e}", path.display())))
}

/// PNG files directly inside `dir`, sorted by name.
pub fn list_pngs(dir: &Path) -> Result<Vec<PathBuf>> {
    if !dir.is_dir() {
        return Err(Error::data(format!("dataset directory {} does not exist", dir.display())));
    }
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut files = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let is_png = path
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| e.eq_ignore_ascii_case("png"));
        if is_png && path.is_file() {
            files.push(path);
        }
    }
    files.sort();
    Ok(files)
}

pub fn file_stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}
