//! Training images and aligned random patch pairs.

use std::path::Path;

use log::warn;
use rand::Rng;

use crate::error::{Error, Result};
use crate::eval::bench::degrade;
use crate::imageio::{file_stem, list_pngs, read_png};
use crate::tensor::Tensor;
use crate::transform::{crop, dihedral, modcrop, DIHEDRAL_CODES};

#[derive(Clone, Debug)]
pub struct TrainImage {
    pub name: String,
    pub lr: Tensor<f32>,
    pub hr: Tensor<f32>,
}

#[derive(Clone, Debug)]
pub struct TrainingSet {
    pub scale: usize,
    pub images: Vec<TrainImage>,
}

/// An aligned LR/HR crop pair; offsets are LR pixel coordinates.
#[derive(Clone, Debug)]
pub struct SamplePair {
    pub lr_patch: Tensor<f32>,
    pub hr_patch: Tensor<f32>,
    pub source: usize,
    pub offset: (usize, usize),
    pub augmentation: u8,
}

impl TrainingSet {
    /// Keeps images whose LR side is at least `patch`, warning about the rest.
    pub fn new(images: Vec<TrainImage>, scale: usize, patch: usize) -> Result<Self> {
        let mut kept = Vec::with_capacity(images.len());
        for img in images {
            let (ls, hs) = (img.lr.shape(), img.hr.shape());
            if hs.h != ls.h * scale || hs.w != ls.w * scale {
                return Err(Error::data(format!(
                    "{}: HR {hs} is not x{scale} of LR {ls}",
                    img.name
                )));
            }
            if ls.h < patch || ls.w < patch {
                warn!("skipping {}: LR size {}x{} is smaller than the {patch} patch", img.name, ls.w, ls.h);
                continue;
            }
            kept.push(img);
        }
        if kept.is_empty() {
            return Err(Error::data("training dataset is empty"));
        }
        Ok(TrainingSet { scale, images: kept })
    }

    /// Loads every PNG under `hr_dir`. LR inputs come from `lr_dir` as
    /// `<name>x<scale>.png` when given, else from bicubic downscaling.
    pub fn load(hr_dir: &Path, lr_dir: Option<&Path>, scale: usize, patch: usize) -> Result<Self> {
        let files = list_pngs(hr_dir)?;
        let mut images = Vec::with_capacity(files.len());
        for path in &files {
            let name = file_stem(path);
            let hr = modcrop(&read_png(path)?, scale)?;
            let lr = match lr_dir {
                Some(dir) => read_png(&dir.join(format!("{name}x{scale}.png")))?,
                None => degrade(&hr, scale)?,
            };
            images.push(TrainImage { name, lr, hr });
        }
        Self::new(images, scale, patch)
    }
}

/// Uniform aligned crop of side `patch` (LR) with a random dihedral transform.
pub fn sample_patch(
    lr: &Tensor<f32>,
    hr: &Tensor<f32>,
    source: usize,
    patch: usize,
    scale: usize,
    augment: bool,
    rng: &mut impl Rng,
) -> Result<SamplePair> {
    let (ls, hs) = (lr.shape(), hr.shape());
    if hs.h != ls.h * scale || hs.w != ls.w * scale {
        return Err(Error::config(format!("HR {hs} is not x{scale} of LR {ls}")));
    }
    if patch == 0 || ls.h < patch || ls.w < patch {
        return Err(Error::data(format!("LR image {ls} is smaller than the {patch} patch")));
    }
    let x = rng.random_range(0..=ls.w - patch);
    let y = rng.random_range(0..=ls.h - patch);
    let code = if augment { rng.random_range(0..DIHEDRAL_CODES) } else { 0 };
    let lr_patch = crop(lr, y, x, patch, patch)?;
    let hr_patch = crop(hr, y * scale, x * scale, patch * scale, patch * scale)?;
    Ok(SamplePair {
        lr_patch: dihedral(&lr_patch, code),
        hr_patch: dihedral(&hr_patch, code),
        source,
        offset: (x, y),
        augmentation: code,
    })
}

/// Stacks `batch` patches drawn from uniformly chosen images.
pub fn sample_batch(
    set: &TrainingSet,
    batch: usize,
    patch: usize,
    augment: bool,
    rng: &mut impl Rng,
) -> Result<(Tensor<f32>, Tensor<f32>)> {
    let mut lrs = Vec::with_capacity(batch);
    let mut hrs = Vec::with_capacity(batch);
    for _ in 0..batch {
        let i = rng.random_range(0..set.images.len());
        let img = &set.images[i];
        let pair = sample_patch(&img.lr, &img.hr, i, patch, set.scale, augment, rng)?;
        lrs.push(pair.lr_patch);
        hrs.push(pair.hr_patch);
    }
    Ok((Tensor::stack(&lrs)?, Tensor::stack(&hrs)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn pair(lh: usize, lw: usize, scale: usize) -> (Tensor<f32>, Tensor<f32>) {
        let hr = Tensor::from_fn(Shape::new(1, 3, lh * scale, lw * scale), |_, c, y, x| {
            (c * 100_000 + y * 1000 + x) as f32
        });
        let lr = Tensor::from_fn(Shape::new(1, 3, lh, lw), |_, c, y, x| (c * 100_000 + y * scale * 1000 + x * scale) as f32);
        (lr, hr)
    }

    #[test]
    fn offsets_align_and_degenerate_crop() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (lr, hr) = pair(10, 12, 4);
        for _ in 0..50 {
            let s = sample_patch(&lr, &hr, 0, 5, 4, false, &mut rng).unwrap();
            let (x, y) = s.offset;
            assert_eq!(s.augmentation, 0);
            assert_eq!(s.lr_patch.at(0, 1, 0, 0), lr.at(0, 1, y, x));
            assert_eq!(s.hr_patch.at(0, 1, 0, 0), hr.at(0, 1, 4 * y, 4 * x));
            assert_eq!(s.hr_patch.shape(), Shape::new(1, 3, 20, 20));
        }
        let (lr, hr) = pair(6, 6, 2);
        let s = sample_patch(&lr, &hr, 0, 6, 2, true, &mut rng).unwrap();
        assert_eq!(s.offset, (0, 0));
    }

    #[test]
    fn augmentation_hits_both_patches() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (lr, hr) = pair(8, 8, 2);
        let mut seen = [false; 8];
        for _ in 0..200 {
            let s = sample_patch(&lr, &hr, 0, 4, 2, true, &mut rng).unwrap();
            seen[s.augmentation as usize] = true;
            let (x, y) = s.offset;
            let raw_lr = crop(&lr, y, x, 4, 4).unwrap();
            let raw_hr = crop(&hr, 2 * y, 2 * x, 8, 8).unwrap();
            assert_eq!(s.lr_patch, dihedral(&raw_lr, s.augmentation));
            assert_eq!(s.hr_patch, dihedral(&raw_hr, s.augmentation));
        }
        assert!(seen.iter().all(|&s| s));
    }

    #[test]
    fn offsets_are_uniform() {
        // 25 possible offsets, 24 degrees of freedom, 1% critical value 42.98
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (lr, hr) = pair(52, 52, 1);
        let mut counts = [0usize; 25];
        for _ in 0..1000 {
            let (x, y) = sample_patch(&lr, &hr, 0, 48, 1, true, &mut rng).unwrap().offset;
            counts[y * 5 + x] += 1;
        }
        let expected = 1000.0 / 25.0;
        let chi2: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
        assert!(chi2 < 42.98, "chi2 = {chi2}");
    }

    #[test]
    fn errors_and_skips() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (lr, hr) = pair(4, 4, 2);
        assert!(matches!(sample_patch(&lr, &hr, 0, 5, 2, false, &mut rng), Err(Error::Data(_))));
        assert!(matches!(sample_patch(&lr, &hr, 0, 2, 3, false, &mut rng), Err(Error::Config(_))));
        let small = TrainImage {
            name: "s".into(),
            lr: lr.clone(),
            hr: hr.clone(),
        };
        let (lr2, hr2) = pair(8, 8, 2);
        let big = TrainImage {
            name: "b".into(),
            lr: lr2,
            hr: hr2,
        };
        let set = TrainingSet::new(vec![small.clone(), big], 2, 6).unwrap();
        assert_eq!(set.images.len(), 1);
        assert!(matches!(TrainingSet::new(vec![small], 2, 6), Err(Error::Data(_))));
        let (b_lr, b_hr) = sample_batch(&set, 3, 6, true, &mut rng).unwrap();
        assert_eq!(b_lr.shape(), Shape::new(3, 3, 6, 6));
        assert_eq!(b_hr.shape(), Shape::new(3, 3, 12, 12));
    }
}
