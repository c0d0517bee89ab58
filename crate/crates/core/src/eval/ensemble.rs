//! Single-pass and eightfold self-ensemble upscaling.

use crate::error::{Error, Result};
use crate::eval::resize::bicubic_resize;
use crate::model::Model;
use crate::tensor::{Element, Tensor};
use crate::transform::{dihedral, dihedral_inverse, DIHEDRAL_CODES};

/// Anything that maps a `(1, 3, h, w)` image to `(1, 3, s*h, s*w)`.
pub trait Upscaler: Sync {
    fn scale(&self) -> usize;
    fn upscale(&self, lr: &Tensor<f32>) -> Result<Tensor<f32>>;
}

impl<T: Element> Upscaler for Model<T> {
    fn scale(&self) -> usize {
        Model::scale(self)
    }

    fn upscale(&self, lr: &Tensor<f32>) -> Result<Tensor<f32>> {
        Ok(self.infer(&lr.cast::<T>())?.cast::<f32>())
    }
}

/// Plain bicubic interpolation.
#[derive(Clone, Copy, Debug)]
pub struct Bicubic {
    pub scale: usize,
}

impl Upscaler for Bicubic {
    fn scale(&self) -> usize {
        self.scale
    }

    fn upscale(&self, lr: &Tensor<f32>) -> Result<Tensor<f32>> {
        bicubic_resize(lr, self.scale as f64)
    }
}

fn add(a: &Tensor<f32>, b: &Tensor<f32>) -> Tensor<f32> {
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
    Tensor::new(a.shape(), data).expect("same shape")
}

/// Averages the outputs over all eight dihedral transforms of the input.
///
/// Outputs are summed pairwise so an equivariant upscaler gives exactly its
/// single-pass result.
pub fn self_ensemble(up: &dyn Upscaler, lr: &Tensor<f32>) -> Result<Tensor<f32>> {
    let mut outs = (0..DIHEDRAL_CODES)
        .map(|code| Ok(dihedral_inverse(&up.upscale(&dihedral(lr, code))?, code)))
        .collect::<Result<Vec<_>>>()?;
    if outs.windows(2).any(|w| w[0].shape() != w[1].shape()) {
        return Err(Error::config("upscaler output shape depends on orientation"));
    }
    while outs.len() > 1 {
        outs = outs.chunks(2).map(|p| add(&p[0], &p[1])).collect();
    }
    let n = f32::from(DIHEDRAL_CODES);
    Ok(outs[0].map(|v| v / n))
}

pub fn upscale(up: &dyn Upscaler, lr: &Tensor<f32>, ensemble: bool) -> Result<Tensor<f32>> {
    if ensemble {
        self_ensemble(up, lr)
    } else {
        up.upscale(lr)
    }
}
