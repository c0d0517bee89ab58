//! Dihedral transforms and crops on NCHW tensors.
//!
//! A dihedral code packs three flags: bit 0 flips horizontally, bit 1 flips
//! vertically, bit 2 transposes. They are applied in that order.

use crate::error::{Error, Result};
use crate::tensor::{Element, Shape, Tensor};

pub const DIHEDRAL_CODES: u8 = 8;

fn hflip<T: Element>(t: &Tensor<T>) -> Tensor<T> {
    let s = t.shape();
    Tensor::from_fn(s, |n, c, h, w| t.at(n, c, h, s.w - 1 - w))
}

fn vflip<T: Element>(t: &Tensor<T>) -> Tensor<T> {
    let s = t.shape();
    Tensor::from_fn(s, |n, c, h, w| t.at(n, c, s.h - 1 - h, w))
}

fn transpose<T: Element>(t: &Tensor<T>) -> Tensor<T> {
    let s = t.shape();
    Tensor::from_fn(Shape::new(s.n, s.c, s.w, s.h), |n, c, h, w| t.at(n, c, w, h))
}

pub fn dihedral<T: Element>(t: &Tensor<T>, code: u8) -> Tensor<T> {
    let mut out = t.clone();
    if code & 1 != 0 {
        out = hflip(&out);
    }
    if code & 2 != 0 {
        out = vflip(&out);
    }
    if code & 4 != 0 {
        out = transpose(&out);
    }
    out
}

pub fn dihedral_inverse<T: Element>(t: &Tensor<T>, code: u8) -> Tensor<T> {
    let mut out = t.clone();
    if code & 4 != 0 {
        out = transpose(&out);
    }
    if code & 2 != 0 {
        out = vflip(&out);
    }
    if code & 1 != 0 {
        out = hflip(&out);
    }
    out
}

/// Spatial window `[y, y + h) x [x, x + w)` of every image and channel.
pub fn crop<T: Element>(t: &Tensor<T>, y: usize, x: usize, h: usize, w: usize) -> Result<Tensor<T>> {
    let s = t.shape();
    if h == 0 || w == 0 || y + h > s.h || x + w > s.w {
        return Err(Error::config(format!("crop {h}x{w} at ({y}, {x}) is outside {s}")));
    }
    Ok(Tensor::from_fn(Shape::new(s.n, s.c, h, w), |n, c, i, j| t.at(n, c, y + i, x + j)))
}

/// Drops trailing rows and columns so both sides are multiples of `scale`.
pub fn modcrop<T: Element>(t: &Tensor<T>, scale: usize) -> Result<Tensor<T>> {
    let s = t.shape();
    crop(t, 0, 0, s.h - s.h % scale, s.w - s.w % scale)
}

/// Removes `border` pixels from every side.
pub fn shave<T: Element>(t: &Tensor<T>, border: usize) -> Result<Tensor<T>> {
    let s = t.shape();
    if 2 * border >= s.h || 2 * border >= s.w {
        return Err(Error::config(format!("shaving {border} pixels leaves nothing of {s}")));
    }
    crop(t, border, border, s.h - 2 * border, s.w - 2 * border)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ramp(h: usize, w: usize) -> Tensor<f64> {
        Tensor::from_fn(Shape::new(2, 2, h, w), |n, c, y, x| (n * 1000 + c * 100 + y * 10 + x) as f64)
    }

    #[test]
    fn code_zero_is_identity_and_transpose_swaps_sides() {
        let t = ramp(3, 5);
        assert_eq!(dihedral(&t, 0), t);
        let tt = dihedral(&t, 4);
        assert_eq!(tt.shape(), Shape::new(2, 2, 5, 3));
        assert_eq!(tt.at(1, 1, 4, 2), t.at(1, 1, 2, 4));
        assert_eq!(dihedral(&t, 1).at(0, 0, 0, 0), t.at(0, 0, 0, 4));
        assert_eq!(dihedral(&t, 2).at(0, 0, 0, 0), t.at(0, 0, 2, 0));
    }

    #[test]
    fn all_eight_codes_are_distinct() {
        let t = ramp(4, 4);
        for a in 0..DIHEDRAL_CODES {
            for b in 0..a {
                assert_ne!(dihedral(&t, a), dihedral(&t, b), "{a} {b}");
            }
        }
    }

    #[test]
    fn crops() {
        let t = ramp(7, 9);
        let c = crop(&t, 2, 3, 2, 4).unwrap();
        assert_eq!(c.at(1, 0, 1, 3), t.at(1, 0, 3, 6));
        assert_eq!(modcrop(&t, 4).unwrap().shape(), Shape::new(2, 2, 4, 8));
        assert_eq!(shave(&t, 2).unwrap().shape(), Shape::new(2, 2, 3, 5));
        assert!(shave(&t, 4).is_err());
        assert!(crop(&t, 6, 0, 2, 1).is_err());
    }

    proptest! {
        #[test]
        fn inverse_undoes_forward(h in 1usize..6, w in 1usize..6, code in 0u8..8) {
            let t = ramp(h, w);
            prop_assert_eq!(dihedral_inverse(&dihedral(&t, code), code), t);
        }
    }
}
