//! Single-channel rasters: depth, validity and uncertainty.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Shape, Tensor};

/// Metric depth in metres, stored as a `1×1×h×w` tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthMap<T: Scalar = f32>(Tensor<T>);

impl<T: Scalar> DepthMap<T> {
    pub fn new(t: Tensor<T>) -> Result<Self> {
        let s = t.shape();
        if s.n != 1 || s.c != 1 {
            return Err(Error::invalid(format!("depth map must be 1×1×h×w, got {s}")));
        }
        Ok(DepthMap(t))
    }

    pub fn height(&self) -> usize {
        self.0.shape().h
    }

    pub fn width(&self) -> usize {
        self.0.shape().w
    }

    pub fn hw(&self) -> (usize, usize) {
        (self.height(), self.width())
    }

    pub fn tensor(&self) -> &Tensor<T> {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor<T> {
        self.0
    }

    pub fn values(&self) -> &[T] {
        self.0.data()
    }
}

/// Per-pixel validity flags.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ValidMask {
    h: usize,
    w: usize,
    bits: Vec<bool>,
}

impl ValidMask {
    pub fn all_true(h: usize, w: usize) -> Self {
        ValidMask {
            h,
            w,
            bits: vec![true; h * w],
        }
    }

    pub fn from_bits(h: usize, w: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != h * w {
            return Err(Error::invalid(format!(
                "mask of {h}x{w} given {} flags",
                bits.len()
            )));
        }
        Ok(ValidMask { h, w, bits })
    }

    pub fn hw(&self) -> (usize, usize) {
        (self.h, self.w)
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> bool {
        self.bits[y * self.w + x]
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn fraction(&self) -> f64 {
        if self.bits.is_empty() {
            return 0.0;
        }
        self.count() as f64 / self.bits.len() as f64
    }

    pub fn is_all_true(&self) -> bool {
        self.bits.iter().all(|&b| b)
    }

    pub fn and(&self, other: &ValidMask) -> Result<ValidMask> {
        if self.hw() != other.hw() {
            return Err(Error::invalid(format!(
                "mask sizes differ: {:?} vs {:?}",
                self.hw(),
                other.hw()
            )));
        }
        Ok(ValidMask {
            h: self.h,
            w: self.w,
            bits: self.bits.iter().zip(&other.bits).map(|(a, b)| *a && *b).collect(),
        })
    }

    pub fn hflip(&self) -> ValidMask {
        let mut bits = Vec::with_capacity(self.bits.len());
        for row in self.bits.chunks_exact(self.w.max(1)) {
            bits.extend(row.iter().rev());
        }
        ValidMask {
            h: self.h,
            w: self.w,
            bits,
        }
    }

    /// 1.0 for valid pixels and 0.0 elsewhere, as a `1×1×h×w` tensor.
    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        Tensor::new(
            Shape::new(1, 1, self.h, self.w),
            self.bits
                .iter()
                .map(|&b| if b { T::one() } else { T::zero() })
                .collect(),
        )
        .expect("mask dimensions")
    }

    pub fn from_tensor<T: Scalar>(t: &Tensor<T>) -> Result<ValidMask> {
        let s = t.shape();
        if s.n != 1 || s.c != 1 {
            return Err(Error::invalid(format!("mask tensor must be 1×1×h×w, got {s}")));
        }
        Ok(ValidMask {
            h: s.h,
            w: s.w,
            bits: t.data().iter().map(|&v| v > T::zero()).collect(),
        })
    }
}

/// Pixel-wise uncertainty in `[0, 1]`; invalid pixels hold 0.
#[derive(Clone, Debug, PartialEq)]
pub struct UncertaintyMap<T: Scalar = f32> {
    values: Tensor<T>,
    mask: ValidMask,
}

impl<T: Scalar> UncertaintyMap<T> {
    pub fn new(values: Tensor<T>, mask: ValidMask) -> Result<Self> {
        let s = values.shape();
        if s.n != 1 || s.c != 1 || (s.h, s.w) != mask.hw() {
            return Err(Error::invalid(format!(
                "uncertainty values {s} do not match mask {:?}",
                mask.hw()
            )));
        }
        let data = values
            .data()
            .iter()
            .zip(mask.bits())
            .map(|(&v, &ok)| if ok { v } else { T::zero() })
            .collect();
        Ok(UncertaintyMap {
            values: Tensor::new(s, data)?,
            mask,
        })
    }

    pub fn zeros(h: usize, w: usize) -> Self {
        UncertaintyMap {
            values: Tensor::zeros(Shape::new(1, 1, h, w)),
            mask: ValidMask::all_true(h, w),
        }
    }

    pub fn values(&self) -> &Tensor<T> {
        &self.values
    }

    pub fn mask(&self) -> &ValidMask {
        &self.mask
    }

    pub fn hw(&self) -> (usize, usize) {
        self.mask.hw()
    }

    pub fn is_all_zero(&self) -> bool {
        self.values.data().iter().all(|&v| v == T::zero())
    }
}

/// Min-max normalisation to `[0, 1]` over valid pixels; a constant input maps
/// to all zeros. Invalid pixels are set to 0.
pub fn normalize_masked<T: Scalar>(t: &Tensor<T>, mask: &ValidMask) -> Tensor<T> {
    let valid = || {
        t.data()
            .iter()
            .zip(mask.bits())
            .filter(|(_, &ok)| ok)
            .map(|(&v, _)| v)
    };
    let lo = valid().fold(T::infinity(), T::min);
    let hi = valid().fold(T::neg_infinity(), T::max);
    let range = hi - lo;
    let degenerate = !(range > T::zero()) || !range.is_finite();
    let data = t
        .data()
        .iter()
        .zip(mask.bits())
        .map(|(&v, &ok)| {
            if !ok || degenerate {
                T::zero()
            } else {
                (v - lo) / range
            }
        })
        .collect();
    Tensor::new(t.shape(), data).expect("same shape")
}

/// Min-max normalisation over every element.
pub fn normalize<T: Scalar>(t: &Tensor<T>) -> Tensor<T> {
    let s = t.shape();
    normalize_masked(t, &ValidMask::all_true(1, s.numel()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalize_stage_arithmetic() {
        let t = Tensor::<f32>::from_plane(1, 3, vec![0.0, 2.0, 4.0]).unwrap();
        assert_eq!(normalize(&t).data(), &[0.0, 0.5, 1.0]);
    }

    #[test]
    fn constant_input_normalizes_to_zero() {
        let t = Tensor::<f32>::full(Shape::new(1, 1, 2, 2), 3.0);
        assert!(normalize(&t).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn masked_normalization_ignores_invalid_pixels() {
        let t = Tensor::<f32>::from_plane(1, 4, vec![1.0, 3.0, 100.0, 2.0]).unwrap();
        let m = ValidMask::from_bits(1, 4, vec![true, true, false, true]).unwrap();
        assert_eq!(normalize_masked(&t, &m).data(), &[0.0, 1.0, 0.0, 0.5]);
    }

    #[test]
    fn uncertainty_map_zeroes_invalid_pixels() {
        let t = Tensor::<f32>::from_plane(1, 2, vec![0.4, 0.9]).unwrap();
        let m = ValidMask::from_bits(1, 2, vec![true, false]).unwrap();
        let u = UncertaintyMap::new(t, m).unwrap();
        assert_eq!(u.values().data(), &[0.4, 0.0]);
    }
}
