//! Image- and feature-space transformations used to build reference depths.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::maps::{DepthMap, ValidMask};
use crate::resample;
use crate::rng;
use crate::scalar::Scalar;
use crate::tensor::{Shape, Tensor};

/// Default image noise, as a fraction of the `[0, 1]` intensity range.
pub const DEFAULT_IMAGE_NOISE_STD: f64 = 0.02;
/// Default feature noise, relative to the per-tensor standard deviation.
pub const DEFAULT_FEATURE_NOISE_SCALE: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Space {
    Image,
    Feature,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub enum Augmentation {
    #[default]
    HFlip,
    Gray,
    /// Additive Gaussian noise with absolute standard deviation `std`.
    Noise { std: f64, seed: u64 },
    Rotate { degrees: f64 },
    FeatHFlip,
    /// Additive Gaussian noise with standard deviation `scale` times the
    /// standard deviation of the tensor it is applied to.
    FeatNoise { scale: f64, seed: u64 },
}

impl Augmentation {
    pub fn space(&self) -> Space {
        match self {
            Augmentation::FeatHFlip | Augmentation::FeatNoise { .. } => Space::Feature,
            _ => Space::Image,
        }
    }

    pub fn is_geometric(&self) -> bool {
        matches!(
            self,
            Augmentation::HFlip | Augmentation::Rotate { .. } | Augmentation::FeatHFlip
        )
    }

    /// Applies the transformation to `t`.
    pub fn apply<T: Scalar>(&self, t: &Tensor<T>) -> Result<Tensor<T>> {
        self.apply_stream(t, 0)
    }

    /// Like [`Augmentation::apply`], drawing noise from stream `stream` of the
    /// seed so several tensors can be perturbed independently.
    pub fn apply_stream<T: Scalar>(&self, t: &Tensor<T>, stream: u64) -> Result<Tensor<T>> {
        let c = t.shape().c;
        if self.space() == Space::Image && c != 1 && c != 3 {
            return Err(Error::invalid(format!(
                "image augmentation `{self}` needs 1 or 3 channels, got {}",
                t.shape()
            )));
        }
        Ok(match *self {
            Augmentation::HFlip | Augmentation::FeatHFlip => t.hflip(),
            Augmentation::Gray => gray(t)?,
            Augmentation::Noise { std, seed } => add_noise(t, std, rng::derive_seed(seed, stream)),
            Augmentation::FeatNoise { scale, seed } => {
                add_noise(t, scale * t.std_f64(), rng::derive_seed(seed, stream))
            }
            Augmentation::Rotate { degrees } => resample::rotate(t, degrees, None).0,
        })
    }

    /// The geometric part of the transformation applied to a depth map;
    /// photometric transformations leave depth unchanged.
    pub fn apply_to_depth<T: Scalar>(&self, d: &DepthMap<T>) -> DepthMap<T> {
        let t = d.tensor();
        let out = match *self {
            Augmentation::HFlip | Augmentation::FeatHFlip => t.hflip(),
            Augmentation::Rotate { degrees } => resample::rotate(t, degrees, None).0,
            _ => t.clone(),
        };
        DepthMap::new(out).expect("depth shape preserved")
    }

    /// Maps a depth predicted in the transformed frame back to the original frame.
    pub fn invert<T: Scalar>(&self, d: &DepthMap<T>) -> (DepthMap<T>, ValidMask) {
        let (h, w) = d.hw();
        match *self {
            Augmentation::HFlip | Augmentation::FeatHFlip => (
                DepthMap::new(d.tensor().hflip()).expect("depth shape preserved"),
                ValidMask::all_true(h, w),
            ),
            Augmentation::Rotate { degrees } => {
                // Pixels of the transformed frame whose own source was out of frame.
                let ones = Tensor::<T>::ones(Shape::new(1, 1, h, w));
                let (_, forward_valid) = resample::rotate(&ones, degrees, None);
                let (back, mask) = resample::rotate(d.tensor(), -degrees, Some(&forward_valid));
                (DepthMap::new(back).expect("depth shape preserved"), mask)
            }
            _ => (d.clone(), ValidMask::all_true(h, w)),
        }
    }
}

fn gray<T: Scalar>(t: &Tensor<T>) -> Result<Tensor<T>> {
    let s = t.shape();
    if s.c != 3 {
        return Err(Error::invalid(format!(
            "gray augmentation needs 3 channels, got {s}"
        )));
    }
    let mut data = Vec::with_capacity(s.numel());
    for n in 0..s.n {
        let (r, g, b) = (t.plane(n, 0), t.plane(n, 1), t.plane(n, 2));
        let luma: Vec<T> = (0..s.plane())
            .map(|i| {
                T::narrow(0.299 * r[i].widen() + 0.587 * g[i].widen() + 0.114 * b[i].widen())
            })
            .collect();
        for _ in 0..3 {
            data.extend_from_slice(&luma);
        }
    }
    Tensor::new(s, data)
}

fn add_noise<T: Scalar>(t: &Tensor<T>, std: f64, seed: u64) -> Tensor<T> {
    if std == 0.0 {
        return t.clone();
    }
    let mut r = rng::seeded(seed);
    let data = t
        .data()
        .iter()
        .map(|&v| T::narrow(v.widen() + std * rng::normal(&mut r)))
        .collect();
    Tensor::new(t.shape(), data).expect("same shape")
}

impl fmt::Display for Augmentation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Augmentation::HFlip => write!(f, "hflip"),
            Augmentation::Gray => write!(f, "gray"),
            Augmentation::Noise { std, seed } => write!(f, "noise:{std}:{seed}"),
            Augmentation::Rotate { degrees } => write!(f, "rot:{degrees}"),
            Augmentation::FeatHFlip => write!(f, "feat-hflip"),
            Augmentation::FeatNoise { scale, seed } => write!(f, "feat-noise:{scale}:{seed}"),
        }
    }
}

impl FromStr for Augmentation {
    type Err = Error;

    /// `hflip | gray | noise:<std>:<seed> | rot:<deg> | feat-hflip | feat-noise:<std>:<seed>`
    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.trim().split(':').collect();
        let float = |v: &str| -> Result<f64> {
            let x: f64 = v.parse().map_err(|_| Error::parse(s, format!("`{v}` is not a number")))?;
            if !x.is_finite() {
                return Err(Error::parse(s, "value must be finite"));
            }
            Ok(x)
        };
        let int = |v: &str| -> Result<u64> {
            v.parse()
                .map_err(|_| Error::parse(s, format!("`{v}` is not an unsigned integer")))
        };
        let std = |v: &str| -> Result<f64> {
            let x = float(v)?;
            if x < 0.0 {
                return Err(Error::parse(s, "noise level must be non-negative"));
            }
            Ok(x)
        };
        match parts.as_slice() {
            ["hflip"] => Ok(Augmentation::HFlip),
            ["gray"] => Ok(Augmentation::Gray),
            ["noise"] => Ok(Augmentation::Noise {
                std: DEFAULT_IMAGE_NOISE_STD,
                seed: 0,
            }),
            ["noise", v, seed] => Ok(Augmentation::Noise {
                std: std(v)?,
                seed: int(seed)?,
            }),
            ["rot", deg] => Ok(Augmentation::Rotate { degrees: float(deg)? }),
            ["feat-hflip"] => Ok(Augmentation::FeatHFlip),
            ["feat-noise"] => Ok(Augmentation::FeatNoise {
                scale: DEFAULT_FEATURE_NOISE_SCALE,
                seed: 0,
            }),
            ["feat-noise", v, seed] => Ok(Augmentation::FeatNoise {
                scale: std(v)?,
                seed: int(seed)?,
            }),
            _ => Err(Error::parse(s, "unknown augmentation")),
        }
    }
}
