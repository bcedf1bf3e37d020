//! Post-hoc comparison methods: flip residual, augmentation variance,
//! inference-time dropout and the predicted variance itself.

use rayon::prelude::*;

use crate::augment::Augmentation;
use crate::error::{Error, Result};
use crate::maps::{normalize_masked, DepthMap, UncertaintyMap, ValidMask};
use crate::model::{Dropout, ForwardOptions, Model};
use crate::scalar::Scalar;
use crate::tensor::{Shape, Tensor};
use crate::uncertainty::reference_for;

pub const DEFAULT_DROP_SAMPLES: usize = 8;
pub const DEFAULT_DROP_P: f64 = 0.2;
pub const DEFAULT_DROP_SEED: u64 = 1;

/// Augmentations of the variance baseline when none are given.
pub fn default_var_augs() -> Vec<Augmentation> {
    vec![
        Augmentation::HFlip,
        Augmentation::Gray,
        Augmentation::Rotate { degrees: 5.0 },
        Augmentation::Noise {
            std: crate::augment::DEFAULT_IMAGE_NOISE_STD,
            seed: 0,
        },
    ]
}

/// Normalised `|d̂ - flip⁻¹(f(flip(x)))|`.
pub fn post_uncertainty<T: Scalar>(model: &Model<T>, image: &Tensor<T>) -> Result<UncertaintyMap<T>> {
    let d = model.predict(image)?;
    let (r, mask) = reference_for(model, image, &Augmentation::HFlip)?;
    let residual = d.tensor().zip_map(r.tensor(), "post", |a, b| (a - b).abs())?;
    UncertaintyMap::new(normalize_masked(&residual, &mask), mask)
}

/// Population variance by Welford's single-pass update.
fn welford(values: impl Iterator<Item = f64>) -> f64 {
    let (mut n, mut mean, mut m2) = (0usize, 0.0f64, 0.0f64);
    for x in values {
        n += 1;
        let delta = x - mean;
        mean += delta / n as f64;
        m2 += delta * (x - mean);
    }
    if n == 0 {
        0.0
    } else {
        (m2 / n as f64).max(0.0)
    }
}

/// Population variance per pixel with Welford's update, over `samples` in the
/// given order.
pub fn pixelwise_variance<T: Scalar>(samples: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = samples
        .first()
        .ok_or_else(|| Error::invalid("variance of no samples"))?;
    let shape = first.shape();
    for s in samples {
        s.expect_shape(shape, "pixelwise variance")?;
    }
    let data = (0..shape.numel())
        .map(|i| T::narrow(welford(samples.iter().map(|s| s.data()[i].widen()))))
        .collect();
    Tensor::new(shape, data)
}

/// Variance over the prediction and the reference depths of every
/// augmentation, on pixels valid under all of them. Per pixel the values are
/// sorted before accumulation, so the result does not depend on the order of
/// `augs`.
pub fn var_uncertainty<T: Scalar>(
    model: &Model<T>,
    image: &Tensor<T>,
    augs: &[Augmentation],
) -> Result<UncertaintyMap<T>> {
    if augs.is_empty() {
        return Err(Error::invalid("variance baseline needs at least one augmentation"));
    }
    let d = model.predict(image)?;
    let (h, w) = d.hw();
    let mut depths: Vec<DepthMap<T>> = vec![d];
    let mut mask = ValidMask::all_true(h, w);
    for aug in augs {
        let (r, m) = reference_for(model, image, aug)?;
        mask = mask.and(&m)?;
        depths.push(r);
    }
    let var = Tensor::from_fn(Shape::new(1, 1, h, w), |_, _, y, x| {
        let mut v: Vec<T> = depths.iter().map(|d| d.tensor().at(0, 0, y, x)).collect();
        v.sort_by(|a, b| a.partial_cmp(b).expect("finite depth"));
        T::narrow(welford(v.iter().map(|x| x.widen())))
    });
    UncertaintyMap::new(normalize_masked(&var, &mask), mask)
}

/// The `n` dropout depth samples; sample `j` uses seed `seed + j`.
pub fn dropout_samples<T: Scalar>(
    model: &Model<T>,
    image: &Tensor<T>,
    n: usize,
    p: f64,
    seed: u64,
) -> Result<Vec<DepthMap<T>>> {
    (0..n as u64)
        .into_par_iter()
        .map(|j| {
            let opts = ForwardOptions {
                trace: false,
                dropout: Some(Dropout {
                    p,
                    seed: seed.wrapping_add(j),
                }),
            };
            Ok(model.forward(image, opts)?.depth)
        })
        .collect()
}

/// Normalised variance over `n` forwards with inference-time dropout on every
/// decoder activation.
pub fn dropstar_uncertainty<T: Scalar>(
    model: &Model<T>,
    image: &Tensor<T>,
    n: usize,
    p: f64,
    seed: u64,
) -> Result<UncertaintyMap<T>> {
    if n < 2 {
        return Err(Error::invalid(format!("dropout baseline needs n ≥ 2 samples, got {n}")));
    }
    let samples = dropout_samples(model, image, n, p, seed)?;
    let refs: Vec<&Tensor<T>> = samples.iter().map(|d| d.tensor()).collect();
    let var = pixelwise_variance(&refs)?;
    let (h, w) = samples[0].hw();
    let mask = ValidMask::all_true(h, w);
    UncertaintyMap::new(normalize_masked(&var, &mask), mask)
}

/// The predicted variance, normalised.
pub fn sigma_uncertainty<T: Scalar>(sigma_sq: Option<&Tensor<T>>) -> Result<UncertaintyMap<T>> {
    let s = sigma_sq.ok_or_else(|| {
        Error::invalid("the sigma baseline needs a predictive model with a variance head")
    })?;
    let sh = s.shape();
    let mask = ValidMask::all_true(sh.h, sh.w);
    UncertaintyMap::new(normalize_masked(s, &mask), mask)
}
