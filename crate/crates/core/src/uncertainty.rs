//! Gradient-based uncertainty for a frozen depth model.
//!
//! A reference depth is predicted for a transformed input (or transformed
//! encoder features) and mapped back to the original frame. The squared
//! inconsistency with the model's own depth is back-propagated to selected
//! decoder activations; each gradient map is reduced over channels, resized to
//! the image and min-max normalised, and several layers can be fused.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use crate::augment::{Augmentation, Space};
use crate::error::{Error, Result};
use crate::maps::{normalize_masked, DepthMap, UncertaintyMap, ValidMask};
use crate::model::{ForwardOptions, Model, PredictionBundle, Trace};
use crate::resample::resize_bilinear;
use crate::scalar::Scalar;
use crate::tape::NodeId;
use crate::tensor::{Shape, Tensor};

pub const DEFAULT_LAMBDA: f64 = 2.0;
pub const DEFAULT_LAYER: usize = 6;
pub const DEFAULT_MULTI_LAYERS: [usize; 4] = [5, 6, 7, 8];

#[derive(Clone, Debug, PartialEq)]
pub enum LayerMode {
    /// One decoder layer, 1-based.
    Single(usize),
    Multi(Vec<usize>),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Fusion {
    #[default]
    Max,
    Mean,
    Var,
}

impl FromStr for Fusion {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "max" => Ok(Fusion::Max),
            "mean" => Ok(Fusion::Mean),
            "var" => Ok(Fusion::Var),
            _ => Err(Error::parse(s, "expected max, mean or var")),
        }
    }
}

impl fmt::Display for Fusion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Fusion::Max => "max",
            Fusion::Mean => "mean",
            Fusion::Var => "var",
        })
    }
}

/// How a gradient map is collapsed over channels.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum ChannelReduce {
    /// Largest magnitude.
    #[default]
    AbsMax,
    /// Largest signed value.
    SignedMax,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradConfig {
    pub aug: Augmentation,
    pub layer_mode: LayerMode,
    pub fusion: Fusion,
    /// Weight of the predicted variance in the loss; ignored for regular models.
    pub lambda: f64,
    pub channel_reduce: ChannelReduce,
}

impl Default for GradConfig {
    fn default() -> Self {
        GradConfig {
            aug: Augmentation::HFlip,
            layer_mode: LayerMode::Single(DEFAULT_LAYER),
            fusion: Fusion::Max,
            lambda: DEFAULT_LAMBDA,
            channel_reduce: ChannelReduce::AbsMax,
        }
    }
}

impl GradConfig {
    /// Single layer, image flip.
    pub fn ours() -> Self {
        Self::default()
    }

    /// Single layer, flip of the encoder features.
    pub fn ours_feat() -> Self {
        GradConfig {
            aug: Augmentation::FeatHFlip,
            ..Self::default()
        }
    }

    /// Last four decoder layers before the prediction layer, max-fused.
    pub fn ours_multi() -> Self {
        GradConfig {
            layer_mode: LayerMode::Multi(DEFAULT_MULTI_LAYERS.to_vec()),
            ..Self::default()
        }
    }

    pub fn layers(&self) -> Vec<usize> {
        match &self.layer_mode {
            LayerMode::Single(i) => vec![*i],
            LayerMode::Multi(k) => k.clone(),
        }
    }

    pub fn validate(&self, num_layers: usize) -> Result<()> {
        let layers = self.layers();
        if layers.is_empty() {
            return Err(Error::invalid("multi-layer set is empty"));
        }
        if let Some(&bad) = layers.iter().find(|&&i| i == 0 || i > num_layers) {
            return Err(Error::invalid(format!(
                "layer index {bad} is outside 1..={num_layers} (the model has {num_layers} decoder layers)"
            )));
        }
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(Error::invalid(format!("lambda must be non-negative, got {}", self.lambda)));
        }
        Ok(())
    }
}

fn layer_tag(i: usize) -> String {
    format!("dec{i}")
}

/// Reference depth from an image-space transformation.
pub fn reference_depth<T: Scalar>(
    model: &Model<T>,
    image: &Tensor<T>,
    aug: &Augmentation,
) -> Result<(DepthMap<T>, ValidMask)> {
    if aug.space() != Space::Image {
        return Err(Error::invalid(format!("`{aug}` is not an image-space augmentation")));
    }
    let d = model.predict(&aug.apply(image)?)?;
    Ok(aug.invert(&d))
}

/// Reference depth from transforming the encoder features, bottleneck and
/// skips alike, and decoding them.
pub fn reference_depth_feature<T: Scalar>(
    model: &Model<T>,
    image: &Tensor<T>,
    aug: &Augmentation,
) -> Result<(DepthMap<T>, ValidMask)> {
    if aug.space() != Space::Feature {
        return Err(Error::invalid(format!("`{aug}` is not a feature-space augmentation")));
    }
    let z = model.encode(image)?.try_map(|t, i| aug.apply_stream(t, i))?;
    let d = model.forward_from_features(&z, ForwardOptions::default())?.depth;
    Ok(aug.invert(&d))
}

/// Reference depth for either space.
pub fn reference_for<T: Scalar>(
    model: &Model<T>,
    image: &Tensor<T>,
    aug: &Augmentation,
) -> Result<(DepthMap<T>, ValidMask)> {
    match aug.space() {
        Space::Image => reference_depth(model, image, aug),
        Space::Feature => reference_depth_feature(model, image, aug),
    }
}

fn check_hw<T: Scalar>(t: &Tensor<T>, mask: &ValidMask, what: &'static str) -> Result<()> {
    let (h, w) = mask.hw();
    t.expect_shape(Shape::new(1, 1, h, w), what)
}

/// Per-pixel `(d̂ - d_ref)²` on valid pixels, 0 elsewhere.
pub fn aux_loss<T: Scalar>(d_hat: &DepthMap<T>, d_ref: &DepthMap<T>, mask: &ValidMask) -> Result<Tensor<T>> {
    check_hw(d_ref.tensor(), mask, "aux_loss")?;
    let sq = d_hat.tensor().zip_map(d_ref.tensor(), "aux_loss", |a, b| (a - b) * (a - b))?;
    sq.mul(&mask.to_tensor())
}

/// [`aux_loss`] plus `lambda·σ²` on valid pixels.
pub fn aux_loss_predictive<T: Scalar>(
    d_hat: &DepthMap<T>,
    d_ref: &DepthMap<T>,
    sigma_sq: Option<&Tensor<T>>,
    lambda: f64,
    mask: &ValidMask,
) -> Result<Tensor<T>> {
    let sigma_sq = sigma_sq.ok_or_else(|| Error::invalid("predictive loss needs a variance map"))?;
    check_hw(sigma_sq, mask, "aux_loss_predictive")?;
    let base = aux_loss(d_hat, d_ref, mask)?;
    let extra = sigma_sq.mul(&mask.to_tensor())?.scale(T::narrow(lambda));
    base.add(&extra)
}

/// Records the scalar auxiliary loss on the bundle's tape and returns its node.
/// The variance term is added when `lambda` is given and the model has a
/// variance head.
pub fn attach_aux_loss<T: Scalar>(
    trace: &mut Trace<T>,
    d_ref: &DepthMap<T>,
    mask: &ValidMask,
    lambda: Option<f64>,
) -> Result<NodeId> {
    check_hw(d_ref.tensor(), mask, "aux_loss")?;
    let tape = &mut trace.tape;
    let r = tape.leaf(d_ref.tensor().clone());
    let m = tape.leaf(mask.to_tensor());
    let diff = tape.sub(trace.depth, r)?;
    let sq = tape.square(diff)?;
    let mut per_pixel = tape.mul(sq, m)?;
    if let (Some(lambda), Some(s)) = (lambda, trace.sigma_sq) {
        let masked = tape.mul(s, m)?;
        let weighted = tape.mul_scalar(masked, T::narrow(lambda))?;
        per_pixel = tape.add(per_pixel, weighted)?;
    }
    tape.sum(per_pixel)
}

/// `∂loss/∂a_i` for every requested tag, each with its activation's shape.
pub fn extract_gradients<T: Scalar>(
    bundle: &PredictionBundle<T>,
    loss: NodeId,
    tags: &[String],
) -> Result<BTreeMap<String, Tensor<T>>> {
    let trace = bundle.trace.as_ref().ok_or(Error::NotTraced)?;
    for t in tags {
        if !bundle.activations.contains_key(t) {
            return Err(Error::UnknownTag(t.clone()));
        }
    }
    let grads = trace.tape.backward(loss)?;
    tags.iter()
        .map(|t| Ok((t.clone(), grads.tagged(t)?.clone())))
        .collect()
}

/// Collapses a `1×C×h×w` gradient map to `1×1×h×w`.
pub fn reduce_channels<T: Scalar>(g: &Tensor<T>, reduce: ChannelReduce) -> Result<Tensor<T>> {
    let s = g.shape();
    if s.n != 1 || s.c == 0 {
        return Err(Error::invalid(format!("gradient map must be 1×C×h×w with C ≥ 1, got {s}")));
    }
    Ok(Tensor::from_fn(Shape::new(1, 1, s.h, s.w), |_, _, y, x| {
        (0..s.c)
            .map(|c| {
                let v = g.at(0, c, y, x);
                match reduce {
                    ChannelReduce::AbsMax => v.abs(),
                    ChannelReduce::SignedMax => v,
                }
            })
            .fold(T::neg_infinity(), T::max)
    }))
}

/// Channel reduction, bilinear resize to the image size and min-max
/// normalisation over valid pixels.
pub fn layer_uncertainty<T: Scalar>(
    g: &Tensor<T>,
    mask: &ValidMask,
    reduce: ChannelReduce,
) -> Result<UncertaintyMap<T>> {
    let (h, w) = mask.hw();
    let reduced = reduce_channels(g, reduce)?;
    let resized = resize_bilinear(&reduced, h, w);
    UncertaintyMap::new(normalize_masked(&resized, mask), mask.clone())
}

/// Pointwise fusion of per-layer maps. Variance fusion is renormalised.
pub fn fuse_multi<T: Scalar>(maps: &[UncertaintyMap<T>], fusion: Fusion) -> Result<UncertaintyMap<T>> {
    let first = maps.first().ok_or_else(|| Error::invalid("no uncertainty maps to fuse"))?;
    let mut mask = first.mask().clone();
    for m in &maps[1..] {
        mask = mask.and(m.mask())?;
    }
    let (h, w) = mask.hw();
    let k = maps.len() as f64;
    let fused = Tensor::from_fn(Shape::new(1, 1, h, w), |_, _, y, x| {
        let vals = maps.iter().map(|m| m.values().at(0, 0, y, x));
        match fusion {
            Fusion::Max => vals.fold(T::neg_infinity(), T::max),
            Fusion::Mean => T::narrow(vals.map(|v| v.widen()).sum::<f64>() / k),
            Fusion::Var => {
                let v: Vec<f64> = vals.map(|v| v.widen()).collect();
                let mean = v.iter().sum::<f64>() / k;
                T::narrow(v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / k)
            }
        }
    });
    let fused = match fusion {
        Fusion::Var => normalize_masked(&fused, &mask),
        _ => fused,
    };
    UncertaintyMap::new(fused, mask)
}

/// Result of [`estimate`], with the per-layer maps that were fused.
#[derive(Clone, Debug)]
pub struct Estimate<T: Scalar = f32> {
    pub depth: DepthMap<T>,
    pub uncertainty: UncertaintyMap<T>,
    pub layer_maps: Vec<(usize, UncertaintyMap<T>)>,
    /// Value of the scalar auxiliary loss.
    pub loss: f64,
}

/// The full pipeline: predict, build the reference, back-propagate the
/// auxiliary loss and turn the gradients into a fused uncertainty map.
pub fn estimate<T: Scalar>(model: &Model<T>, image: &Tensor<T>, cfg: &GradConfig) -> Result<Estimate<T>> {
    cfg.validate(model.num_layers())?;
    let mut bundle = model.forward(image, ForwardOptions::traced())?;
    let (d_ref, mask) = reference_for(model, image, &cfg.aug)?;
    let lambda = model.config().predictive.then_some(cfg.lambda);
    let trace = bundle.trace.as_mut().ok_or(Error::NotTraced)?;
    let loss = attach_aux_loss(trace, &d_ref, &mask, lambda)?;
    let loss_value = trace.tape.value(loss)?.data()[0].widen();

    let layers = cfg.layers();
    let tags: Vec<String> = layers.iter().map(|&i| layer_tag(i)).collect();
    let grads = extract_gradients(&bundle, loss, &tags)?;
    let layer_maps = layers
        .iter()
        .zip(&tags)
        .map(|(&i, t)| Ok((i, layer_uncertainty(&grads[t], &mask, cfg.channel_reduce)?)))
        .collect::<Result<Vec<_>>>()?;
    let uncertainty = match cfg.layer_mode {
        LayerMode::Single(_) => layer_maps[0].1.clone(),
        LayerMode::Multi(_) => {
            let maps: Vec<_> = layer_maps.iter().map(|(_, m)| m.clone()).collect();
            fuse_multi(&maps, cfg.fusion)?
        }
    };
    Ok(Estimate {
        depth: bundle.depth,
        uncertainty,
        layer_maps,
        loss: loss_value,
    })
}
