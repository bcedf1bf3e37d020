//! Toy encoder-decoder depth network with tagged decoder activations.
//!
//! Encoder stage `s` (1-based) is `avgpool2(elu(conv3x3(x)))` with
//! `base·2^(s-1)` channels, so the bottleneck sits at `1/2^S` resolution. The
//! decoder starts with one convolution at the bottleneck, then for every level
//! upsamples 2×, concatenates the encoder skip of that level and convolves;
//! the remaining layers are refinement convolutions (one per intermediate
//! level, the rest at full resolution). Every decoder layer is
//! `elu(conv3x3(·))` and is tagged `dec<i>`. The depth head is
//! `d_min + sigmoid(conv3x3(·))·(d_max - d_min)`; predictive models add a
//! variance head `exp(clamp(conv3x3(·), -10, 10))`.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::maps::DepthMap;
use crate::rng;
use crate::scalar::Scalar;
use crate::tape::{NodeId, Tape};
use crate::tensor::{Shape, Tensor};

pub const LOG_VAR_CLAMP: f64 = 10.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub input_channels: usize,
    pub encoder_stages: usize,
    pub base_channels: usize,
    pub decoder_layers: usize,
    pub skip_connections: bool,
    pub predictive: bool,
    pub d_min: f64,
    pub d_max: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            input_channels: 3,
            encoder_stages: 3,
            base_channels: 8,
            decoder_layers: 9,
            skip_connections: true,
            predictive: false,
            d_min: 1.0,
            d_max: 10.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
struct DecoderLayer {
    upsample: bool,
    /// Encoder stage whose output is concatenated before the convolution.
    skip: Option<usize>,
    c_in: usize,
    c_out: usize,
}

impl ModelConfig {
    pub fn predictive() -> Self {
        ModelConfig {
            predictive: true,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_channels == 0 || self.base_channels == 0 || self.encoder_stages == 0 {
            return Err(Error::invalid(
                "input_channels, base_channels and encoder_stages must be positive",
            ));
        }
        if self.decoder_layers < 5 || self.decoder_layers < 1 + self.encoder_stages {
            return Err(Error::invalid(format!(
                "decoder_layers must be at least max(5, 1 + encoder_stages), got {}",
                self.decoder_layers
            )));
        }
        if !(self.d_min > 0.0 && self.d_max > self.d_min && self.d_max.is_finite()) {
            return Err(Error::invalid(format!(
                "depth range must satisfy 0 < d_min < d_max, got [{}, {}]",
                self.d_min, self.d_max
            )));
        }
        Ok(())
    }

    /// Image height and width must be multiples of this.
    pub fn spatial_divisor(&self) -> usize {
        1 << self.encoder_stages
    }

    pub fn encoder_channels(&self, stage: usize) -> usize {
        self.base_channels << (stage - 1)
    }

    fn decoder_channels(&self, level: usize) -> usize {
        if level == 0 {
            self.base_channels
        } else {
            self.base_channels << (level - 1)
        }
    }

    fn decoder_plan(&self) -> Vec<DecoderLayer> {
        let s = self.encoder_stages;
        let mut c = self.encoder_channels(s);
        let mut plan = vec![DecoderLayer {
            upsample: false,
            skip: None,
            c_in: c,
            c_out: self.decoder_channels(s),
        }];
        c = self.decoder_channels(s);
        let mut refinements = self.decoder_layers - 1 - s;
        for level in (0..s).rev() {
            let skip = (self.skip_connections && level >= 1).then_some(level);
            let extra = skip.map_or(0, |st| self.encoder_channels(st));
            let c_out = self.decoder_channels(level);
            plan.push(DecoderLayer {
                upsample: true,
                skip,
                c_in: c + extra,
                c_out,
            });
            c = c_out;
            let here = if level > 0 { refinements.min(1) } else { refinements };
            for _ in 0..here {
                plan.push(DecoderLayer {
                    upsample: false,
                    skip: None,
                    c_in: c,
                    c_out: c,
                });
            }
            refinements -= here;
        }
        plan
    }

    /// Tag names of the decoder layers, `dec1` through `dec<L>`.
    pub fn layer_tags(&self) -> Vec<String> {
        (1..=self.decoder_layers).map(|i| format!("dec{i}")).collect()
    }

    /// Every weight the architecture needs, with its shape, in build order.
    pub fn weight_specs(&self) -> Vec<(String, Shape)> {
        let mut specs = Vec::new();
        let mut conv = |name: String, c_out: usize, c_in: usize| {
            specs.push((format!("{name}.weight"), Shape::new(c_out, c_in, 3, 3)));
            specs.push((format!("{name}.bias"), Shape::new(1, c_out, 1, 1)));
        };
        let mut c = self.input_channels;
        for s in 1..=self.encoder_stages {
            conv(format!("enc{s}"), self.encoder_channels(s), c);
            c = self.encoder_channels(s);
        }
        for (i, layer) in self.decoder_plan().iter().enumerate() {
            conv(format!("dec{}", i + 1), layer.c_out, layer.c_in);
        }
        conv("head_depth".into(), 1, self.base_channels);
        if self.predictive {
            conv("head_sigma".into(), 1, self.base_channels);
        }
        specs
    }

    /// Shape of the bottleneck and skip tensors for an `h×w` input.
    pub fn feature_shapes(&self, h: usize, w: usize) -> (Shape, Vec<Shape>) {
        let s = self.encoder_stages;
        let at = |stage: usize| {
            Shape::new(1, self.encoder_channels(stage), h >> stage, w >> stage)
        };
        let skips = if self.skip_connections {
            (1..s).map(at).collect()
        } else {
            Vec::new()
        };
        (at(s), skips)
    }
}

/// Output of the encoder: the bottleneck plus the skip tensors of every
/// intermediate stage (stage 1 first).
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderFeatures<T: Scalar = f32> {
    pub bottleneck: Tensor<T>,
    pub skips: Vec<Tensor<T>>,
}

impl<T: Scalar> EncoderFeatures<T> {
    /// Applies `f(tensor, index)` to every tensor; the bottleneck has index 0.
    pub fn try_map(&self, mut f: impl FnMut(&Tensor<T>, u64) -> Result<Tensor<T>>) -> Result<Self> {
        Ok(EncoderFeatures {
            bottleneck: f(&self.bottleneck, 0)?,
            skips: self
                .skips
                .iter()
                .enumerate()
                .map(|(i, t)| f(t, i as u64 + 1))
                .collect::<Result<_>>()?,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Dropout {
    pub p: f64,
    pub seed: u64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ForwardOptions {
    pub trace: bool,
    /// Inference-time dropout on every decoder activation.
    pub dropout: Option<Dropout>,
}

impl ForwardOptions {
    pub fn traced() -> Self {
        ForwardOptions {
            trace: true,
            dropout: None,
        }
    }
}

/// The recorded graph of a traced forward pass.
#[derive(Clone, Debug)]
pub struct Trace<T: Scalar = f32> {
    pub tape: Tape<T>,
    pub depth: NodeId,
    pub sigma_sq: Option<NodeId>,
    /// Pre-clamp log-variance logits; feeds only the variance head.
    pub sigma_logit: Option<NodeId>,
    pub params: BTreeMap<String, NodeId>,
}

#[derive(Clone, Debug)]
pub struct PredictionBundle<T: Scalar = f32> {
    pub depth: DepthMap<T>,
    pub sigma_sq: Option<Tensor<T>>,
    /// Decoder activations by tag; empty unless traced.
    pub activations: BTreeMap<String, Tensor<T>>,
    pub trace: Option<Trace<T>>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub seed: u64,
    pub fixture_abs_rel: Option<f64>,
    pub training: Option<serde_json::Value>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model<T: Scalar = f32> {
    config: ModelConfig,
    weights: BTreeMap<String, Tensor<T>>,
    pub provenance: Provenance,
}

enum Source<'a, T: Scalar> {
    Image(&'a Tensor<T>),
    Features(&'a EncoderFeatures<T>),
}

struct Graph {
    depth: NodeId,
    sigma_sq: Option<NodeId>,
    sigma_logit: Option<NodeId>,
    layers: Vec<NodeId>,
    params: BTreeMap<String, NodeId>,
}

impl<T: Scalar> Model<T> {
    /// Validates `weights` against the architecture descriptor.
    pub fn from_weights(config: ModelConfig, weights: BTreeMap<String, Tensor<T>>) -> Result<Self> {
        config.validate()?;
        let specs = config.weight_specs();
        for (name, shape) in &specs {
            match weights.get(name) {
                None => {
                    return Err(Error::Weight {
                        name: name.clone(),
                        reason: "missing".into(),
                    })
                }
                Some(t) if t.shape() != *shape => {
                    return Err(Error::Weight {
                        name: name.clone(),
                        reason: format!("expected shape {shape}, found {}", t.shape()),
                    })
                }
                Some(t) if !t.all_finite() => {
                    return Err(Error::Weight {
                        name: name.clone(),
                        reason: "contains non-finite values".into(),
                    })
                }
                _ => {}
            }
        }
        if let Some(extra) = weights.keys().find(|k| !specs.iter().any(|(n, _)| n == *k)) {
            return Err(Error::Weight {
                name: extra.clone(),
                reason: "not part of the architecture".into(),
            });
        }
        Ok(Model {
            config,
            weights,
            provenance: Provenance::default(),
        })
    }

    /// He-normal initialisation, deterministic in `seed`. Biases start at 0.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut weights = BTreeMap::new();
        for (i, (name, shape)) in config.weight_specs().into_iter().enumerate() {
            let t = if name.ends_with(".bias") {
                Tensor::zeros(shape)
            } else {
                let fan_in = (shape.c * shape.h * shape.w) as f64;
                let gain = match name.as_str() {
                    "head_depth.weight" => 1.0,
                    "head_sigma.weight" => 0.1,
                    _ => 2.0,
                };
                let std = (gain / fan_in).sqrt();
                let mut r = rng::seeded(rng::derive_seed(seed, i as u64));
                let data: Vec<f64> = (0..shape.numel()).map(|_| std * rng::normal(&mut r)).collect();
                Tensor::from_f64(shape, &data)?
            };
            weights.insert(name, t);
        }
        let mut model = Self::from_weights(config, weights)?;
        model.provenance.seed = seed;
        Ok(model)
    }

    /// Every weight and bias set to zero.
    pub fn zeros(config: ModelConfig) -> Result<Self> {
        let weights = config
            .weight_specs()
            .into_iter()
            .map(|(n, s)| (n, Tensor::zeros(s)))
            .collect();
        Self::from_weights(config, weights)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn weights(&self) -> &BTreeMap<String, Tensor<T>> {
        &self.weights
    }

    pub fn weight(&self, name: &str) -> Result<&Tensor<T>> {
        self.weights.get(name).ok_or_else(|| Error::Weight {
            name: name.to_string(),
            reason: "missing".into(),
        })
    }

    pub fn layer_tags(&self) -> Vec<String> {
        self.config.layer_tags()
    }

    pub fn num_layers(&self) -> usize {
        self.config.decoder_layers
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            weights: self.weights.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
            provenance: self.provenance.clone(),
        }
    }

    /// Copy with every kernel averaged with its horizontal mirror. Such a model
    /// maps left-right symmetric images to exactly symmetric depth.
    pub fn mirror_symmetric(&self) -> Self {
        let half = T::narrow(0.5);
        let weights = self
            .weights
            .iter()
            .map(|(k, v)| {
                let w = if k.ends_with(".weight") {
                    v.add(&v.hflip()).expect("same shape").scale(half)
                } else {
                    v.clone()
                };
                (k.clone(), w)
            })
            .collect();
        Model {
            config: self.config.clone(),
            weights,
            provenance: self.provenance.clone(),
        }
    }

    /// Replaces the weights, keeping the architecture.
    pub fn with_weights(&self, weights: BTreeMap<String, Tensor<T>>) -> Result<Self> {
        let mut m = Self::from_weights(self.config.clone(), weights)?;
        m.provenance = self.provenance.clone();
        Ok(m)
    }

    pub fn check_image(&self, image: &Tensor<T>) -> Result<()> {
        let s = image.shape();
        let div = self.config.spatial_divisor();
        if s.n != 1 || s.c != self.config.input_channels {
            return Err(Error::invalid(format!(
                "expected an image of shape [1, {}, h, w], got {s}",
                self.config.input_channels
            )));
        }
        if s.h == 0 || s.w == 0 || !s.h.is_multiple_of(div) || !s.w.is_multiple_of(div) {
            return Err(Error::invalid(format!(
                "image size {}x{} is not divisible by {div} (required by {} encoder stages)",
                s.h, s.w, self.config.encoder_stages
            )));
        }
        Ok(())
    }

    fn param(&self, tape: &mut Tape<T>, params: &mut BTreeMap<String, NodeId>, name: &str) -> Result<NodeId> {
        if let Some(&id) = params.get(name) {
            return Ok(id);
        }
        let id = tape.leaf(self.weight(name)?.clone());
        params.insert(name.to_string(), id);
        Ok(id)
    }

    fn conv(
        &self,
        tape: &mut Tape<T>,
        params: &mut BTreeMap<String, NodeId>,
        x: NodeId,
        name: &str,
    ) -> Result<NodeId> {
        let w = self.param(tape, params, &format!("{name}.weight"))?;
        let b = self.param(tape, params, &format!("{name}.bias"))?;
        tape.conv2d(x, w, b, 1, 1)
    }

    fn encode_on(
        &self,
        tape: &mut Tape<T>,
        params: &mut BTreeMap<String, NodeId>,
        image: &Tensor<T>,
    ) -> Result<(NodeId, Vec<NodeId>)> {
        let mut x = tape.leaf(image.clone());
        let mut stages = Vec::new();
        for s in 1..=self.config.encoder_stages {
            let c = self.conv(tape, params, x, &format!("enc{s}"))?;
            let a = tape.elu(c)?;
            x = tape.avgpool2(a)?;
            stages.push(x);
        }
        let bottleneck = stages.pop().expect("at least one stage");
        let skips = if self.config.skip_connections { stages } else { Vec::new() };
        Ok((bottleneck, skips))
    }

    fn check_features(&self, f: &EncoderFeatures<T>) -> Result<()> {
        let zs = f.bottleneck.shape();
        let s = self.config.encoder_stages;
        let (h, w) = (zs.h << s, zs.w << s);
        let (expected_z, expected_skips) = self.config.feature_shapes(h, w);
        if zs != expected_z {
            return Err(Error::ShapeMismatch {
                op: "bottleneck",
                left: zs,
                right: expected_z,
            });
        }
        if f.skips.len() != expected_skips.len() {
            return Err(Error::invalid(format!(
                "expected {} skip tensors, got {}",
                expected_skips.len(),
                f.skips.len()
            )));
        }
        for (t, e) in f.skips.iter().zip(expected_skips) {
            t.expect_shape(e, "skip features")?;
        }
        Ok(())
    }

    fn build(&self, tape: &mut Tape<T>, source: Source<'_, T>, opts: &ForwardOptions) -> Result<Graph> {
        let mut params = BTreeMap::new();
        let (z, skips) = match source {
            Source::Image(image) => {
                self.check_image(image)?;
                self.encode_on(tape, &mut params, image)?
            }
            Source::Features(f) => {
                self.check_features(f)?;
                let z = tape.leaf(f.bottleneck.clone());
                let skips = f.skips.iter().map(|t| tape.leaf(t.clone())).collect();
                (z, skips)
            }
        };
        if let Some(d) = opts.dropout {
            if !(0.0..1.0).contains(&d.p) {
                return Err(Error::invalid(format!("dropout probability {} outside [0, 1)", d.p)));
            }
        }

        let mut x = z;
        let mut layers = Vec::with_capacity(self.config.decoder_layers);
        for (i, layer) in self.config.decoder_plan().iter().enumerate() {
            if layer.upsample {
                x = tape.upsample2x(x)?;
            }
            if let Some(stage) = layer.skip {
                x = tape.concat(&[x, skips[stage - 1]])?;
            }
            let c = self.conv(tape, &mut params, x, &format!("dec{}", i + 1))?;
            let a = tape.elu(c)?;
            layers.push(a);
            x = match opts.dropout {
                Some(d) => {
                    let mask = dropout_mask(tape.value(a)?.shape(), d, i as u64);
                    let m = tape.leaf(mask);
                    tape.mul(a, m)?
                }
                None => a,
            };
        }

        let range = T::narrow(self.config.d_max - self.config.d_min);
        let logits = self.conv(tape, &mut params, x, "head_depth")?;
        let s = tape.sigmoid(logits)?;
        let scaled = tape.mul_scalar(s, range)?;
        let depth = tape.add_scalar(scaled, T::narrow(self.config.d_min))?;

        let (sigma_sq, sigma_logit) = if self.config.predictive {
            let logit = self.conv(tape, &mut params, x, "head_sigma")?;
            let clamp = T::narrow(LOG_VAR_CLAMP);
            let clamped = tape.clamp(logit, -clamp, clamp)?;
            (Some(tape.exp(clamped)?), Some(logit))
        } else {
            (None, None)
        };
        Ok(Graph {
            depth,
            sigma_sq,
            sigma_logit,
            layers,
            params,
        })
    }

    fn bundle(&self, mut tape: Tape<T>, graph: Graph, trace: bool) -> Result<PredictionBundle<T>> {
        let depth = DepthMap::new(tape.value(graph.depth)?.clone())?;
        let sigma_sq = graph.sigma_sq.map(|id| tape.value(id).cloned()).transpose()?;
        if !trace {
            return Ok(PredictionBundle {
                depth,
                sigma_sq,
                activations: BTreeMap::new(),
                trace: None,
            });
        }
        let mut activations = BTreeMap::new();
        for (tag, &id) in self.config.layer_tags().iter().zip(&graph.layers) {
            tape.tag(id, tag)?;
            activations.insert(tag.clone(), tape.value(id)?.clone());
        }
        Ok(PredictionBundle {
            depth,
            sigma_sq,
            activations,
            trace: Some(Trace {
                tape,
                depth: graph.depth,
                sigma_sq: graph.sigma_sq,
                sigma_logit: graph.sigma_logit,
                params: graph.params,
            }),
        })
    }

    /// `f(x)`: depth (and variance for predictive models) for a `1×C×H×W` image.
    pub fn forward(&self, image: &Tensor<T>, opts: ForwardOptions) -> Result<PredictionBundle<T>> {
        let mut tape = Tape::new();
        let graph = self.build(&mut tape, Source::Image(image), &opts)?;
        self.bundle(tape, graph, opts.trace)
    }

    /// `ψ(z)`: runs the decoder on supplied encoder features.
    pub fn forward_from_features(
        &self,
        features: &EncoderFeatures<T>,
        opts: ForwardOptions,
    ) -> Result<PredictionBundle<T>> {
        let mut tape = Tape::new();
        let graph = self.build(&mut tape, Source::Features(features), &opts)?;
        self.bundle(tape, graph, opts.trace)
    }

    /// `φ(x)`: the encoder features of an image.
    pub fn encode(&self, image: &Tensor<T>) -> Result<EncoderFeatures<T>> {
        self.check_image(image)?;
        let mut tape = Tape::new();
        let mut params = BTreeMap::new();
        let (z, skips) = self.encode_on(&mut tape, &mut params, image)?;
        Ok(EncoderFeatures {
            bottleneck: tape.value(z)?.clone(),
            skips: skips
                .iter()
                .map(|&s| tape.value(s).cloned())
                .collect::<Result<_>>()?,
        })
    }

    pub fn predict(&self, image: &Tensor<T>) -> Result<DepthMap<T>> {
        Ok(self.forward(image, ForwardOptions::default())?.depth)
    }
}

fn dropout_mask<T: Scalar>(shape: Shape, d: Dropout, layer: u64) -> Tensor<T> {
    let keep = 1.0 - d.p;
    let scale = T::narrow(1.0 / keep);
    let mut r = rng::seeded(rng::derive_seed(d.seed, layer));
    let data = (0..shape.numel())
        .map(|_| {
            if r.random::<f64>() < keep {
                scale
            } else {
                T::zero()
            }
        })
        .collect();
    Tensor::new(shape, data).expect("mask shape")
}
