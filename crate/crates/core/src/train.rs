//! Supervised fixture training with mini-batch SGD and momentum.
//!
//! Per-sample gradients are computed in parallel, each on its own tape, and
//! summed in sample order, so the result does not depend on the thread count.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics;
use crate::model::{ForwardOptions, Model, ModelConfig, LOG_VAR_CLAMP};
use crate::rng;
use crate::synth::Scene;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainOptions {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    /// Global gradient-norm clip applied to every batch gradient.
    pub clip_norm: Option<f64>,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            epochs: 200,
            batch_size: 8,
            learning_rate: 0.01,
            momentum: 0.9,
            clip_norm: Some(5.0),
        }
    }
}

/// Per-sample training loss on a traced forward.
///
/// Regular models use the mean squared depth error. Predictive models use the
/// Gaussian negative log-likelihood `mean(0.5·(d̂-d)²·e^{-s} + 0.5·s)` where
/// `s` is the clamped log-variance.
fn sample_gradients(model: &Model<f32>, scene: &Scene) -> Result<(f64, BTreeMap<String, Tensor<f32>>)> {
    let bundle = model.forward(&scene.image, ForwardOptions::traced())?;
    let mut trace = bundle.trace.ok_or(Error::NotTraced)?;
    let tape = &mut trace.tape;
    let n = scene.depth.values().len() as f32;
    let gt = tape.leaf(scene.depth.tensor().clone());
    let diff = tape.sub(trace.depth, gt)?;
    let sq = tape.square(diff)?;
    let per_pixel = match trace.sigma_logit {
        None => sq,
        Some(logit) => {
            let c = LOG_VAR_CLAMP as f32;
            let s = tape.clamp(logit, -c, c)?;
            let neg = tape.mul_scalar(s, -1.0)?;
            let inv_var = tape.exp(neg)?;
            let weighted = tape.mul(sq, inv_var)?;
            let total = tape.add(weighted, s)?;
            tape.mul_scalar(total, 0.5)?
        }
    };
    let sum = tape.sum(per_pixel)?;
    let loss = tape.mul_scalar(sum, 1.0 / n)?;
    let loss_value = tape.value(loss)?.data()[0] as f64;
    let grads = tape.backward(loss)?;
    let mut out = BTreeMap::new();
    for (name, &id) in &trace.params {
        let w = model.weight(name)?;
        out.insert(name.clone(), grads.or_zeros(id, w.shape())?);
    }
    Ok((loss_value, out))
}

/// Mean Abs Rel of the model's depth over a set of scenes.
pub fn mean_abs_rel(model: &Model<f32>, scenes: &[Scene]) -> Result<f64> {
    if scenes.is_empty() {
        return Err(Error::invalid("cannot score a model on an empty scene list"));
    }
    let per_scene = scenes
        .par_iter()
        .map(|s| {
            let d = model.predict(&s.image)?;
            Ok(metrics::abs_rel(d.values(), s.depth.values()))
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(per_scene.iter().sum::<f64>() / per_scene.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingRecord {
    pub optimizer: String,
    pub options: TrainOptions,
    pub train_scenes: usize,
    pub final_loss: Option<f64>,
}

/// Trains a freshly initialised model on `train`. With zero epochs the seeded
/// initialisation is returned unchanged.
pub fn train_fixture(
    config: ModelConfig,
    train: &[Scene],
    seed: u64,
    opts: &TrainOptions,
) -> Result<Model<f32>> {
    if train.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    if opts.batch_size == 0 || !(opts.learning_rate > 0.0) || !(0.0..1.0).contains(&opts.momentum) {
        return Err(Error::invalid("batch size, learning rate or momentum out of range"));
    }
    let mut model = Model::init(config, seed)?;
    let mut velocity: BTreeMap<String, Vec<f64>> = model
        .weights()
        .iter()
        .map(|(k, v)| (k.clone(), vec![0.0; v.numel()]))
        .collect();
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut shuffle = rng::seeded(rng::derive_seed(seed, u64::MAX));
    let mut final_loss = None;

    for _ in 0..opts.epochs {
        order.shuffle(&mut shuffle);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(opts.batch_size) {
            let results = batch
                .par_iter()
                .map(|&i| sample_gradients(&model, &train[i]))
                .collect::<Result<Vec<_>>>()?;
            let scale = 1.0 / batch.len() as f64;
            let mut grad: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
            for (loss, g) in &results {
                epoch_loss += loss;
                for (name, t) in g {
                    let acc = grad
                        .entry(name.as_str())
                        .or_insert_with(|| vec![0.0; t.numel()]);
                    for (a, &v) in acc.iter_mut().zip(t.data()) {
                        *a += v as f64 * scale;
                    }
                }
            }
            let norm = grad
                .values()
                .flat_map(|g| g.iter())
                .map(|v| v * v)
                .sum::<f64>()
                .sqrt();
            let clip = match opts.clip_norm {
                Some(c) if norm > c => c / norm,
                _ => 1.0,
            };
            let mut weights = model.weights().clone();
            for (name, g) in &grad {
                let vel = velocity.get_mut(*name).expect("velocity per weight");
                let w = weights.get_mut(*name).expect("weight exists");
                let updated: Vec<f64> = w
                    .data()
                    .iter()
                    .zip(vel.iter_mut())
                    .zip(g)
                    .map(|((&wv, v), &gv)| {
                        *v = opts.momentum * *v + gv * clip;
                        wv as f64 - opts.learning_rate * *v
                    })
                    .collect();
                *w = Tensor::from_f64(w.shape(), &updated)?;
            }
            model = model.with_weights(weights)?;
        }
        final_loss = Some(epoch_loss / train.len() as f64);
    }

    model.provenance.seed = seed;
    model.provenance.training = Some(serde_json::to_value(TrainingRecord {
        optimizer: "sgd-momentum".into(),
        options: opts.clone(),
        train_scenes: train.len(),
        final_loss,
    })
    .expect("serialisable record"));
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{SceneParams, SceneSet, Split};

    fn scenes(n: usize) -> Vec<Scene> {
        SceneSet::generate(1, n, Split::Train, SceneParams::sized(16, 16))
            .unwrap()
            .scenes
    }

    #[test]
    fn zero_epochs_returns_initialisation() {
        let cfg = ModelConfig::default();
        let opts = TrainOptions {
            epochs: 0,
            ..Default::default()
        };
        let m = train_fixture(cfg.clone(), &scenes(2), 4, &opts).unwrap();
        assert_eq!(m.weights(), Model::<f32>::init(cfg, 4).unwrap().weights());
    }

    #[test]
    fn empty_training_set_rejected() {
        assert!(train_fixture(ModelConfig::default(), &[], 0, &TrainOptions::default()).is_err());
    }

    #[test]
    fn training_is_deterministic_and_reduces_loss() {
        let data = scenes(4);
        let opts = TrainOptions {
            epochs: 3,
            batch_size: 2,
            ..Default::default()
        };
        let a = train_fixture(ModelConfig::predictive(), &data, 9, &opts).unwrap();
        let b = train_fixture(ModelConfig::predictive(), &data, 9, &opts).unwrap();
        assert_eq!(a.weights(), b.weights());
        assert!(a.weights().values().all(|t| t.all_finite()));
    }
}
