//! Dataset-level runs: method specs, per-scene estimation, evaluation and the
//! comparison table.

use std::collections::BTreeMap;
use std::fmt;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::augment::Augmentation;
use crate::baselines::{self, DEFAULT_DROP_P, DEFAULT_DROP_SAMPLES, DEFAULT_DROP_SEED};
use crate::error::{Error, Result};
use crate::io::{self, gt01, pgm};
use crate::maps::{DepthMap, UncertaintyMap, ValidMask};
use crate::metrics::{self, fmt_g6, MetricKind, PixelRecord, SparsificationResult};
use crate::model::{ForwardOptions, Model};
use crate::synth::SceneSet;
use crate::tensor::Tensor;
use crate::uncertainty::{self, Fusion, GradConfig, LayerMode};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GradVariant {
    Ours,
    OursFeat,
    OursMulti,
}

impl GradVariant {
    fn name(self) -> &'static str {
        match self {
            GradVariant::Ours => "ours",
            GradVariant::OursFeat => "ours-feat",
            GradVariant::OursMulti => "ours-multi",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Method {
    Grad { variant: GradVariant, cfg: GradConfig },
    Post,
    /// `None` means the default augmentation set.
    Var(Option<Vec<Augmentation>>),
    DropStar { n: usize, p: f64, seed: u64 },
    Sigma,
}

/// Overrides for the gradient methods; `None` keeps the method default.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradOverrides {
    pub aug: Option<Augmentation>,
    pub layer: Option<usize>,
    pub layers: Option<Vec<usize>>,
    pub fusion: Option<Fusion>,
    pub lambda: Option<f64>,
}

impl Method {
    /// The default comparison set; `sigma` only for predictive models.
    pub fn default_set(predictive: bool) -> Vec<Method> {
        let mut v: Vec<Method> = ["ours", "ours-feat", "ours-multi", "post", "var", "dropstar"]
            .iter()
            .map(|s| s.parse().expect("built-in method string"))
            .collect();
        if predictive {
            v.push(Method::Sigma);
        }
        v
    }

    pub fn with_overrides(mut self, o: &GradOverrides) -> Self {
        if let Method::Grad { cfg, .. } = &mut self {
            if let Some(a) = &o.aug {
                cfg.aug = a.clone();
            }
            if let Some(l) = o.layer {
                cfg.layer_mode = LayerMode::Single(l);
            }
            if let Some(ls) = &o.layers {
                cfg.layer_mode = LayerMode::Multi(ls.clone());
            }
            if let Some(f) = o.fusion {
                cfg.fusion = f;
            }
            if let Some(l) = o.lambda {
                cfg.lambda = l;
            }
        }
        self
    }

    /// Key/value description of every setting, for run manifests.
    pub fn settings(&self) -> BTreeMap<String, String> {
        let mut m = BTreeMap::new();
        match self {
            Method::Grad { cfg, .. } => {
                m.insert("aug".into(), cfg.aug.to_string());
                let layers: Vec<String> = cfg.layers().iter().map(|l| l.to_string()).collect();
                m.insert("layers".into(), layers.join(","));
                m.insert("fusion".into(), cfg.fusion.to_string());
                m.insert("lambda".into(), cfg.lambda.to_string());
                m.insert("channel_reduce".into(), format!("{:?}", cfg.channel_reduce));
            }
            Method::Var(augs) => {
                let augs = augs.clone().unwrap_or_else(baselines::default_var_augs);
                let names: Vec<String> = augs.iter().map(|a| a.to_string()).collect();
                m.insert("augs".into(), names.join(","));
            }
            Method::DropStar { n, p, seed } => {
                m.insert("n".into(), n.to_string());
                m.insert("p".into(), p.to_string());
                m.insert("seed".into(), seed.to_string());
            }
            Method::Post | Method::Sigma => {}
        }
        m
    }

    /// Depth and uncertainty for one image.
    pub fn run(&self, model: &Model<f32>, image: &Tensor<f32>) -> Result<(DepthMap<f32>, UncertaintyMap<f32>)> {
        match self {
            Method::Grad { cfg, .. } => {
                let e = uncertainty::estimate(model, image, cfg)?;
                Ok((e.depth, e.uncertainty))
            }
            Method::Post => Ok((model.predict(image)?, baselines::post_uncertainty(model, image)?)),
            Method::Var(augs) => {
                let augs = augs.clone().unwrap_or_else(baselines::default_var_augs);
                Ok((model.predict(image)?, baselines::var_uncertainty(model, image, &augs)?))
            }
            Method::DropStar { n, p, seed } => Ok((
                model.predict(image)?,
                baselines::dropstar_uncertainty(model, image, *n, *p, *seed)?,
            )),
            Method::Sigma => {
                let b = model.forward(image, ForwardOptions::default())?;
                let u = baselines::sigma_uncertainty(b.sigma_sq.as_ref())?;
                Ok((b.depth, u))
            }
        }
    }

    /// Checks the method against a model before any scene is processed.
    pub fn check(&self, model: &Model<f32>) -> Result<()> {
        match self {
            Method::Grad { cfg, .. } => cfg.validate(model.num_layers()),
            Method::Sigma if !model.config().predictive => Err(Error::invalid(
                "the sigma baseline needs a predictive model with a variance head",
            )),
            _ => Ok(()),
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Method::Grad { variant, .. } => f.write_str(variant.name()),
            Method::Post => f.write_str("post"),
            Method::Var(None) => f.write_str("var"),
            Method::Var(Some(augs)) => {
                let names: Vec<String> = augs.iter().map(|a| a.to_string()).collect();
                write!(f, "var:{}", names.join(","))
            }
            Method::DropStar { n, p, seed } => write!(f, "dropstar:{n}:{p}:{seed}"),
            Method::Sigma => f.write_str("sigma"),
        }
    }
}

impl FromStr for Method {
    type Err = Error;

    /// `ours | ours-feat | ours-multi | post | var[:aug,aug,...] |
    /// dropstar[:n[:p[:seed]]] | sigma`
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let (head, rest) = match s.split_once(':') {
            Some((h, r)) => (h, Some(r)),
            None => (s, None),
        };
        let grad = |variant, cfg| Ok(Method::Grad { variant, cfg });
        match (head, rest) {
            ("ours", None) => grad(GradVariant::Ours, GradConfig::ours()),
            ("ours-feat", None) => grad(GradVariant::OursFeat, GradConfig::ours_feat()),
            ("ours-multi", None) => grad(GradVariant::OursMulti, GradConfig::ours_multi()),
            ("post", None) => Ok(Method::Post),
            ("sigma", None) => Ok(Method::Sigma),
            ("var", None) => Ok(Method::Var(None)),
            ("var", Some(list)) => {
                let augs = list
                    .split(',')
                    .filter(|a| !a.trim().is_empty())
                    .map(str::parse)
                    .collect::<Result<Vec<Augmentation>>>()?;
                if augs.is_empty() {
                    return Err(Error::parse(s, "var needs at least one augmentation"));
                }
                Ok(Method::Var(Some(augs)))
            }
            ("dropstar", rest) => {
                let parts: Vec<&str> = rest.map(|r| r.split(':').collect()).unwrap_or_default();
                if parts.len() > 3 {
                    return Err(Error::parse(s, "expected dropstar:<n>:<p>:<seed>"));
                }
                let n = match parts.first() {
                    Some(v) => v.parse().map_err(|_| Error::parse(s, "sample count must be an integer"))?,
                    None => DEFAULT_DROP_SAMPLES,
                };
                let p: f64 = match parts.get(1) {
                    Some(v) => v.parse().map_err(|_| Error::parse(s, "dropout probability must be a number"))?,
                    None => DEFAULT_DROP_P,
                };
                let seed = match parts.get(2) {
                    Some(v) => v.parse().map_err(|_| Error::parse(s, "seed must be an unsigned integer"))?,
                    None => DEFAULT_DROP_SEED,
                };
                if n < 2 {
                    return Err(Error::parse(s, "dropstar needs at least 2 samples"));
                }
                if !(0.0..1.0).contains(&p) {
                    return Err(Error::parse(s, "dropout probability must lie in [0, 1)"));
                }
                Ok(Method::DropStar { n, p, seed })
            }
            _ => Err(Error::parse(
                s,
                "expected ours, ours-feat, ours-multi, post, var[:augs], dropstar[:n:p:seed] or sigma",
            )),
        }
    }
}

/// One scene's output of a method.
#[derive(Clone, Debug)]
pub struct ScenePrediction {
    pub seed: u64,
    pub depth: DepthMap<f32>,
    pub uncertainty: UncertaintyMap<f32>,
}

/// Runs `method` on every scene, in parallel, keeping scene order.
pub fn predict_dataset(model: &Model<f32>, data: &SceneSet, method: &Method) -> Result<Vec<ScenePrediction>> {
    method.check(model)?;
    data.scenes
        .par_iter()
        .map(|scene| {
            let (depth, uncertainty) = method.run(model, &scene.image)?;
            Ok(ScenePrediction {
                seed: scene.seed,
                depth,
                uncertainty,
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EstimateManifest {
    pub method: String,
    pub settings: BTreeMap<String, String>,
    pub scenes: Vec<u64>,
}

pub fn write_predictions(dir: &Path, method: &Method, preds: &[ScenePrediction]) -> Result<()> {
    preds.par_iter().try_for_each(|p| {
        let sd = SceneSet::scene_dir(dir, p.seed);
        std::fs::create_dir_all(&sd).map_err(|e| Error::io(&sd, e))?;
        let (h, w) = p.depth.hw();
        gt01::write(&sd.join("depth.gt01"), p.depth.tensor())?;
        gt01::write(&sd.join("uncert.gt01"), p.uncertainty.values())?;
        pgm::write(&sd.join("uncert.pgm"), h, w, p.uncertainty.values().data())?;
        gt01::write(&sd.join("mask.gt01"), &p.uncertainty.mask().to_tensor())
    })?;
    io::write_json(
        &dir.join("estimate.json"),
        &EstimateManifest {
            method: method.to_string(),
            settings: method.settings(),
            scenes: preds.iter().map(|p| p.seed).collect(),
        },
    )
}

/// Reads a prediction directory for every scene of `data`.
pub fn read_predictions(dir: &Path, data: &SceneSet) -> Result<(String, Vec<ScenePrediction>)> {
    let manifest: EstimateManifest = io::read_json(&dir.join("estimate.json"))?;
    let files = ["depth.gt01", "uncert.gt01", "mask.gt01"];
    let missing: Vec<String> = data
        .scenes
        .iter()
        .filter(|s| {
            let sd = SceneSet::scene_dir(dir, s.seed);
            files.iter().any(|f| !sd.join(f).is_file())
        })
        .map(|s| s.seed.to_string())
        .collect();
    if !missing.is_empty() {
        return Err(Error::invalid(format!(
            "{}: predictions missing for scenes {}",
            dir.display(),
            missing.join(", ")
        )));
    }
    let preds = data
        .scenes
        .iter()
        .map(|s| {
            let sd = SceneSet::scene_dir(dir, s.seed);
            let depth = DepthMap::new(gt01::read(&sd.join("depth.gt01"))?)?;
            let mask = ValidMask::from_tensor(&gt01::read(&sd.join("mask.gt01"))?)?;
            let u = UncertaintyMap::new(gt01::read(&sd.join("uncert.gt01"))?, mask)?;
            if depth.hw() != s.depth.hw() || u.hw() != s.depth.hw() {
                return Err(Error::invalid(format!(
                    "scene {}: prediction size {:?} does not match ground truth {:?}",
                    s.seed,
                    depth.hw(),
                    s.depth.hw()
                )));
            }
            Ok(ScenePrediction {
                seed: s.seed,
                depth,
                uncertainty: u,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((manifest.method, preds))
}

#[derive(Clone, Debug, PartialEq)]
pub struct MethodEvaluation {
    pub method: String,
    /// Per scene: one result per metric, in [`MetricKind::ALL`] order.
    pub per_image: Vec<(u64, Vec<SparsificationResult>)>,
    pub aggregated: Vec<SparsificationResult>,
    /// Over the pooled valid pixels of all scenes.
    pub nuce: f64,
    pub images: usize,
    pub coverage: f64,
}

impl MethodEvaluation {
    pub fn metric(&self, kind: MetricKind) -> &SparsificationResult {
        self.aggregated
            .iter()
            .find(|r| r.metric == kind)
            .expect("every metric is evaluated")
    }
}

fn scene_records(data: &SceneSet, preds: &[ScenePrediction]) -> Result<Vec<(u64, Vec<PixelRecord>)>> {
    if preds.len() != data.scenes.len() {
        return Err(Error::invalid("prediction count does not match the dataset"));
    }
    data.scenes
        .iter()
        .zip(preds)
        .map(|(s, p)| {
            if s.seed != p.seed {
                return Err(Error::invalid(format!("prediction for scene {} is out of order", p.seed)));
            }
            let r = metrics::records(
                s.depth.values(),
                p.depth.values(),
                p.uncertainty.values().data(),
                p.uncertainty.mask(),
            )?;
            Ok((s.seed, r))
        })
        .collect()
}

pub fn evaluate_predictions(
    method: &str,
    data: &SceneSet,
    preds: &[ScenePrediction],
    steps: usize,
    bins: usize,
) -> Result<MethodEvaluation> {
    let records = scene_records(data, preds)?;
    if records.is_empty() {
        return Err(Error::invalid("cannot evaluate an empty dataset"));
    }
    let per_image = records
        .par_iter()
        .map(|(seed, r)| {
            let curves = MetricKind::ALL
                .iter()
                .map(|&k| metrics::sparsification(r, k, steps))
                .collect::<Result<Vec<_>>>()
                .map_err(|e| Error::invalid(format!("scene {seed}: {e}")))?;
            Ok((*seed, curves))
        })
        .collect::<Result<Vec<_>>>()?;
    let aggregated = (0..MetricKind::ALL.len())
        .map(|i| {
            let col: Vec<SparsificationResult> = per_image.iter().map(|(_, c)| c[i].clone()).collect();
            metrics::aggregate_sparsification(&col)
        })
        .collect::<Result<Vec<_>>>()?;
    let pooled: Vec<PixelRecord> = records.iter().flat_map(|(_, r)| r.iter().copied()).collect();
    let total: usize = data.scenes.iter().map(|s| s.depth.values().len()).sum();
    Ok(MethodEvaluation {
        method: method.to_string(),
        per_image,
        aggregated,
        nuce: metrics::nuce(&pooled, bins)?,
        images: records.len(),
        coverage: pooled.len() as f64 / total as f64,
    })
}

/// Mean over scenes of the Spearman correlation between uncertainty and
/// squared depth error on valid pixels. Scenes where it is undefined are
/// skipped.
pub fn mean_spearman(data: &SceneSet, preds: &[ScenePrediction]) -> Result<Option<f64>> {
    let records = scene_records(data, preds)?;
    let values: Vec<f64> = records
        .iter()
        .filter_map(|(_, r)| {
            let e: Vec<f64> = r.iter().map(|p| (p.pred - p.gt).powi(2)).collect();
            let u: Vec<f64> = r.iter().map(|p| p.uncertainty).collect();
            metrics::spearman(&u, &e)
        })
        .collect();
    Ok((!values.is_empty()).then(|| values.iter().sum::<f64>() / values.len() as f64))
}

/// Spearman correlation over the valid pixels of the whole set at once.
pub fn pooled_spearman(data: &SceneSet, preds: &[ScenePrediction]) -> Result<Option<f64>> {
    let records = scene_records(data, preds)?;
    let (u, e): (Vec<f64>, Vec<f64>) = records
        .iter()
        .flat_map(|(_, r)| r.iter().map(|p| (p.uncertainty, (p.pred - p.gt).powi(2))))
        .unzip();
    Ok(metrics::spearman(&u, &e))
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

pub fn sparsification_csv(evals: &[MethodEvaluation]) -> String {
    let mut out = String::from("fraction,oracle,actual,random,metric,method,image_id\n");
    for e in evals {
        let rows = e
            .per_image
            .iter()
            .flat_map(|(seed, curves)| curves.iter().map(move |c| (seed.to_string(), c)))
            .chain(e.aggregated.iter().map(|c| ("mean".to_string(), c)));
        for (image, c) in rows {
            for i in 0..c.fractions.len() {
                writeln!(
                    out,
                    "{},{},{},{},{},{},{}",
                    fmt_g6(c.fractions[i]),
                    fmt_g6(c.oracle[i]),
                    fmt_g6(c.actual[i]),
                    fmt_g6(c.random[i]),
                    c.metric,
                    csv_field(&e.method),
                    image
                )
                .expect("writing to a string");
            }
        }
    }
    out
}

/// One row per method and metric with AUSE, AURG and the full-set metric
/// value, plus one nUCE row per method.
pub fn report_csv(evals: &[MethodEvaluation]) -> String {
    let mut out = String::from("method,metric,ause,aurg,value\n");
    for e in evals {
        let m = csv_field(&e.method);
        for c in &e.aggregated {
            writeln!(out, "{m},{},{},{},{}", c.metric, fmt_g6(c.ause), fmt_g6(c.aurg), fmt_g6(c.random[0]))
                .expect("writing to a string");
        }
        writeln!(out, "{m},nuce,,,{}", fmt_g6(e.nuce)).expect("writing to a string");
    }
    out
}

/// AUSE/AURG per metric and nUCE, one row per method sorted by method string.
pub fn table_csv(evals: &[MethodEvaluation]) -> String {
    let mut header = String::from("method");
    for k in MetricKind::ALL {
        write!(header, ",ause_{k},aurg_{k}").expect("writing to a string");
    }
    header.push_str(",nuce\n");
    let mut rows: Vec<&MethodEvaluation> = evals.iter().collect();
    rows.sort_by(|a, b| a.method.cmp(&b.method));
    let mut out = header;
    for e in rows {
        out.push_str(&csv_field(&e.method));
        for k in MetricKind::ALL {
            let c = e.metric(k);
            write!(out, ",{},{}", fmt_g6(c.ause), fmt_g6(c.aurg)).expect("writing to a string");
        }
        writeln!(out, ",{}", fmt_g6(e.nuce)).expect("writing to a string");
    }
    out
}

/// Estimates and evaluates every method in memory.
pub fn compare(
    model: &Model<f32>,
    data: &SceneSet,
    methods: &[Method],
    steps: usize,
    bins: usize,
) -> Result<Vec<MethodEvaluation>> {
    methods
        .iter()
        .map(|m| {
            let label = m.to_string();
            let wrap = |e: Error| Error::Method {
                method: label.clone(),
                source: Box::new(e),
            };
            let preds = predict_dataset(model, data, m).map_err(wrap)?;
            evaluate_predictions(&label, data, &preds, steps, bins).map_err(wrap)
        })
        .collect()
}
