//! Model directories: `manifest.json` plus one GT01 file per weight.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{self, gt01};
use crate::model::{Model, ModelConfig, Provenance};
use crate::tensor::Shape;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightEntry {
    pub path: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelManifest {
    pub arch: ModelConfig,
    pub layer_tags: Vec<String>,
    pub fixture_abs_rel: Option<f64>,
    pub seed: u64,
    #[serde(default)]
    pub training: Option<serde_json::Value>,
    pub weights: BTreeMap<String, WeightEntry>,
}

pub fn save_model(model: &Model<f32>, dir: &Path) -> Result<()> {
    let wdir = dir.join("weights");
    std::fs::create_dir_all(&wdir).map_err(|e| Error::io(&wdir, e))?;
    let mut weights = BTreeMap::new();
    for (name, t) in model.weights() {
        let rel = format!("weights/{name}.gt01");
        gt01::write(&dir.join(&rel), t)?;
        weights.insert(
            name.clone(),
            WeightEntry {
                path: rel,
                shape: t.shape().dims().to_vec(),
            },
        );
    }
    let manifest = ModelManifest {
        arch: model.config().clone(),
        layer_tags: model.layer_tags(),
        fixture_abs_rel: model.provenance.fixture_abs_rel,
        seed: model.provenance.seed,
        training: model.provenance.training.clone(),
        weights,
    };
    io::write_json(&dir.join("manifest.json"), &manifest)
}

pub fn load_model(dir: &Path) -> Result<Model<f32>> {
    let manifest: ModelManifest = io::read_json(&dir.join("manifest.json"))?;
    manifest.arch.validate()?;
    if manifest.layer_tags != manifest.arch.layer_tags() {
        return Err(Error::invalid(format!(
            "manifest layer tags {:?} do not match the architecture",
            manifest.layer_tags
        )));
    }
    let mut weights = BTreeMap::new();
    for (name, entry) in &manifest.weights {
        let weight_err = |reason: String| Error::Weight {
            name: name.clone(),
            reason,
        };
        let declared = Shape::from_dims(&entry.shape).map_err(|e| weight_err(e.to_string()))?;
        let bytes = io::read_bytes(&dir.join(&entry.path)).map_err(|e| weight_err(e.to_string()))?;
        let t = gt01::decode_named(&bytes, &entry.path).map_err(|e| weight_err(e.to_string()))?;
        if t.shape() != declared {
            return Err(weight_err(format!(
                "file holds shape {} but the manifest declares {declared}",
                t.shape()
            )));
        }
        weights.insert(name.clone(), t);
    }
    let mut model = Model::from_weights(manifest.arch, weights)?;
    model.provenance = Provenance {
        seed: manifest.seed,
        fixture_abs_rel: manifest.fixture_abs_rel,
        training: manifest.training,
    };
    Ok(model)
}
