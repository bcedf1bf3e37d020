//! Procedural scenes with exact ground-truth depth.
//!
//! A scene is a tilted background plane overlaid with a few axis-aligned
//! rectangles and disks, each at a constant depth; the nearest primitive wins
//! at every pixel. The image is the shading `(d_max - d) / (d_max - d_min)`
//! times a per-primitive RGB albedo, plus Gaussian texture noise.

use std::path::Path;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{self, gt01};
use crate::maps::DepthMap;
use crate::rng;
use crate::tensor::{Shape, Tensor};

pub const DEFAULT_SIZE: usize = 64;
/// Image sides must be multiples of this (three 2× encoder stages).
pub const SIZE_DIVISOR: usize = 8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneParams {
    pub height: usize,
    pub width: usize,
    pub d_min: f64,
    pub d_max: f64,
    pub min_shapes: usize,
    pub max_shapes: usize,
    pub noise_std: f64,
}

impl Default for SceneParams {
    fn default() -> Self {
        SceneParams {
            height: DEFAULT_SIZE,
            width: DEFAULT_SIZE,
            d_min: 1.0,
            d_max: 10.0,
            min_shapes: 3,
            max_shapes: 7,
            noise_std: 0.02,
        }
    }
}

impl SceneParams {
    pub fn sized(height: usize, width: usize) -> Self {
        SceneParams {
            height,
            width,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (h, w) = (self.height, self.width);
        if h == 0 || w == 0 || !h.is_multiple_of(SIZE_DIVISOR) || !w.is_multiple_of(SIZE_DIVISOR) {
            return Err(Error::invalid(format!(
                "scene size {h}x{w} must be positive and divisible by {SIZE_DIVISOR}"
            )));
        }
        if !(self.d_min > 0.0 && self.d_max > self.d_min && self.d_max.is_finite()) {
            return Err(Error::invalid(format!(
                "depth range must satisfy 0 < d_min < d_max, got [{}, {}]",
                self.d_min, self.d_max
            )));
        }
        if self.min_shapes > self.max_shapes || self.noise_std < 0.0 {
            return Err(Error::invalid("invalid shape count range or noise level"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub seed: u64,
    pub image: Tensor<f32>,
    pub depth: DepthMap<f32>,
}

#[derive(Clone, Copy, Debug)]
enum Footprint {
    Rect { x0: f64, y0: f64, x1: f64, y1: f64 },
    Disk { cx: f64, cy: f64, r: f64 },
}

impl Footprint {
    fn covers(&self, x: f64, y: f64) -> bool {
        match *self {
            Footprint::Rect { x0, y0, x1, y1 } => x >= x0 && x < x1 && y >= y0 && y < y1,
            Footprint::Disk { cx, cy, r } => (x - cx).powi(2) + (y - cy).powi(2) <= r * r,
        }
    }
}

struct Primitive {
    footprint: Footprint,
    depth: f64,
    albedo: [f64; 3],
}

fn albedo(r: &mut rng::SeededRng) -> [f64; 3] {
    [0; 3].map(|_| rng::uniform(r, 0.3, 1.0))
}

pub fn gen_scene(seed: u64, p: &SceneParams) -> Result<Scene> {
    p.validate()?;
    let (h, w) = (p.height, p.width);
    let (hf, wf) = (h as f64, w as f64);
    let range = p.d_max - p.d_min;
    let mut r = rng::seeded(seed);

    // Plane: d = centre + 2·(kx·u + ky·v) with u, v in (-0.5, 0.5).
    let centre = rng::uniform(&mut r, p.d_min + 0.4 * range, p.d_max - 0.1 * range);
    let budget = (centre - (p.d_min + 0.3 * range)).min(p.d_max - centre);
    let kx = rng::uniform(&mut r, -0.5, 0.5) * budget;
    let ky = rng::uniform(&mut r, -0.5, 0.5) * budget;
    let plane_albedo = albedo(&mut r);

    let count = r.random_range(p.min_shapes..=p.max_shapes);
    let side = hf.min(wf);
    let prims: Vec<Primitive> = (0..count)
        .map(|_| {
            let cx = rng::uniform(&mut r, 0.0, wf);
            let cy = rng::uniform(&mut r, 0.0, hf);
            let footprint = if r.random::<bool>() {
                let hw = rng::uniform(&mut r, side / 16.0, side / 4.0);
                let hh = rng::uniform(&mut r, side / 16.0, side / 4.0);
                Footprint::Rect {
                    x0: cx - hw,
                    y0: cy - hh,
                    x1: cx + hw,
                    y1: cy + hh,
                }
            } else {
                Footprint::Disk {
                    cx,
                    cy,
                    r: rng::uniform(&mut r, side / 16.0, side / 5.0),
                }
            };
            Primitive {
                footprint,
                depth: rng::uniform(&mut r, p.d_min, p.d_max),
                albedo: albedo(&mut r),
            }
        })
        .collect();

    let mut noise = rng::seeded(rng::derive_seed(seed, 1));
    let mut depth = Vec::with_capacity(h * w);
    let mut colour = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let (u, v) = (px / wf - 0.5, py / hf - 0.5);
            let mut d = centre + 2.0 * (kx * u + ky * v);
            let mut a = plane_albedo;
            for prim in &prims {
                if prim.depth < d && prim.footprint.covers(px, py) {
                    d = prim.depth;
                    a = prim.albedo;
                }
            }
            let d = d.clamp(p.d_min, p.d_max);
            depth.push(d);
            colour.push(a.map(|ac| ac * (p.d_max - d) / range));
        }
    }
    let mut image = vec![0.0; 3 * h * w];
    for c in 0..3 {
        for (i, rgb) in colour.iter().enumerate() {
            let n = if p.noise_std > 0.0 {
                p.noise_std * rng::normal(&mut noise)
            } else {
                0.0
            };
            image[c * h * w + i] = (rgb[c] + n).clamp(0.0, 1.0);
        }
    }
    Ok(Scene {
        seed,
        image: Tensor::from_f64(Shape::new(1, 3, h, w), &image)?,
        depth: DepthMap::new(Tensor::from_f64(Shape::new(1, 1, h, w), &depth)?)?,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl std::str::FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            _ => Err(Error::parse(s, "expected `train` or `test`")),
        }
    }
}

/// Seed of scene `i`. Train seeds are even and test seeds odd, so the two
/// splits never share a scene.
pub fn scene_seed(base: u64, split: Split, i: usize) -> u64 {
    let k = base.wrapping_add(i as u64).wrapping_mul(2);
    match split {
        Split::Train => k,
        Split::Test => k | 1,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub split: Split,
    pub base_seed: u64,
    pub params: SceneParams,
    pub seeds: Vec<u64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneSet {
    pub manifest: DatasetManifest,
    pub scenes: Vec<Scene>,
}

impl SceneSet {
    pub fn generate(base_seed: u64, count: usize, split: Split, params: SceneParams) -> Result<Self> {
        params.validate()?;
        let seeds: Vec<u64> = (0..count).map(|i| scene_seed(base_seed, split, i)).collect();
        let scenes = seeds
            .par_iter()
            .map(|&s| gen_scene(s, &params))
            .collect::<Result<Vec<_>>>()?;
        Ok(SceneSet {
            manifest: DatasetManifest {
                split,
                base_seed,
                params,
                seeds,
            },
            scenes,
        })
    }

    /// The other split generated from the same base seed and parameters.
    pub fn companion(&self, count: usize) -> Result<Self> {
        let split = match self.manifest.split {
            Split::Train => Split::Test,
            Split::Test => Split::Train,
        };
        Self::generate(self.manifest.base_seed, count, split, self.manifest.params.clone())
    }

    pub fn len(&self) -> usize {
        self.scenes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scenes.is_empty()
    }

    pub fn scene_dir(dir: &Path, seed: u64) -> std::path::PathBuf {
        dir.join("scenes").join(seed.to_string())
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        for scene in &self.scenes {
            let sd = Self::scene_dir(dir, scene.seed);
            std::fs::create_dir_all(&sd).map_err(|e| Error::io(&sd, e))?;
            gt01::write(&sd.join("image.gt01"), &scene.image)?;
            gt01::write(&sd.join("depth.gt01"), scene.depth.tensor())?;
        }
        io::write_json(&dir.join("manifest.json"), &self.manifest)
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let manifest: DatasetManifest = io::read_json(&dir.join("manifest.json"))?;
        manifest.params.validate()?;
        let (h, w) = (manifest.params.height, manifest.params.width);
        let scenes = manifest
            .seeds
            .iter()
            .map(|&seed| {
                let sd = Self::scene_dir(dir, seed);
                let image = gt01::read(&sd.join("image.gt01"))?;
                image.expect_shape(Shape::new(1, 3, h, w), "scene image")?;
                let depth = gt01::read(&sd.join("depth.gt01"))?;
                depth.expect_shape(Shape::new(1, 1, h, w), "scene depth")?;
                Ok(Scene {
                    seed,
                    image,
                    depth: DepthMap::new(depth)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(SceneSet { manifest, scenes })
    }
}
