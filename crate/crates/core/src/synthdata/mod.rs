//! Seeded synthetic scenes of articulated stick figures with instance masks,
//! part masks, keypoints, superpixels and noisy region candidates.

mod candidates;
mod figure;
mod store;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::tasks::{InstanceGT, Superpixels};
use crate::tensor::FeatureMap;

pub use candidates::{perturb_candidates, Candidate, CandidateNoise, IouHistogram};
pub use figure::{KEYPOINT_NAMES, PART_NAMES};
pub use store::{dataset_hash, load_dataset, save_dataset, Dataset, DatasetStats, Manifest};

pub const CATEGORY: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneConfig {
    pub height: usize,
    pub width: usize,
    /// Inclusive range of figures per scene.
    pub instances: (usize, usize),
    /// Range of figure heights in pixels.
    pub figure_height: (f64, f64),
    /// Inclusive range of clutter shapes per scene.
    pub clutter: (usize, usize),
    /// Standard deviation of additive pixel noise.
    pub noise: f64,
    pub invisible_rate: f64,
    pub superpixel_cell: usize,
    pub seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            height: 96,
            width: 96,
            instances: (1, 3),
            figure_height: (32.0, 52.0),
            clutter: (1, 4),
            noise: 0.15,
            invisible_rate: 0.1,
            superpixel_cell: 4,
            seed: 0,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.height < 16 || self.width < 16 {
            return Err(invalid!("scenes must be at least 16x16, got {}x{}", self.height, self.width));
        }
        let (lo, hi) = self.instances;
        if lo == 0 || lo > hi {
            return Err(invalid!("instance range ({lo}, {hi}) must satisfy 1 <= lo <= hi"));
        }
        let (fl, fh) = self.figure_height;
        if !(fl >= 10.0 && fl <= fh && fh <= self.height as f64 - 4.0) {
            return Err(invalid!(
                "figure heights ({fl}, {fh}) must lie in [10, {}] and be ordered",
                self.height - 4
            ));
        }
        if self.clutter.0 > self.clutter.1 {
            return Err(invalid!("clutter range ({}, {}) is reversed", self.clutter.0, self.clutter.1));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(invalid!("noise level must be finite and non-negative"));
        }
        if !(0.0..=1.0).contains(&self.invisible_rate) {
            return Err(invalid!("invisible rate must lie in [0, 1]"));
        }
        if self.superpixel_cell == 0 {
            return Err(invalid!("superpixel cell size must be positive"));
        }
        Ok(())
    }

    /// Widest figure allowed, so a shift by one figure width always fits.
    pub fn max_figure_width(&self) -> f64 {
        self.width as f64 / 3.0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub index: usize,
    pub image: FeatureMap,
    pub instances: Vec<InstanceGT>,
    pub superpixels: Superpixels,
}

pub(crate) fn stream_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

const PLACEMENT_TRIES: usize = 200;

pub fn generate_scene(config: &SceneConfig, index: usize) -> Result<Scene> {
    config.validate()?;
    let (h, w) = (config.height, config.width);
    let mut rng = stream_rng(config.seed, index);
    let target = rng.gen_range(config.instances.0..=config.instances.1);
    let mut image = vec![0.0; h * w];
    for _ in 0..rng.gen_range(config.clutter.0..=config.clutter.1) {
        let (shape, value) = figure::clutter_shape(&mut rng, h, w);
        figure::paint(&mut image, h, w, &shape, value);
    }

    let mut placed: Vec<(f64, f64, f64, f64)> = Vec::new();
    let mut instances = Vec::new();
    for _ in 0..PLACEMENT_TRIES {
        if instances.len() == target {
            break;
        }
        let size = rng.gen_range(config.figure_height.0..=config.figure_height.1);
        let fig = figure::Figure::sample(&mut rng, size);
        let (x0, y0, x1, y1) = fig.extent();
        if x1 - x0 > config.max_figure_width() {
            continue;
        }
        let dx = rng.gen_range(1.0 - x0..=(w as f64 - 1.0 - x1).max(1.0 - x0));
        let dy = rng.gen_range(1.0 - y0..=(h as f64 - 1.0 - y1).max(1.0 - y0));
        let ext = (x0 + dx, y0 + dy, x1 + dx, y1 + dy);
        if ext.0 < 1.0 || ext.1 < 1.0 || ext.2 > w as f64 - 1.0 || ext.3 > h as f64 - 1.0 {
            continue;
        }
        let margin = 2.0;
        if placed
            .iter()
            .any(|p| ext.0 < p.2 + margin && p.0 < ext.2 + margin && ext.1 < p.3 + margin && p.1 < ext.3 + margin)
        {
            continue;
        }
        let fig = fig.shift(dx, dy);
        let (mask, parts, shade) = fig.rasterize(h, w);
        if !mask.is_connected() || parts.values().filter(|m| !m.is_empty()).count() < 2 {
            continue;
        }
        for (v, s) in image.iter_mut().zip(&shade) {
            if let Some(s) = s {
                *v = *s;
            }
        }
        placed.push(ext);
        instances.push(InstanceGT {
            category: CATEGORY,
            mask,
            parts,
            keypoints: fig.keypoints(&mut rng, config.invisible_rate),
            reference_length: fig.torso_length,
        });
    }
    if instances.is_empty() {
        return Err(invalid!("could not place any figure in scene {index}"));
    }
    if config.noise > 0.0 {
        let normal = Normal::new(0.0, config.noise).expect("validated noise level");
        for v in &mut image {
            *v += normal.sample(&mut rng);
        }
    }
    Ok(Scene {
        index,
        image: FeatureMap::new(h, w, 1, image)?,
        instances,
        superpixels: Superpixels::grid(h, w, config.superpixel_cell)?,
    })
}

/// Scenes `0..count`; each depends only on the config and its index.
pub fn generate(config: &SceneConfig, count: usize) -> Result<Vec<Scene>> {
    generate_range(config, 0, count)
}

pub fn generate_range(config: &SceneConfig, start: usize, count: usize) -> Result<Vec<Scene>> {
    if count == 0 {
        return Err(invalid!("scene count must be at least 1"));
    }
    config.validate()?;
    (start..start + count).into_par_iter().map(|i| generate_scene(config, i)).collect()
}
