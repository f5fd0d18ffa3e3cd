//! Trained heads sharing one backbone, plus the System 2 rescorer.
//!
//! On disk a model is a directory: `manifest.json` and one checkpoint per
//! head under `heads/`.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::{ExperimentConfig, Task};
use super::data::Crop;
use crate::backbone::BackboneState;
use crate::error::{shape_err, Error, Result};
use crate::grid::{grid_interp, predict_grid, ClassifierGrid, GridInterp};
use crate::heatmap::Heatmap;
use crate::hypercolumn::BlockLayout;
use crate::hypernet::HyperNet;
use crate::io::{load_grid_model, CheckpointKind, load_hypernet, read_json, save_grid_model, save_hypernet, write_json, FORMAT_VERSION, LIBRARY_VERSION};
use crate::tensor::dot;

#[derive(Clone, Debug)]
pub enum Head {
    Grid(ClassifierGrid),
    Net(Box<HyperNet>),
}

impl Head {
    pub fn layout(&self) -> &BlockLayout {
        match self {
            Head::Grid(g) => &g.layout,
            Head::Net(n) => &n.layout,
        }
    }

    pub fn k(&self) -> usize {
        match self {
            Head::Grid(g) => g.k,
            Head::Net(n) => n.k,
        }
    }
}

/// Logistic rescoring of segmented detections.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Rescorer {
    pub weights: Vec<f64>,
    pub bias: f64,
    pub positives: usize,
    pub negatives: usize,
}

impl Rescorer {
    pub fn score(&self, features: &[f64]) -> f64 {
        dot(&self.weights, features) + self.bias
    }
}

#[derive(Clone, Debug)]
pub struct Model {
    pub task: Task,
    pub config_hash: String,
    pub dataset_hash: String,
    pub backbone: BackboneState,
    pub heads: BTreeMap<String, Head>,
    pub rescorer: Option<Rescorer>,
    pub finetune_traces: BTreeMap<String, Vec<f64>>,
    interps: BTreeMap<usize, GridInterp>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelManifest {
    pub version: u32,
    pub library: String,
    pub task: Task,
    pub config_hash: String,
    pub dataset_hash: String,
    pub heads: BTreeMap<String, HeadEntry>,
    #[serde(default)]
    pub rescorer: Option<Rescorer>,
    #[serde(default)]
    pub finetune_traces: BTreeMap<String, Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadEntry {
    /// Checkpoint path relative to the model directory.
    pub file: String,
    pub kind: CheckpointKind,
}

fn head_file(name: &str) -> String {
    let safe: String = name
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '_' { c } else { '-' })
        .collect();
    format!("heads/{safe}.hcck")
}

impl Model {
    pub fn new(
        task: Task,
        config_hash: String,
        dataset_hash: String,
        backbone: BackboneState,
        heads: BTreeMap<String, Head>,
    ) -> Self {
        let mut interps = BTreeMap::new();
        for h in heads.values() {
            if let Head::Grid(g) = h {
                interps.entry(g.k).or_insert_with(|| grid_interp(g.k, g.spec.resolution));
            }
        }
        Self {
            task,
            config_hash,
            dataset_hash,
            backbone,
            heads,
            rescorer: None,
            finetune_traces: BTreeMap::new(),
            interps,
        }
    }

    /// Heatmap of every head for one detection crop.
    pub fn heatmaps(&self, crop: &Crop) -> Result<BTreeMap<String, Heatmap>> {
        let needs_taps = self.heads.values().any(|h| matches!(h, Head::Grid(_)));
        let taps = if needs_taps {
            Some(self.backbone.infer(&crop.image)?.0)
        } else {
            None
        };
        let mut out = BTreeMap::new();
        for (name, head) in &self.heads {
            let heat = match head {
                Head::Grid(g) => predict_grid(
                    g,
                    taps.as_ref().expect("taps computed for grid heads"),
                    &self.interps[&g.k],
                    crop.candidate.as_ref(),
                )?,
                Head::Net(n) => n.predict(&crop.image, crop.candidate.as_ref())?,
            };
            out.insert(name.clone(), heat);
        }
        Ok(out)
    }

    /// Every head must have been trained on the descriptor layout the
    /// config describes.
    pub fn check_layout(&self, config: &ExperimentConfig) -> Result<()> {
        let expected = BlockLayout::new(&config.hypercolumn, &self.backbone.tap_shapes())?;
        for (name, h) in &self.heads {
            let got = h.layout();
            if got != &expected {
                return Err(shape_err!(
                    "head {name:?} has descriptor dimension {} with blocks [{}]; config expects dimension {} with blocks [{}]",
                    got.dim,
                    got.describe(),
                    expected.dim,
                    expected.describe()
                ));
            }
        }
        Ok(())
    }

    pub fn manifest(&self) -> ModelManifest {
        ModelManifest {
            version: FORMAT_VERSION,
            library: LIBRARY_VERSION.into(),
            task: self.task,
            config_hash: self.config_hash.clone(),
            dataset_hash: self.dataset_hash.clone(),
            heads: self
                .heads
                .iter()
                .map(|(n, h)| {
                    let kind = match h {
                        Head::Grid(_) => CheckpointKind::Grid,
                        Head::Net(_) => CheckpointKind::Hypernet,
                    };
                    (n.clone(), HeadEntry { file: head_file(n), kind })
                })
                .collect(),
            rescorer: self.rescorer.clone(),
            finetune_traces: self.finetune_traces.clone(),
        }
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let manifest = self.manifest();
        for (name, head) in &self.heads {
            let path = dir.join(&manifest.heads[name].file);
            match head {
                Head::Grid(g) => save_grid_model(&path, &self.backbone, g, &self.config_hash)?,
                Head::Net(n) => save_hypernet(&path, n, &self.config_hash)?,
            }
        }
        write_json(&dir.join("manifest.json"), &manifest)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest: ModelManifest = read_json(&dir.join("manifest.json"))?;
        if manifest.version != FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported model version {}", manifest.version)));
        }
        let mut backbone = None;
        let mut heads = BTreeMap::new();
        for (name, entry) in &manifest.heads {
            let path = dir.join(&entry.file);
            let (header, head, bb) = match entry.kind {
                CheckpointKind::Grid => {
                    let (header, bb, grid) = load_grid_model(&path)?;
                    (header, Head::Grid(grid), bb)
                }
                CheckpointKind::Hypernet => {
                    let (header, net) = load_hypernet(&path)?;
                    let bb = net.backbone.clone();
                    (header, Head::Net(Box::new(net)), bb)
                }
            };
            if header.config_hash != manifest.config_hash {
                return Err(Error::HashMismatch {
                    expected: manifest.config_hash.clone(),
                    found: header.config_hash,
                });
            }
            backbone.get_or_insert(bb);
            heads.insert(name.clone(), head);
        }
        let backbone = backbone.ok_or_else(|| Error::Format("model has no heads".into()))?;
        let mut model = Model::new(manifest.task, manifest.config_hash, manifest.dataset_hash, backbone, heads);
        model.rescorer = manifest.rescorer;
        model.finetune_traces = manifest.finetune_traces;
        Ok(model)
    }
}
