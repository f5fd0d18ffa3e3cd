//! Dataset directory: `manifest.json`, `images/NNNNN.hcfm`,
//! `annotations.jsonl` (one line per scene) and `candidates.jsonl`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{generate, perturb_candidates, Candidate, CandidateNoise, IouHistogram, Scene, SceneConfig};
use crate::error::{Error, Result};
use crate::io::{config_hash, read_json, read_jsonl, read_map_file, write_json, write_jsonl, write_map_file, FORMAT_VERSION, LIBRARY_VERSION};
use crate::tasks::{InstanceGT, Superpixels};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub scenes: usize,
    pub instances: usize,
    pub mean_instance_area: f64,
    pub min_instance_area: usize,
    pub max_instance_area: usize,
    pub candidate_iou: IouHistogram,
}

impl DatasetStats {
    pub fn compute(scenes: &[Scene], candidates: &[Vec<Candidate>]) -> Self {
        let areas: Vec<usize> = scenes.iter().flat_map(|s| s.instances.iter().map(|g| g.mask.count())).collect();
        let mut hist = IouHistogram::default();
        for c in candidates.iter().flatten() {
            hist.add(c.iou);
        }
        Self {
            scenes: scenes.len(),
            instances: areas.len(),
            mean_instance_area: areas.iter().sum::<usize>() as f64 / areas.len().max(1) as f64,
            min_instance_area: areas.iter().copied().min().unwrap_or(0),
            max_instance_area: areas.iter().copied().max().unwrap_or(0),
            candidate_iou: hist,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub library: String,
    pub scene: SceneConfig,
    pub noise: CandidateNoise,
    pub count: usize,
    pub config_hash: String,
    pub stats: DatasetStats,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub manifest: Manifest,
    pub scenes: Vec<Scene>,
    pub candidates: Vec<Vec<Candidate>>,
}

#[derive(Serialize, Deserialize)]
struct AnnotationLine {
    version: u32,
    scene: usize,
    instances: Vec<InstanceGT>,
}

#[derive(Serialize, Deserialize)]
struct CandidateLine {
    version: u32,
    scene: usize,
    candidates: Vec<Candidate>,
}

pub fn dataset_hash(scene: &SceneConfig, noise: &CandidateNoise, count: usize) -> Result<String> {
    config_hash(&(scene, noise, count))
}

impl Dataset {
    pub fn build(scene: &SceneConfig, noise: &CandidateNoise, count: usize) -> Result<Self> {
        let scenes = generate(scene, count)?;
        let candidates = scenes
            .iter()
            .map(|s| perturb_candidates(s, noise))
            .collect::<Result<Vec<_>>>()?;
        let manifest = Manifest {
            version: FORMAT_VERSION,
            library: LIBRARY_VERSION.into(),
            scene: scene.clone(),
            noise: noise.clone(),
            count,
            config_hash: dataset_hash(scene, noise, count)?,
            stats: DatasetStats::compute(&scenes, &candidates),
        };
        Ok(Self {
            manifest,
            scenes,
            candidates,
        })
    }
}

pub fn save_dataset(dataset: &Dataset, dir: &Path) -> Result<()> {
    for s in &dataset.scenes {
        write_map_file(&dir.join("images").join(format!("{:05}.hcfm", s.index)), &s.image)?;
    }
    let ann: Vec<AnnotationLine> = dataset
        .scenes
        .iter()
        .map(|s| AnnotationLine {
            version: FORMAT_VERSION,
            scene: s.index,
            instances: s.instances.clone(),
        })
        .collect();
    write_jsonl(&dir.join("annotations.jsonl"), &ann)?;
    let cand: Vec<CandidateLine> = dataset
        .scenes
        .iter()
        .zip(&dataset.candidates)
        .map(|(s, c)| CandidateLine {
            version: FORMAT_VERSION,
            scene: s.index,
            candidates: c.clone(),
        })
        .collect();
    write_jsonl(&dir.join("candidates.jsonl"), &cand)?;
    write_json(&dir.join("manifest.json"), &dataset.manifest)
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let manifest: Manifest = read_json(&dir.join("manifest.json"))?;
    if manifest.version != FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported dataset version {}", manifest.version)));
    }
    let expected = dataset_hash(&manifest.scene, &manifest.noise, manifest.count)?;
    if expected != manifest.config_hash {
        return Err(Error::HashMismatch {
            expected,
            found: manifest.config_hash,
        });
    }
    let ann: Vec<AnnotationLine> = read_jsonl(&dir.join("annotations.jsonl"))?;
    let cand: Vec<CandidateLine> = read_jsonl(&dir.join("candidates.jsonl"))?;
    if ann.len() != manifest.count || cand.len() != manifest.count {
        return Err(Error::Format(format!(
            "manifest lists {} scenes, found {} annotation and {} candidate lines",
            manifest.count,
            ann.len(),
            cand.len()
        )));
    }
    let (h, w) = (manifest.scene.height, manifest.scene.width);
    let mut scenes = Vec::with_capacity(ann.len());
    let mut candidates = Vec::with_capacity(ann.len());
    for (a, c) in ann.into_iter().zip(cand) {
        if a.version != FORMAT_VERSION || c.version != FORMAT_VERSION || a.scene != c.scene {
            return Err(Error::Format(format!("inconsistent records for scene {}", a.scene)));
        }
        let image = read_map_file(&dir.join("images").join(format!("{:05}.hcfm", a.scene)))?;
        if image.shape() != (h, w, 1) {
            return Err(Error::Format(format!("scene {} image has shape {:?}", a.scene, image.shape())));
        }
        scenes.push(Scene {
            index: a.scene,
            image,
            instances: a.instances,
            superpixels: Superpixels::grid(h, w, manifest.scene.superpixel_cell)?,
        });
        candidates.push(c.candidates);
    }
    Ok(Dataset {
        manifest,
        scenes,
        candidates,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_on_disk() {
        let dir = tempfile::tempdir().unwrap();
        let d = Dataset::build(&SceneConfig::default(), &CandidateNoise::default(), 3).unwrap();
        save_dataset(&d, dir.path()).unwrap();
        let back = load_dataset(dir.path()).unwrap();
        assert_eq!(back.manifest, d.manifest);
        assert_eq!(back.scenes, d.scenes);
        assert_eq!(back.candidates, d.candidates);
        assert!(d.manifest.stats.candidate_iou.total() > 0);
    }

    #[test]
    fn tampered_manifest_detected() {
        let dir = tempfile::tempdir().unwrap();
        let d = Dataset::build(&SceneConfig::default(), &CandidateNoise::default(), 1).unwrap();
        save_dataset(&d, dir.path()).unwrap();
        let mut m = d.manifest.clone();
        m.count = 2;
        write_json(&dir.path().join("manifest.json"), &m).unwrap();
        assert!(matches!(load_dataset(dir.path()), Err(Error::HashMismatch { .. })));
    }
}
