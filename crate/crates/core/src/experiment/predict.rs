use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::{ExperimentConfig, Task};
use super::data::{head_kind, make_crop, task_detections, Crop, HeadKind, FIGURE};
use super::model::Model;
use super::train::rescore_features;
use crate::error::{invalid, Result};
use crate::heatmap::Heatmap;
use crate::io::FORMAT_VERSION;
use crate::synthdata::{Candidate, Scene};
use crate::tasks::{
    expand_pool, nms, predict_keypoint, predict_mask, predict_parts, splat, Detection, KeypointPrediction, OverlapKind,
    FINAL_NMS, LENIENT_NMS,
};

/// Predictions for one test scene.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenePrediction {
    pub version: u32,
    pub scene: usize,
    /// Every detection that was segmented: all candidates, or the expanded
    /// pool for System 2.
    pub segmented: Vec<Detection>,
    /// Rescored detections surviving the final mask NMS (System 2 only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub final_detections: Option<Vec<Detection>>,
}

impl ScenePrediction {
    /// Detections that are scored by the metrics.
    pub fn detections(&self) -> &[Detection] {
        self.final_detections.as_deref().unwrap_or(&self.segmented)
    }
}

pub struct Segmented {
    pub detection: Detection,
    pub features: Vec<f64>,
}

/// Fill in the predicted mask, parts and keypoints of one detection.
pub fn analyse(
    config: &ExperimentConfig,
    model: &Model,
    scene: &Scene,
    det: &Detection,
) -> Result<(Detection, Crop, BTreeMap<String, Heatmap>)> {
    let crop = make_crop(config, scene, det)?;
    let heat = model.heatmaps(&crop)?;
    let (h, w) = (scene.image.height(), scene.image.width());
    let sp = config.superpixels.then_some(&scene.superpixels);
    let mut out = det.clone();
    if let Some(fig) = heat.get(FIGURE) {
        out.mask = Some(predict_mask(fig, &crop.rect, h, w, sp)?);
    }
    let mut parts = BTreeMap::new();
    let mut keypoints = Vec::new();
    for (name, hm) in &heat {
        match head_kind(name)? {
            HeadKind::Figure => {}
            HeadKind::Part(p) => {
                parts.insert(p.to_string(), splat(hm, &crop.rect, h, w)?);
            }
            HeadKind::Keypoint(k) => {
                let (x, y, score) = predict_keypoint(hm, &crop.rect, det.score);
                keypoints.push(KeypointPrediction {
                    name: k.to_string(),
                    x,
                    y,
                    score,
                });
            }
        }
    }
    if !parts.is_empty() {
        let mask = out
            .mask
            .as_ref()
            .ok_or_else(|| invalid!("part labelling needs the figure head"))?;
        out.parts = Some(predict_parts(mask, &parts)?);
    }
    if !keypoints.is_empty() {
        out.keypoints = Some(keypoints);
    }
    Ok((out, crop, heat))
}

fn segment(config: &ExperimentConfig, model: &Model, scene: &Scene, dets: &[Detection]) -> Result<Vec<Segmented>> {
    dets.iter()
        .map(|d| {
            let (detection, _, heat) = analyse(config, model, scene, d)?;
            let features = heat
                .get(FIGURE)
                .map(|f| rescore_features(d.score, f.values()))
                .unwrap_or_else(|| vec![d.score]);
            Ok(Segmented { detection, features })
        })
        .collect()
}

/// Detections of a scene the task segments, in order.
pub fn scene_detections(config: &ExperimentConfig, candidates: &[Candidate]) -> Result<Vec<Detection>> {
    let all = task_detections(config.task, candidates);
    if config.task != Task::System2 {
        return Ok(all);
    }
    let floor = config
        .system2
        .score_floor
        .ok_or_else(|| invalid!("system2 needs a score floor"))?;
    let kept = nms(&all, config.system2.detector_nms, OverlapKind::Box)?;
    let pool = expand_pool(&all, &kept, floor, LENIENT_NMS)?;
    Ok(pool.into_iter().map(|i| all[i].clone()).collect())
}

pub fn segment_scene(config: &ExperimentConfig, model: &Model, scene: &Scene, candidates: &[Candidate]) -> Result<Vec<Segmented>> {
    segment(config, model, scene, &scene_detections(config, candidates)?)
}

pub fn predict_scene(config: &ExperimentConfig, model: &Model, scene: &Scene, candidates: &[Candidate]) -> Result<ScenePrediction> {
    let seg = segment_scene(config, model, scene, candidates)?;
    let final_detections = match &model.rescorer {
        Some(r) if config.task == Task::System2 => {
            let rescored: Vec<Detection> = seg
                .iter()
                .map(|s| {
                    let mut d = s.detection.clone();
                    d.score = r.score(&s.features);
                    d
                })
                .collect();
            let keep = nms(&rescored, FINAL_NMS, OverlapKind::Mask)?;
            Some(keep.into_iter().map(|i| rescored[i].clone()).collect())
        }
        _ => None,
    };
    Ok(ScenePrediction {
        version: FORMAT_VERSION,
        scene: scene.index,
        segmented: seg.into_iter().map(|s| s.detection).collect(),
        final_detections,
    })
}

pub fn predict_all(config: &ExperimentConfig, model: &Model, scenes: &[Scene], candidates: &[Vec<Candidate>]) -> Result<Vec<ScenePrediction>> {
    if scenes.len() != candidates.len() {
        return Err(invalid!("{} scenes but {} candidate lists", scenes.len(), candidates.len()));
    }
    scenes
        .par_iter()
        .zip(candidates)
        .map(|(s, c)| predict_scene(config, model, s, c))
        .collect()
}
