use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::config::{ExperimentConfig, Task};
use super::data::matched_instance;
use super::predict::ScenePrediction;
use crate::error::{invalid, Result};
use crate::eval::{ap_r, ap_r_part, apk, part_iou, ConfusionMatrix, ImageCase, PRCurve, APK_TAU};
use crate::eval::paste_detections;
use crate::io::{FORMAT_VERSION, LIBRARY_VERSION};
use crate::synthdata::Scene;
use crate::tasks::{Detection, InstanceGT};

/// Metrics of one run. Contains no timings, so identical runs give
/// identical bytes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub version: u32,
    pub library: String,
    pub task: Task,
    pub config_hash: String,
    pub dataset_hash: String,
    pub test_scenes: usize,
    pub detections: usize,
    /// Per-image quality of the segmented detections that overlap an
    /// instance by at least the evaluation gate: mask IoU, part IoU or
    /// the fraction of correct keypoints.
    pub desk_metric: String,
    pub desk_mean: f64,
    pub desk_scenes: Vec<usize>,
    pub desk_per_image: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ap_r_05: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ap_r_07: Option<f64>,
    /// AP^r of the unrefined candidate masks, for reference.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub candidate_ap_r_05: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub candidate_ap_r_07: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ap_r_part_05: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ap_r_part_07: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub apk: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub apk_per_keypoint: Option<BTreeMap<String, f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean_iu: Option<f64>,
}

impl MetricReport {
    /// Scalar metrics in a fixed order.
    pub fn scalars(&self) -> Vec<(String, f64)> {
        let mut out = vec![
            ("detections".to_string(), self.detections as f64),
            (format!("desk_{}", self.desk_metric), self.desk_mean),
            ("desk_images".to_string(), self.desk_per_image.len() as f64),
        ];
        let opt = [
            ("ap_r_0.5", self.ap_r_05),
            ("ap_r_0.7", self.ap_r_07),
            ("candidate_ap_r_0.5", self.candidate_ap_r_05),
            ("candidate_ap_r_0.7", self.candidate_ap_r_07),
            ("ap_r_part_0.5", self.ap_r_part_05),
            ("ap_r_part_0.7", self.ap_r_part_07),
            ("apk", self.apk),
            ("mean_iu", self.mean_iu),
        ];
        out.extend(opt.into_iter().filter_map(|(k, v)| v.map(|v| (k.to_string(), v))));
        if let Some(per) = &self.apk_per_keypoint {
            out.extend(per.iter().map(|(k, v)| (format!("apk_{k}"), *v)));
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("metric,value\n");
        for (k, v) in self.scalars() {
            s.push_str(&format!("{k},{v}\n"));
        }
        s
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }
}

#[derive(Clone, Debug)]
pub struct Evaluation {
    pub report: MetricReport,
    /// Named PR curves for export.
    pub curves: Vec<(String, PRCurve)>,
}

fn desk_name(task: Task) -> &'static str {
    match task {
        Task::Sds | Task::System2 => "mask_iou",
        Task::Part => "part_iou",
        Task::Keypoint => "pck",
    }
}

/// Desk metric of one image; `None` when no segmented detection passes the gate.
fn desk_value(task: Task, dets: &[Detection], gts: &[InstanceGT], gate: f64) -> Result<Option<f64>> {
    let mut sum = 0.0;
    let mut n = 0usize;
    for d in dets {
        let Some(gi) = matched_instance(d, gts, gate)? else {
            continue;
        };
        let g = &gts[gi];
        match task {
            Task::Sds | Task::System2 => {
                let m = d.mask.as_ref().ok_or_else(|| invalid!("detection has no predicted mask"))?;
                sum += m.iou(&g.mask)?.0;
                n += 1;
            }
            Task::Part => {
                sum += part_iou(d, g)?;
                n += 1;
            }
            Task::Keypoint => {
                let preds = d.keypoints.as_deref().unwrap_or(&[]);
                for k in g.keypoints.iter().filter(|k| k.visible) {
                    let hit = preds
                        .iter()
                        .find(|p| p.name == k.name)
                        .is_some_and(|p| (p.x - k.x).hypot(p.y - k.y) <= APK_TAU * g.reference_length);
                    sum += f64::from(u8::from(hit));
                    n += 1;
                }
            }
        }
    }
    Ok((n > 0).then(|| sum / n as f64))
}

pub fn evaluate(config: &ExperimentConfig, scenes: &[Scene], predictions: &[ScenePrediction], dataset_hash: &str) -> Result<Evaluation> {
    if scenes.len() != predictions.len() {
        return Err(invalid!("{} scenes but {} predictions", scenes.len(), predictions.len()));
    }
    for (s, p) in scenes.iter().zip(predictions) {
        if s.index != p.scene {
            return Err(invalid!("prediction for scene {} paired with scene {}", p.scene, s.index));
        }
    }
    let task = config.task;
    let mut desk_scenes = Vec::new();
    let mut desk_per_image = Vec::new();
    for (s, p) in scenes.iter().zip(predictions) {
        if let Some(v) = desk_value(task, &p.segmented, &s.instances, config.sampling.eval_gate)? {
            desk_scenes.push(s.index);
            desk_per_image.push(v);
        }
    }
    let desk_mean = if desk_per_image.is_empty() {
        0.0
    } else {
        desk_per_image.iter().sum::<f64>() / desk_per_image.len() as f64
    };
    let cases: Vec<ImageCase> = scenes
        .iter()
        .zip(predictions)
        .map(|(s, p)| ImageCase {
            detections: p.detections(),
            instances: &s.instances,
        })
        .collect();
    let mut report = MetricReport {
        version: FORMAT_VERSION,
        library: LIBRARY_VERSION.into(),
        task,
        config_hash: config.hash()?,
        dataset_hash: dataset_hash.into(),
        test_scenes: scenes.len(),
        detections: cases.iter().map(|c| c.detections.len()).sum(),
        desk_metric: desk_name(task).into(),
        desk_mean,
        desk_scenes,
        desk_per_image,
        ap_r_05: None,
        ap_r_07: None,
        candidate_ap_r_05: None,
        candidate_ap_r_07: None,
        ap_r_part_05: None,
        ap_r_part_07: None,
        apk: None,
        apk_per_keypoint: None,
        mean_iu: None,
    };
    let mut curves = Vec::new();
    match task {
        Task::Sds | Task::System2 => {
            let a5 = ap_r(&cases, 0.5)?;
            report.ap_r_05 = Some(a5.ap);
            report.ap_r_07 = Some(ap_r(&cases, 0.7)?.ap);
            curves.push(("ap_r_0.5".to_string(), a5.curve));
            let mut cm = ConfusionMatrix::new(2);
            for (s, c) in scenes.iter().zip(&cases) {
                let (h, w) = (s.image.height(), s.image.width());
                cm.add(&paste_detections(c.detections, h, w)?, &instance_labels(&s.instances, h, w)?)?;
            }
            report.mean_iu = Some(cm.mean_iu().mean);
            if task == Task::Sds {
                let baseline: Vec<Vec<Detection>> = predictions
                    .iter()
                    .map(|p| {
                        p.segmented
                            .iter()
                            .map(|d| {
                                let mut b = d.clone();
                                b.mask = d.candidate_mask.clone();
                                b
                            })
                            .collect()
                    })
                    .collect();
                let base_cases: Vec<ImageCase> = scenes
                    .iter()
                    .zip(&baseline)
                    .map(|(s, b)| ImageCase {
                        detections: b,
                        instances: &s.instances,
                    })
                    .collect();
                if baseline.iter().flatten().all(|d| d.mask.is_some()) {
                    report.candidate_ap_r_05 = Some(ap_r(&base_cases, 0.5)?.ap);
                    report.candidate_ap_r_07 = Some(ap_r(&base_cases, 0.7)?.ap);
                }
            }
        }
        Task::Part => {
            let a5 = ap_r_part(&cases, 0.5)?;
            report.ap_r_part_05 = Some(a5.ap);
            report.ap_r_part_07 = Some(ap_r_part(&cases, 0.7)?.ap);
            curves.push(("ap_r_part_0.5".to_string(), a5.curve));
            report.ap_r_05 = Some(ap_r(&cases, 0.5)?.ap);
            report.ap_r_07 = Some(ap_r(&cases, 0.7)?.ap);
        }
        Task::Keypoint => {
            let k = apk(&cases, APK_TAU)?;
            report.apk = Some(k.mean);
            report.apk_per_keypoint = Some(k.per_keypoint);
        }
    }
    Ok(Evaluation { report, curves })
}

/// Ground-truth label image: each instance pixel carries its category.
pub fn instance_labels(instances: &[InstanceGT], height: usize, width: usize) -> Result<Vec<u16>> {
    let mut out = vec![0u16; height * width];
    for g in instances {
        if (g.mask.height(), g.mask.width()) != (height, width) {
            return Err(invalid!("instance mask does not match the {height}x{width} image"));
        }
        let label = u16::try_from(g.category).map_err(|_| invalid!("category {} too large", g.category))?;
        for (k, &b) in g.mask.bits().iter().enumerate() {
            if b {
                out[k] = label;
            }
        }
    }
    Ok(out)
}
