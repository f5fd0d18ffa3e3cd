use rand::seq::index::sample;
use rand::Rng;

use super::config::{ExperimentConfig, Task};
use crate::error::{invalid, Error, Result};
use crate::synthdata::{dataset_hash, Candidate, Dataset, Scene, KEYPOINT_NAMES, PART_NAMES};
use crate::tasks::{
    area_sample, best_match, crop_resize, make_keypoint_target, make_part_target, make_sds_target, Detection,
    ExpandedBox, InstanceGT, Label, TargetHeatmap,
};
use crate::tensor::FeatureMap;

/// Train and test scenes with their candidates. Test scenes follow the
/// training scenes in index order.
#[derive(Clone, Debug)]
pub struct Splits {
    pub train: Vec<Scene>,
    pub train_candidates: Vec<Vec<Candidate>>,
    pub test: Vec<Scene>,
    pub test_candidates: Vec<Vec<Candidate>>,
    pub dataset_hash: String,
}

impl Splits {
    pub fn generate(config: &ExperimentConfig) -> Result<Self> {
        let d = &config.data;
        let dataset = Dataset::build(&d.scene, &d.noise, d.train_scenes + d.test_scenes)?;
        Self::from_dataset(config, dataset, false)
    }

    /// Split a loaded dataset; unless `force`, it must have been generated
    /// from the config's data section.
    pub fn from_dataset(config: &ExperimentConfig, dataset: Dataset, force: bool) -> Result<Self> {
        let expected = config.dataset_hash()?;
        if !force && dataset.manifest.config_hash != expected {
            return Err(Error::HashMismatch {
                expected,
                found: dataset.manifest.config_hash,
            });
        }
        let (n_train, n_test) = (config.data.train_scenes, config.data.test_scenes);
        if dataset.scenes.len() < n_train + n_test {
            return Err(invalid!(
                "dataset has {} scenes, config needs {} train + {} test",
                dataset.scenes.len(),
                n_train,
                n_test
            ));
        }
        let mut scenes = dataset.scenes;
        let mut candidates = dataset.candidates;
        scenes.truncate(n_train + n_test);
        candidates.truncate(n_train + n_test);
        let test = scenes.split_off(n_train);
        let test_candidates = candidates.split_off(n_train);
        Ok(Self {
            train: scenes,
            train_candidates: candidates,
            test,
            test_candidates,
            dataset_hash: dataset.manifest.config_hash,
        })
    }
}

impl ExperimentConfig {
    /// Hash stored in the manifest of the dataset this config generates.
    pub fn dataset_hash(&self) -> Result<String> {
        let d = &self.data;
        dataset_hash(&d.scene, &d.noise, d.train_scenes + d.test_scenes)
    }
}

/// Detections as the task sees them: System 2 works from boxes only.
pub fn task_detections(task: Task, candidates: &[Candidate]) -> Vec<Detection> {
    candidates
        .iter()
        .map(|c| {
            let mut d = c.detection.clone();
            if task == Task::System2 {
                d.candidate_mask = None;
            }
            d
        })
        .collect()
}

/// The region a detection is analysed in, resampled for the backbone.
#[derive(Clone, Debug)]
pub struct Crop {
    pub rect: ExpandedBox,
    pub image: FeatureMap,
    /// Candidate mask coverage on the `R × R` grid, when the spec uses it.
    pub candidate: Option<FeatureMap>,
}

pub fn make_crop(config: &ExperimentConfig, scene: &Scene, det: &Detection) -> Result<Crop> {
    let (h, w) = (scene.image.height(), scene.image.width());
    let rect = ExpandedBox::new(&det.bbox, config.targets.expansion, h, w)?;
    let image = crop_resize(&scene.image, &rect, config.backbone.input_size)?;
    let candidate = if config.hypercolumn.aux.needs_candidate() {
        let m = det
            .candidate_mask
            .as_ref()
            .ok_or_else(|| invalid!("spec uses candidate features but the detection has no candidate mask"))?;
        Some(area_sample(m, &rect, config.hypercolumn.resolution)?)
    } else {
        None
    };
    Ok(Crop { rect, image, candidate })
}

pub const FIGURE: &str = "figure";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HeadKind<'a> {
    Figure,
    Part(&'a str),
    Keypoint(&'a str),
}

pub fn head_names(task: Task) -> Vec<String> {
    match task {
        Task::Sds | Task::System2 => vec![FIGURE.into()],
        Task::Part => std::iter::once(FIGURE.to_string())
            .chain(PART_NAMES.iter().map(|p| format!("part:{p}")))
            .collect(),
        Task::Keypoint => KEYPOINT_NAMES.iter().map(|k| format!("kp:{k}")).collect(),
    }
}

pub fn head_kind(name: &str) -> Result<HeadKind<'_>> {
    if name == FIGURE {
        return Ok(HeadKind::Figure);
    }
    if let Some(p) = name.strip_prefix("part:") {
        return Ok(HeadKind::Part(p));
    }
    if let Some(k) = name.strip_prefix("kp:") {
        return Ok(HeadKind::Keypoint(k));
    }
    Err(invalid!("unknown head {name:?}"))
}

/// Training target of one head for a detection matched to `gt`; `None`
/// when the instance gives no label (invisible or out-of-box keypoint).
pub fn head_target(name: &str, det: &Detection, gt: &InstanceGT, config: &ExperimentConfig) -> Result<Option<TargetHeatmap>> {
    match head_kind(name)? {
        HeadKind::Figure => make_sds_target(det, gt, &config.targets).map(Some),
        HeadKind::Part(p) => make_part_target(det, gt, p, &config.targets).map(Some),
        HeadKind::Keypoint(k) => match make_keypoint_target(det, gt, k, &config.targets) {
            Err(Error::Precondition(_)) => Ok(None),
            other => other,
        },
    }
}

/// Instance a detection is matched to for training (gate from the target
/// config) or evaluation (any other gate).
pub fn matched_instance(det: &Detection, gts: &[InstanceGT], gate: f64) -> Result<Option<usize>> {
    Ok(best_match(det, gts)?.filter(|&(_, o)| o >= gate).map(|(i, _)| i))
}

/// Labeled pixels to train on. Targets with ignored pixels (keypoints) keep
/// every positive and fill up with negatives; others are sampled uniformly.
pub fn sample_pixels(target: &TargetHeatmap, n: usize, rng: &mut impl Rng) -> Vec<(usize, usize, bool)> {
    let r = target.resolution;
    let at = |i: usize| (i / r, i % r);
    let labeled: Vec<usize> = (0..r * r).filter(|&i| target.labels[i] != Label::Ignore).collect();
    let pick = |pool: &[usize], k: usize, rng: &mut _| -> Vec<usize> {
        let mut idx: Vec<usize> = sample(rng, pool.len(), k.min(pool.len())).into_iter().map(|j| pool[j]).collect();
        idx.sort_unstable();
        idx
    };
    let chosen = if target.count(Label::Ignore) > 0 {
        let pos: Vec<usize> = labeled.iter().copied().filter(|&i| target.labels[i] == Label::Positive).collect();
        let neg: Vec<usize> = labeled.iter().copied().filter(|&i| target.labels[i] == Label::Negative).collect();
        let mut out = pos.clone();
        out.extend(pick(&neg, n.saturating_sub(pos.len()), rng));
        out
    } else {
        pick(&labeled, n, rng)
    };
    chosen
        .into_iter()
        .map(|i| {
            let (y, x) = at(i);
            (y, x, target.labels[i] == Label::Positive)
        })
        .collect()
}
