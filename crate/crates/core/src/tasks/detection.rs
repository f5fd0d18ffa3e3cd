use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::geometry::{BoundingBox, LabelImage, Mask};
use crate::error::{invalid, Error, Result};
use crate::hypernet::Label;

pub const LENIENT_NMS: f64 = 0.7;
pub const FINAL_NMS: f64 = 0.3;
pub const RESCORE_POSITIVE: f64 = 0.7;
pub const RESCORE_NEGATIVE: f64 = 0.5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Keypoint {
    pub name: String,
    pub x: f64,
    pub y: f64,
    pub visible: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KeypointPrediction {
    pub name: String,
    pub x: f64,
    pub y: f64,
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub category: u32,
    #[serde(rename = "box")]
    pub bbox: BoundingBox,
    pub score: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub candidate_mask: Option<Mask>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask: Option<Mask>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub keypoints: Option<Vec<KeypointPrediction>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parts: Option<LabelImage>,
}

impl Detection {
    pub fn new(category: u32, bbox: BoundingBox, score: f64) -> Self {
        Self {
            category,
            bbox,
            score,
            candidate_mask: None,
            mask: None,
            keypoints: None,
            parts: None,
        }
    }

    /// The predicted mask if present, otherwise the candidate mask.
    pub fn region(&self) -> Option<&Mask> {
        self.mask.as_ref().or(self.candidate_mask.as_ref())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InstanceGT {
    pub category: u32,
    pub mask: Mask,
    /// Named part masks; each is a subset of `mask`.
    pub parts: BTreeMap<String, Mask>,
    pub keypoints: Vec<Keypoint>,
    pub reference_length: f64,
}

impl InstanceGT {
    pub fn bbox(&self) -> Option<BoundingBox> {
        self.mask.bbox()
    }

    pub fn keypoint(&self, name: &str) -> Option<&Keypoint> {
        self.keypoints.iter().find(|k| k.name == name)
    }

    /// Part labels over the whole image, names in sorted order.
    pub fn part_image(&self) -> LabelImage {
        let names: Vec<String> = self.parts.keys().cloned().collect();
        let (h, w) = (self.mask.height(), self.mask.width());
        let mut labels = vec![0u16; h * w];
        for (i, m) in self.parts.values().enumerate() {
            for (l, &b) in labels.iter_mut().zip(m.bits()) {
                if b {
                    *l = i as u16 + 1;
                }
            }
        }
        LabelImage {
            height: h,
            width: w,
            names,
            labels,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, p) in &self.parts {
            if p.intersection_count(&self.mask)? != p.count() {
                return Err(invalid!("part {name:?} extends outside its instance mask"));
            }
        }
        let (h, w) = (self.mask.height() as f64, self.mask.width() as f64);
        if let Some(k) = self.keypoints.iter().find(|k| !(0.0..w).contains(&k.x) || !(0.0..h).contains(&k.y)) {
            return Err(invalid!("keypoint {:?} at ({}, {}) lies outside the image", k.name, k.x, k.y));
        }
        if !(self.reference_length > 0.0) {
            return Err(invalid!("reference length must be positive, got {}", self.reference_length));
        }
        Ok(())
    }
}

/// Candidate-to-instance overlap: mask IoU when the candidate carries a
/// mask, box IoU against the instance's tight box otherwise.
pub fn candidate_overlap(det: &Detection, gt: &InstanceGT) -> Result<f64> {
    match &det.candidate_mask {
        Some(m) => Ok(m.iou(&gt.mask)?.0),
        None => Ok(gt.bbox().map_or(0.0, |b| det.bbox.iou(&b))),
    }
}

/// Index and overlap of the best-matching instance of the same category;
/// ties go to the lower index.
pub fn best_match(det: &Detection, gts: &[InstanceGT]) -> Result<Option<(usize, f64)>> {
    let mut best: Option<(usize, f64)> = None;
    for (i, g) in gts.iter().enumerate().filter(|(_, g)| g.category == det.category) {
        let o = candidate_overlap(det, g)?;
        if best.is_none_or(|(_, b)| o > b) {
            best = Some((i, o));
        }
    }
    Ok(best)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OverlapKind {
    Box,
    Mask,
}

fn overlap(a: &Detection, b: &Detection, kind: OverlapKind) -> Result<f64> {
    match kind {
        OverlapKind::Box => Ok(a.bbox.iou(&b.bbox)),
        OverlapKind::Mask => {
            let (ma, mb) = match (a.region(), b.region()) {
                (Some(ma), Some(mb)) => (ma, mb),
                _ => return Err(invalid!("mask overlap requested for a detection without a mask")),
            };
            Ok(ma.iou(mb)?.0)
        }
    }
}

/// Indices sorted by descending score, ties by ascending index.
pub fn score_order(dets: &[Detection], indices: impl IntoIterator<Item = usize>) -> Result<Vec<usize>> {
    let mut order: Vec<usize> = indices.into_iter().collect();
    if let Some(&i) = order.iter().find(|&&i| !dets[i].score.is_finite()) {
        return Err(Error::NonFinite(format!("detection {i} has score {}", dets[i].score)));
    }
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score).then(a.cmp(&b)));
    Ok(order)
}

fn nms_subset(dets: &[Detection], subset: impl IntoIterator<Item = usize>, threshold: f64, kind: OverlapKind) -> Result<Vec<usize>> {
    let mut kept: Vec<usize> = Vec::new();
    for i in score_order(dets, subset)? {
        let mut suppressed = false;
        for &k in &kept {
            if overlap(&dets[i], &dets[k], kind)? > threshold {
                suppressed = true;
                break;
            }
        }
        if !suppressed {
            kept.push(i);
        }
    }
    Ok(kept)
}

/// Greedy non-maximum suppression. A detection is dropped when its overlap
/// with an already kept one exceeds `threshold`. Returns kept indices in
/// descending score order.
pub fn nms(dets: &[Detection], threshold: f64, kind: OverlapKind) -> Result<Vec<usize>> {
    nms_subset(dets, 0..dets.len(), threshold, kind)
}

/// Re-admit boxes that NMS suppressed but that score at least `floor` and
/// overlap every kept box by less than `lenient`, then run NMS at `lenient`
/// over the union. Returns indices into `all`.
pub fn expand_pool(all: &[Detection], kept: &[usize], floor: f64, lenient: f64) -> Result<Vec<usize>> {
    if let Some(&k) = kept.iter().find(|&&k| k >= all.len()) {
        return Err(invalid!("kept index {k} out of range for {} detections", all.len()));
    }
    let kept_set: BTreeSet<usize> = kept.iter().copied().collect();
    let mut pool = kept_set.clone();
    for (i, d) in all.iter().enumerate() {
        if kept_set.contains(&i) || !(d.score >= floor) {
            continue;
        }
        let max_iou = kept.iter().map(|&k| d.bbox.iou(&all[k].bbox)).fold(0.0, f64::max);
        if max_iou < lenient {
            pool.insert(i);
        }
    }
    nms_subset(all, pool, lenient, OverlapKind::Box)
}

/// Rescorer labels from the best mask IoU against same-category instances.
pub fn rescore_labels(pool: &[Detection], gts: &[InstanceGT]) -> Result<Vec<Label>> {
    pool.iter()
        .map(|d| {
            let m = d
                .mask
                .as_ref()
                .ok_or_else(|| invalid!("rescoring needs predicted masks"))?;
            let mut best = 0.0f64;
            for g in gts.iter().filter(|g| g.category == d.category) {
                best = best.max(m.iou(&g.mask)?.0);
            }
            Ok(if best >= RESCORE_POSITIVE {
                Label::Positive
            } else if best < RESCORE_NEGATIVE {
                Label::Negative
            } else {
                Label::Ignore
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn det(x0: f64, x1: f64, score: f64) -> Detection {
        Detection::new(1, BoundingBox::new(x0, 0.0, x1, 10.0).unwrap(), score)
    }

    #[test]
    fn nms_basic_cases() {
        let d = vec![det(0.0, 10.0, 0.9), det(20.0, 30.0, 0.8)];
        assert_eq!(nms(&d, 0.3, OverlapKind::Box).unwrap(), vec![0, 1]);
        let twins = vec![det(0.0, 10.0, 0.5), det(0.0, 10.0, 0.5)];
        assert_eq!(nms(&twins, 0.3, OverlapKind::Box).unwrap(), vec![0]);
    }

    #[test]
    fn nms_chain() {
        // A-B IoU 1/3, B-C IoU 1/3, A-C disjoint
        let d = vec![det(10.0, 20.0, 0.7), det(0.0, 10.0, 0.9), det(5.0, 15.0, 0.8)];
        assert!((d[1].bbox.iou(&d[2].bbox) - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(nms(&d, 0.3, OverlapKind::Box).unwrap(), vec![1, 0]);
    }

    #[test]
    fn nms_mask_kind_needs_masks() {
        let d = vec![det(0.0, 10.0, 0.9), det(20.0, 30.0, 0.8)];
        assert!(nms(&d, 0.3, OverlapKind::Mask).is_err());
        let mut bad = d.clone();
        bad[0].score = f64::NAN;
        assert!(matches!(nms(&bad, 0.3, OverlapKind::Box), Err(Error::NonFinite(_))));
    }

    #[test]
    fn expand_pool_cases() {
        let d = vec![det(0.0, 10.0, 0.9), det(30.0, 40.0, 0.8)];
        assert_eq!(expand_pool(&d, &[0, 1], 0.1, 0.7).unwrap(), vec![0, 1]);
        // suppressed twin at IoU 0.9 stays out
        let d = vec![det(0.0, 10.0, 0.9), det(0.0, 9.0, 0.8)];
        assert!((d[0].bbox.iou(&d[1].bbox) - 0.9).abs() < 1e-12);
        assert_eq!(expand_pool(&d, &[0], 0.1, 0.7).unwrap(), vec![0]);
        // IoU 0.5 with the kept box: re-admitted
        let d = vec![det(0.0, 10.0, 0.9), det(0.0, 5.0, 0.8)];
        assert_eq!(expand_pool(&d, &[0], 0.1, 0.7).unwrap(), vec![0, 1]);
        assert_eq!(expand_pool(&d, &[0], 0.85, 0.7).unwrap(), vec![0]);
    }

    #[test]
    fn rescore_label_thresholds() {
        let gt_mask = Mask::from_fn(10, 10, |y, _| y < 5);
        let gt = InstanceGT {
            category: 1,
            mask: gt_mask.clone(),
            parts: BTreeMap::new(),
            keypoints: vec![],
            reference_length: 1.0,
        };
        let with = |m: Mask| Detection {
            mask: Some(m),
            ..det(0.0, 10.0, 0.5)
        };
        // 30 of 50 gt pixels: IoU 0.6
        let mid = Mask::from_fn(10, 10, |y, _| y < 3);
        let labels = rescore_labels(&[with(gt_mask), with(Mask::empty(10, 10)), with(mid)], &[gt]).unwrap();
        assert_eq!(labels, vec![Label::Positive, Label::Negative, Label::Ignore]);
    }

    #[test]
    fn detection_json_round_trip() {
        let mut d = det(1.0, 4.0, 0.25);
        d.mask = Some(Mask::from_fn(3, 5, |y, x| x > y));
        let s = serde_json::to_string(&d).unwrap();
        assert!(s.contains("\"box\":[1.0,0.0,4.0,10.0]"));
        assert_eq!(serde_json::from_str::<Detection>(&s).unwrap(), d);
    }
}
