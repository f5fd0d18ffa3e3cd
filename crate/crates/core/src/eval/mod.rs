//! Detection and segmentation metrics plus significance testing.
//!
//! Matching walks detections in descending score order (ties by input
//! order, then image order) and assigns each to the best still-unmatched
//! ground truth at or above the threshold. AP is the exact area under the
//! stepwise PR curve: the sum of precision at every true-positive rank,
//! divided by the number of ground-truth objects.

mod segmentation;
mod stats;

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::tasks::{Detection, InstanceGT, Mask};

pub use segmentation::{mean_iu, paste_detections, ConfusionMatrix, MeanIu};
pub use stats::{paired_perm_test, PERM_TOLERANCE};

pub const APK_TAU: f64 = 0.2;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct IouResult {
    pub iou: f64,
    pub both_empty: bool,
}

pub fn mask_iou(a: &Mask, b: &Mask) -> Result<IouResult> {
    let (iou, both_empty) = a.iou(b)?;
    Ok(IouResult { iou, both_empty })
}

/// Matching outcome for one image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatchResult {
    /// Per detection (input order): matched ground-truth index, `None` for a false positive.
    pub matched: Vec<Option<usize>>,
    pub gt_matched: Vec<bool>,
}

impl MatchResult {
    pub fn is_tp(&self, det: usize) -> bool {
        self.matched[det].is_some()
    }
}

/// Greedy matching given a `detections × gt` overlap matrix. Overlaps equal
/// to the threshold count as matches; overlap ties go to the lower gt index.
pub fn greedy_match(scores: &[f64], overlaps: &[Vec<f64>], threshold: f64) -> MatchResult {
    let n_gt = overlaps.first().map_or(0, Vec::len);
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut matched = vec![None; scores.len()];
    let mut gt_matched = vec![false; n_gt];
    for d in order {
        let mut best: Option<(usize, f64)> = None;
        for (g, &o) in overlaps[d].iter().enumerate() {
            if !gt_matched[g] && o >= threshold && best.is_none_or(|(_, b)| o > b) {
                best = Some((g, o));
            }
        }
        if let Some((g, _)) = best {
            gt_matched[g] = true;
            matched[d] = Some(g);
        }
    }
    MatchResult { matched, gt_matched }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PRCurve {
    /// `(recall, precision)` after each detection in ranked order.
    pub points: Vec<(f64, f64)>,
    pub ap: f64,
}

impl PRCurve {
    /// From true-positive flags in ranked order.
    pub fn from_ranked(tp: &[bool], n_gt: usize) -> Self {
        let mut points = Vec::with_capacity(tp.len());
        let mut hits = 0usize;
        let mut sum = 0.0;
        for (k, &t) in tp.iter().enumerate() {
            if t {
                hits += 1;
                sum += hits as f64 / (k + 1) as f64;
            }
            let recall = if n_gt == 0 { 0.0 } else { hits as f64 / n_gt as f64 };
            points.push((recall, hits as f64 / (k + 1) as f64));
        }
        let ap = if n_gt == 0 { 0.0 } else { sum / n_gt as f64 };
        Self { points, ap }
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("rank,recall,precision\n");
        for (k, (r, p)) in self.points.iter().enumerate() {
            s.push_str(&format!("{},{r},{p}\n", k + 1));
        }
        s
    }
}

/// One image's detections and ground truth.
#[derive(Clone, Copy, Debug)]
pub struct ImageCase<'a> {
    pub detections: &'a [Detection],
    pub instances: &'a [InstanceGT],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ApResult {
    pub ap: f64,
    pub curve: PRCurve,
    pub matches: Vec<MatchResult>,
}

fn check_single_category(cases: &[ImageCase]) -> Result<()> {
    let cats: BTreeSet<u32> = cases
        .iter()
        .flat_map(|c| c.detections.iter().map(|d| d.category).chain(c.instances.iter().map(|g| g.category)))
        .collect();
    if cats.len() > 1 {
        return Err(invalid!("AP is computed per category, got categories {cats:?}"));
    }
    Ok(())
}

fn ap_with(
    cases: &[ImageCase],
    threshold: f64,
    overlap: impl Fn(&Detection, &InstanceGT) -> Result<f64>,
) -> Result<ApResult> {
    check_single_category(cases)?;
    let mut matches = Vec::with_capacity(cases.len());
    let mut ranked: Vec<(f64, usize, usize, bool)> = Vec::new();
    let mut n_gt = 0;
    for (img, case) in cases.iter().enumerate() {
        let overlaps = case
            .detections
            .iter()
            .map(|d| case.instances.iter().map(|g| overlap(d, g)).collect::<Result<Vec<_>>>())
            .collect::<Result<Vec<_>>>()?;
        let scores: Vec<f64> = case.detections.iter().map(|d| d.score).collect();
        let m = greedy_match(&scores, &overlaps, threshold);
        ranked.extend(scores.iter().enumerate().map(|(i, &s)| (s, img, i, m.is_tp(i))));
        n_gt += case.instances.len();
        matches.push(m);
    }
    ranked.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.2.cmp(&b.2)).then(a.1.cmp(&b.1)));
    let tp: Vec<bool> = ranked.iter().map(|r| r.3).collect();
    let curve = PRCurve::from_ranked(&tp, n_gt);
    Ok(ApResult {
        ap: curve.ap,
        curve,
        matches,
    })
}

fn det_mask(d: &Detection) -> Result<&Mask> {
    d.mask.as_ref().ok_or_else(|| invalid!("detection has no predicted mask"))
}

/// Region AP: a detection is a true positive when its mask IoU with an
/// unmatched instance reaches `threshold`.
pub fn ap_r(cases: &[ImageCase], threshold: f64) -> Result<ApResult> {
    ap_with(cases, threshold, |d, g| Ok(det_mask(d)?.iou(&g.mask)?.0))
}

/// Part-aware IoU: intersection counts only pixels where both masks are on
/// and the part names agree.
pub fn part_iou(d: &Detection, g: &InstanceGT) -> Result<f64> {
    let mask = det_mask(d)?;
    let parts = d
        .parts
        .as_ref()
        .ok_or_else(|| invalid!("detection has no part labels"))?;
    let gt_parts = g.part_image();
    let union = mask.union_count(&g.mask)?;
    if union == 0 {
        return Ok(0.0);
    }
    if (parts.height, parts.width) != (mask.height(), mask.width()) {
        return Err(invalid!("part label image size differs from the mask"));
    }
    let mut inter = 0usize;
    for y in 0..mask.height() {
        for x in 0..mask.width() {
            if mask.get(y, x) && g.mask.get(y, x) {
                if let (Some(a), Some(b)) = (parts.name_at(y, x), gt_parts.name_at(y, x)) {
                    inter += usize::from(a == b);
                }
            }
        }
    }
    Ok(inter as f64 / union as f64)
}

pub fn ap_r_part(cases: &[ImageCase], threshold: f64) -> Result<ApResult> {
    ap_with(cases, threshold, part_iou)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ApkResult {
    pub per_keypoint: BTreeMap<String, f64>,
    /// Mean over keypoint types with at least one visible ground-truth instance.
    pub mean: f64,
}

/// Keypoint AP. Per type, predictions in score order claim the closest
/// unmatched visible ground-truth keypoint within `tau` times its
/// instance's reference length (distance ties to the lower instance
/// index); everything else is a false positive.
pub fn apk(cases: &[ImageCase], tau: f64) -> Result<ApkResult> {
    check_single_category(cases)?;
    let mut names = BTreeSet::new();
    for c in cases {
        for g in c.instances {
            names.extend(g.keypoints.iter().filter(|k| k.visible).map(|k| k.name.clone()));
        }
    }
    let mut per_keypoint = BTreeMap::new();
    for name in names {
        let mut ranked: Vec<(f64, usize, usize, bool)> = Vec::new();
        let mut n_gt = 0;
        for (img, c) in cases.iter().enumerate() {
            let gts: Vec<Option<(f64, f64, f64)>> = c
                .instances
                .iter()
                .map(|g| {
                    g.keypoint(&name)
                        .filter(|k| k.visible)
                        .map(|k| (k.x, k.y, tau * g.reference_length))
                })
                .collect();
            n_gt += gts.iter().flatten().count();
            let mut preds: Vec<(f64, usize, f64, f64)> = Vec::new();
            for (i, d) in c.detections.iter().enumerate() {
                if let Some(p) = d.keypoints.iter().flatten().find(|p| p.name == name) {
                    preds.push((p.score, i, p.x, p.y));
                }
            }
            preds.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
            let mut taken = vec![false; gts.len()];
            for (score, i, x, y) in preds {
                let mut best: Option<(usize, f64)> = None;
                for (g, gt) in gts.iter().enumerate() {
                    if let Some((gx, gy, limit)) = gt {
                        let dist = (x - gx).hypot(y - gy);
                        if !taken[g] && dist <= *limit && best.is_none_or(|(_, b)| dist < b) {
                            best = Some((g, dist));
                        }
                    }
                }
                if let Some((g, _)) = best {
                    taken[g] = true;
                }
                ranked.push((score, img, i, best.is_some()));
            }
        }
        ranked.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.2.cmp(&b.2)).then(a.1.cmp(&b.1)));
        let tp: Vec<bool> = ranked.iter().map(|r| r.3).collect();
        per_keypoint.insert(name, PRCurve::from_ranked(&tp, n_gt).ap);
    }
    let mean = if per_keypoint.is_empty() {
        0.0
    } else {
        per_keypoint.values().sum::<f64>() / per_keypoint.len() as f64
    };
    Ok(ApkResult { per_keypoint, mean })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tasks::{BoundingBox, Keypoint, KeypointPrediction, LabelImage};

    fn gt(mask: Mask) -> InstanceGT {
        InstanceGT {
            category: 1,
            mask,
            parts: BTreeMap::new(),
            keypoints: vec![],
            reference_length: 10.0,
        }
    }

    fn det(mask: Mask, score: f64) -> Detection {
        let mut d = Detection::new(1, BoundingBox::new(0.0, 0.0, 1.0, 1.0).unwrap(), score);
        d.mask = Some(mask);
        d
    }

    #[test]
    fn iou_examples() {
        let full = Mask::from_fn(10, 10, |_, _| true);
        assert_eq!(mask_iou(&full, &full).unwrap().iou, 1.0);
        let top = Mask::from_fn(10, 10, |y, _| y < 5);
        let bottom = Mask::from_fn(10, 10, |y, _| y >= 5);
        assert_eq!(mask_iou(&top, &bottom).unwrap().iou, 0.0);
        assert_eq!(mask_iou(&full, &top).unwrap().iou, 0.5);
        let e = mask_iou(&Mask::empty(2, 2), &Mask::empty(2, 2)).unwrap();
        assert!(e.both_empty && e.iou == 0.0);
    }

    #[test]
    fn ap_perfect_and_wrong() {
        let m = Mask::from_fn(6, 6, |y, x| y < 3 && x < 4);
        let g = [gt(m.clone())];
        let d = [det(m, 0.9)];
        assert_eq!(ap_r(&[ImageCase { detections: &d, instances: &g }], 0.5).unwrap().ap, 1.0);
        let wrong = [det(Mask::from_fn(6, 6, |y, _| y >= 3), 0.9)];
        assert_eq!(ap_r(&[ImageCase { detections: &wrong, instances: &g }], 0.5).unwrap().ap, 0.0);
        assert_eq!(ap_r(&[ImageCase { detections: &wrong, instances: &[] }], 0.5).unwrap().ap, 0.0);
    }

    #[test]
    fn ap_three_detections_two_gt() {
        let a = Mask::from_fn(8, 8, |y, _| y < 4);
        let b = Mask::from_fn(8, 8, |y, _| y >= 4);
        let g = [gt(a.clone()), gt(b.clone())];
        // ranks: TP, FP (duplicate of a), TP
        let d = [det(a.clone(), 0.9), det(a, 0.8), det(b, 0.7)];
        let r = ap_r(&[ImageCase { detections: &d, instances: &g }], 0.5).unwrap();
        assert_eq!(r.ap, (1.0 + 2.0 / 3.0) / 2.0);
        assert_eq!(r.matches[0].matched, vec![Some(0), None, Some(1)]);
    }

    #[test]
    fn ap_part_half_labels() {
        let m = Mask::from_fn(4, 4, |_, _| true);
        let mut g = gt(m.clone());
        g.parts.insert("a".into(), Mask::from_fn(4, 4, |y, _| y < 2));
        g.parts.insert("b".into(), Mask::from_fn(4, 4, |y, _| y >= 2));
        let mut d = det(m, 0.5);
        d.parts = Some(LabelImage::new(4, 4, vec!["a".into()], vec![1; 16]).unwrap());
        assert_eq!(part_iou(&d, &g).unwrap(), 0.5);
        let case = [ImageCase { detections: std::slice::from_ref(&d), instances: std::slice::from_ref(&g) }];
        assert_eq!(ap_r_part(&case, 0.5).unwrap().ap, 1.0);
        assert_eq!(ap_r_part(&case, 0.51).unwrap().ap, 0.0);
    }

    #[test]
    fn apk_exact_and_far() {
        let mut g = gt(Mask::from_fn(4, 4, |_, _| true));
        g.keypoints = vec![Keypoint { name: "nose".into(), x: 1.0, y: 1.0, visible: true }];
        let mut d = det(Mask::empty(4, 4), 0.5);
        d.keypoints = Some(vec![KeypointPrediction { name: "nose".into(), x: 1.0, y: 1.0, score: 0.5 }]);
        let gs = [g];
        let case = [ImageCase { detections: std::slice::from_ref(&d), instances: &gs }];
        assert_eq!(apk(&case, APK_TAU).unwrap().mean, 1.0);
        d.keypoints.as_mut().unwrap()[0].x = 3.5;
        let case = [ImageCase { detections: std::slice::from_ref(&d), instances: &gs }];
        assert_eq!(apk(&case, APK_TAU).unwrap().mean, 0.0);
    }

    #[test]
    fn mixed_categories_rejected() {
        let mut d = det(Mask::empty(2, 2), 0.5);
        d.category = 2;
        let g = [gt(Mask::empty(2, 2))];
        assert!(ap_r(&[ImageCase { detections: std::slice::from_ref(&d), instances: &g }], 0.5).is_err());
    }

    #[test]
    fn pr_curve_csv() {
        let c = PRCurve::from_ranked(&[true, false], 2);
        assert_eq!(c.to_csv(), "rank,recall,precision\n1,0.5,1\n2,0.5,0.5\n");
    }
}
