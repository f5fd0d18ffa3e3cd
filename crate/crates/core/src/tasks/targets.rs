use serde::{Deserialize, Serialize};

use super::detection::{candidate_overlap, Detection, InstanceGT};
use super::geometry::{ExpandedBox, Mask, DEFAULT_EXPANSION};
use crate::error::{invalid, shape_err, Error, Result};
use crate::hypernet::{Label, TargetHeatmap};
use crate::tensor::FeatureMap;

pub const OVERLAP_GATE: f64 = 0.7;
pub const KEYPOINT_RADIUS: f64 = 0.1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TargetConfig {
    pub resolution: usize,
    pub expansion: f64,
    pub overlap_gate: f64,
    /// Fraction of the expanded-box diagonal beyond which keypoint pixels are negative.
    pub keypoint_radius: f64,
}

impl Default for TargetConfig {
    fn default() -> Self {
        Self {
            resolution: crate::hypercolumn::DEFAULT_RESOLUTION,
            expansion: DEFAULT_EXPANSION,
            overlap_gate: OVERLAP_GATE,
            keypoint_radius: KEYPOINT_RADIUS,
        }
    }
}

/// Overlap lengths between heatmap cells and image pixels along one axis,
/// in units of `1/r` pixel so every length is an integer.
fn axis_overlaps(start: usize, len: usize, r: usize) -> Vec<Vec<(usize, u64)>> {
    (0..r)
        .map(|j| {
            let a = r * start + j * len;
            let b = a + len;
            (a / r..b.div_ceil(r))
                .map(|k| (k, (b.min((k + 1) * r) - a.max(k * r)) as u64))
                .filter(|&(_, w)| w > 0)
                .collect()
        })
        .collect()
}

/// Area-sampled mask coverage of each heatmap cell over `rect`: returns
/// integer numerators (row-major, `r × r`) and their common denominator.
pub fn coverage_counts(mask: &Mask, rect: &ExpandedBox, r: usize) -> Result<(Vec<u64>, u64)> {
    if r == 0 {
        return Err(invalid!("resolution must be positive"));
    }
    if rect.x1 > mask.width() || rect.y1 > mask.height() || rect.width() == 0 || rect.height() == 0 {
        return Err(shape_err!(
            "rectangle {rect:?} does not fit in the {}x{} mask",
            mask.height(),
            mask.width()
        ));
    }
    let rows = axis_overlaps(rect.y0, rect.height(), r);
    let cols = axis_overlaps(rect.x0, rect.width(), r);
    let mut out = Vec::with_capacity(r * r);
    for ry in &rows {
        for cx in &cols {
            let mut acc = 0u64;
            for &(y, wy) in ry {
                for &(x, wx) in cx {
                    if mask.get(y, x) {
                        acc += wy * wx;
                    }
                }
            }
            out.push(acc);
        }
    }
    Ok((out, (rect.width() * rect.height()) as u64))
}

/// Mask coverage fractions on an `r × r` grid over `rect`.
pub fn area_sample(mask: &Mask, rect: &ExpandedBox, r: usize) -> Result<FeatureMap> {
    let (num, den) = coverage_counts(mask, rect, r)?;
    FeatureMap::new(r, r, 1, num.into_iter().map(|n| n as f64 / den as f64).collect())
}

/// Cells more than half covered are positive, the rest negative.
pub fn mask_target(mask: &Mask, rect: &ExpandedBox, r: usize) -> Result<TargetHeatmap> {
    let (num, den) = coverage_counts(mask, rect, r)?;
    let labels = num
        .into_iter()
        .map(|n| if 2 * n > den { Label::Positive } else { Label::Negative })
        .collect();
    TargetHeatmap::new(r, labels)
}

/// Checks the overlap gate and returns the candidate's expanded box.
pub fn gated_box(det: &Detection, gt: &InstanceGT, config: &TargetConfig) -> Result<ExpandedBox> {
    let overlap = candidate_overlap(det, gt)?;
    if overlap < config.overlap_gate {
        return Err(Error::Precondition(format!(
            "candidate overlaps the instance by {overlap:.4}, below the {} gate",
            config.overlap_gate
        )));
    }
    ExpandedBox::new(&det.bbox, config.expansion, gt.mask.height(), gt.mask.width())
}

pub fn make_sds_target(det: &Detection, gt: &InstanceGT, config: &TargetConfig) -> Result<TargetHeatmap> {
    let rect = gated_box(det, gt, config)?;
    mask_target(&gt.mask, &rect, config.resolution)
}

/// Positives are the named part; an absent part gives an all-negative target.
pub fn make_part_target(det: &Detection, gt: &InstanceGT, part: &str, config: &TargetConfig) -> Result<TargetHeatmap> {
    let rect = gated_box(det, gt, config)?;
    match gt.parts.get(part) {
        Some(m) => mask_target(m, &rect, config.resolution),
        None => Ok(TargetHeatmap::filled(config.resolution, Label::Negative)),
    }
}

/// The cell containing the keypoint is positive, cells whose centers lie
/// farther than `keypoint_radius` times the expanded-box diagonal are
/// negative, the rest are ignored. `None` when the keypoint is invisible.
pub fn make_keypoint_target(
    det: &Detection,
    gt: &InstanceGT,
    name: &str,
    config: &TargetConfig,
) -> Result<Option<TargetHeatmap>> {
    let kp = gt
        .keypoint(name)
        .ok_or_else(|| invalid!("instance has no keypoint named {name:?}"))?;
    if !kp.visible {
        return Ok(None);
    }
    let rect = gated_box(det, gt, config)?;
    if !rect.contains_point(kp.x, kp.y) {
        return Err(Error::Precondition(format!(
            "keypoint {name:?} at ({}, {}) lies outside the expanded box {rect:?}",
            kp.x, kp.y
        )));
    }
    Ok(Some(keypoint_target(kp.x, kp.y, &rect, config.resolution, config.keypoint_radius)))
}

pub fn keypoint_target(x: f64, y: f64, rect: &ExpandedBox, r: usize, radius: f64) -> TargetHeatmap {
    let limit = radius * rect.diagonal();
    let mut t = TargetHeatmap::filled(r, Label::Ignore);
    for i in 0..r {
        for j in 0..r {
            let (cx, cy) = rect.heat_to_image(i, j, r);
            if (cx - x).hypot(cy - y) > limit {
                t.set(i, j, Label::Negative);
            }
        }
    }
    let cell = |v: f64, origin: usize, len: usize| (((v - origin as f64) * r as f64 / len as f64).floor() as usize).min(r - 1);
    t.set(cell(y, rect.y0, rect.height()), cell(x, rect.x0, rect.width()), Label::Positive);
    t
}
