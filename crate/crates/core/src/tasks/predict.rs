use std::collections::BTreeMap;

use super::geometry::{ExpandedBox, LabelImage, Mask, Superpixels};
use crate::error::{invalid, shape_err, Result};
use crate::heatmap::Heatmap;
use crate::tensor::{resize, sigmoid, FeatureMap};

pub const MASK_THRESHOLD: f64 = 0.5;

/// Crop `rect` out of an image and resample it to `size × size`.
pub fn crop_resize(image: &FeatureMap, rect: &ExpandedBox, size: usize) -> Result<FeatureMap> {
    let (h, w, c) = image.shape();
    if rect.x1 > w || rect.y1 > h || rect.width() == 0 || rect.height() == 0 {
        return Err(shape_err!("crop {rect:?} does not fit in the {h}x{w} image"));
    }
    let crop = FeatureMap::from_fn(rect.height(), rect.width(), c, |y, x, ch| {
        image.get(rect.y0 + y, rect.x0 + x, ch)
    });
    Ok(resize(&crop, size, size))
}

/// Bilinearly resize a heatmap onto its expanded box inside an otherwise
/// zero `height × width` image.
pub fn splat(heatmap: &Heatmap, rect: &ExpandedBox, height: usize, width: usize) -> Result<FeatureMap> {
    if rect.x1 > width || rect.y1 > height || rect.width() == 0 || rect.height() == 0 {
        return Err(shape_err!("box {rect:?} does not fit in the {height}x{width} image"));
    }
    let local = resize(heatmap.map(), rect.height(), rect.width());
    let mut out = FeatureMap::zeros(height, width, 1);
    for y in 0..rect.height() {
        for x in 0..rect.width() {
            out.set(rect.y0 + y, rect.x0 + x, 0, local.get(y, x, 0));
        }
    }
    Ok(out)
}

/// Replace every value by the mean over its superpixel.
pub fn project_superpixels(values: &FeatureMap, sp: &Superpixels) -> Result<FeatureMap> {
    if values.height() != sp.height || values.width() != sp.width || values.channels() != 1 {
        return Err(shape_err!(
            "superpixel map is {}x{}, values are {:?}",
            sp.height,
            sp.width,
            values.shape()
        ));
    }
    let n = sp.count();
    let mut sum = vec![0.0; n];
    let mut count = vec![0usize; n];
    for (&l, &v) in sp.labels.iter().zip(values.data()) {
        sum[l as usize] += v;
        count[l as usize] += 1;
    }
    let data = sp
        .labels
        .iter()
        .map(|&l| sum[l as usize] / count[l as usize] as f64)
        .collect();
    FeatureMap::new(sp.height, sp.width, 1, data)
}

pub fn predict_mask(
    heatmap: &Heatmap,
    rect: &ExpandedBox,
    height: usize,
    width: usize,
    superpixels: Option<&Superpixels>,
) -> Result<Mask> {
    let mut values = splat(heatmap, rect, height, width)?;
    if let Some(sp) = superpixels {
        values = project_superpixels(&values, sp)?;
    }
    Mask::new(height, width, values.data().iter().map(|&v| v >= MASK_THRESHOLD).collect())
}

/// Highest heatmap cell (first in row-major order on ties), mapped to the
/// image, with its value times the squashed detector score.
pub fn predict_keypoint(heatmap: &Heatmap, rect: &ExpandedBox, detector_score: f64) -> (f64, f64, f64) {
    let r = heatmap.resolution();
    let mut best = (0, 0, f64::NEG_INFINITY);
    for i in 0..r {
        for j in 0..r {
            let v = heatmap.get(i, j);
            if v > best.2 {
                best = (i, j, v);
            }
        }
    }
    let (x, y) = rect.heat_to_image(best.0, best.1, r);
    (x, y, best.2 * sigmoid(detector_score))
}

/// Label every mask pixel with the highest-scoring part; ties go to the
/// lexicographically smallest name. Pixels outside the mask are background.
pub fn predict_parts(mask: &Mask, scores: &BTreeMap<String, FeatureMap>) -> Result<LabelImage> {
    if scores.is_empty() {
        return Err(invalid!("no part heatmaps given"));
    }
    let (h, w) = (mask.height(), mask.width());
    for (name, s) in scores {
        if s.shape() != (h, w, 1) {
            return Err(shape_err!("part {name:?} scores are {:?}, mask is {h}x{w}", s.shape()));
        }
    }
    let maps: Vec<&FeatureMap> = scores.values().collect();
    let mut labels = vec![0u16; h * w];
    for (i, l) in labels.iter_mut().enumerate() {
        if !mask.bits()[i] {
            continue;
        }
        let mut best = 0;
        for (k, m) in maps.iter().enumerate().skip(1) {
            if m.data()[i] > maps[best].data()[i] {
                best = k;
            }
        }
        *l = best as u16 + 1;
    }
    LabelImage::new(h, w, scores.keys().cloned().collect(), labels)
}
