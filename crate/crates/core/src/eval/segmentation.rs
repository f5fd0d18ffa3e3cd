use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape_err, Result};
use crate::tasks::{score_order, Detection};

/// Square confusion matrix over class ids `0..classes`, indexed `[gt][pred]`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub classes: usize,
    pub counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        Self {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn add(&mut self, pred: &[u16], gt: &[u16]) -> Result<()> {
        if pred.len() != gt.len() {
            return Err(shape_err!("label images differ in size: {} vs {}", pred.len(), gt.len()));
        }
        for (&p, &g) in pred.iter().zip(gt) {
            let (p, g) = (p as usize, g as usize);
            if p >= self.classes || g >= self.classes {
                return Err(invalid!("label {} out of range for {} classes", p.max(g), self.classes));
            }
            self.counts[g * self.classes + p] += 1;
        }
        Ok(())
    }

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.classes + pred]
    }

    pub fn mean_iu(&self) -> MeanIu {
        let n = self.classes;
        let per_class: Vec<Option<f64>> = (0..n)
            .map(|c| {
                let tp = self.get(c, c);
                let fp: u64 = (0..n).filter(|&g| g != c).map(|g| self.get(g, c)).sum();
                let fn_: u64 = (0..n).filter(|&p| p != c).map(|p| self.get(c, p)).sum();
                let denom = tp + fp + fn_;
                (denom > 0).then(|| tp as f64 / denom as f64)
            })
            .collect();
        let present: Vec<f64> = per_class.iter().flatten().copied().collect();
        let mean = if present.is_empty() {
            0.0
        } else {
            present.iter().sum::<f64>() / present.len() as f64
        };
        MeanIu { per_class, mean }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanIu {
    /// `None` for classes absent from both images.
    pub per_class: Vec<Option<f64>>,
    pub mean: f64,
}

/// Per-class TP/(TP+FP+FN), averaged over classes present in either image.
pub fn mean_iu(pred: &[u16], gt: &[u16], classes: usize) -> Result<MeanIu> {
    let mut cm = ConfusionMatrix::new(classes);
    cm.add(pred, gt)?;
    Ok(cm.mean_iu())
}

/// Semantic label image from detection masks: pasted in descending score
/// order, a pixel keeps the first (highest-scoring) category written to it.
/// Category `c` becomes label `c`; `0` is background.
pub fn paste_detections(dets: &[Detection], height: usize, width: usize) -> Result<Vec<u16>> {
    let mut out = vec![0u16; height * width];
    let mut written = vec![false; height * width];
    for i in score_order(dets, 0..dets.len())? {
        let d = &dets[i];
        let m = d.mask.as_ref().ok_or_else(|| invalid!("detection {i} has no predicted mask"))?;
        if (m.height(), m.width()) != (height, width) {
            return Err(shape_err!("mask {}x{} pasted into {height}x{width}", m.height(), m.width()));
        }
        let label = u16::try_from(d.category).map_err(|_| invalid!("category {} too large", d.category))?;
        for (k, &b) in m.bits().iter().enumerate() {
            if b && !written[k] {
                written[k] = true;
                out[k] = label;
            }
        }
    }
    Ok(out)
}
