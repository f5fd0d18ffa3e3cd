use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{stream_rng, Scene};
use crate::error::{invalid, Result};
use crate::tasks::{BoundingBox, Detection, Mask};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CandidateNoise {
    pub per_instance: usize,
    /// Shift scale as a fraction of the instance box size.
    pub jitter: f64,
    /// Largest dilation radius in pixels.
    pub morph: usize,
    /// Standard deviation of the additive score noise.
    pub score_noise: f64,
    /// Random rectangular candidates per scene not tied to any instance.
    pub background: usize,
    pub seed: u64,
}

impl Default for CandidateNoise {
    fn default() -> Self {
        Self {
            per_instance: 4,
            jitter: 0.05,
            morph: 1,
            score_noise: 0.1,
            background: 1,
            seed: 0,
        }
    }
}

impl CandidateNoise {
    pub fn zero(per_instance: usize) -> Self {
        Self {
            per_instance,
            jitter: 0.0,
            morph: 0,
            score_noise: 0.0,
            background: 0,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.per_instance == 0 {
            return Err(invalid!("need at least one candidate per instance"));
        }
        if !(0.0..=1.0).contains(&self.jitter) {
            return Err(invalid!("jitter must lie in [0, 1], got {}", self.jitter));
        }
        if !(self.score_noise >= 0.0 && self.score_noise.is_finite()) {
            return Err(invalid!("score noise must be finite and non-negative"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub detection: Detection,
    /// Instance the candidate was derived from.
    pub source: Option<usize>,
    /// Mask IoU with the source instance.
    pub iou: f64,
}

fn morph(mask: &Mask, radius: isize) -> Mask {
    if radius == 0 {
        return mask.clone();
    }
    let (h, w) = (mask.height() as isize, mask.width() as isize);
    let r = radius.abs();
    let dilate = radius > 0;
    Mask::from_fn(mask.height(), mask.width(), |y, x| {
        let (y, x) = (y as isize, x as isize);
        let mut any = false;
        let mut all = true;
        for yy in y - r..=y + r {
            for xx in x - r..=x + r {
                let on = (0..h).contains(&yy) && (0..w).contains(&xx) && mask.get(yy as usize, xx as usize);
                any |= on;
                all &= on;
            }
        }
        if dilate {
            any
        } else {
            all
        }
    })
}

fn shift(mask: &Mask, dx: isize, dy: isize) -> Mask {
    let (h, w) = (mask.height() as isize, mask.width() as isize);
    Mask::from_fn(mask.height(), mask.width(), |y, x| {
        let (sy, sx) = (y as isize - dy, x as isize - dx);
        (0..h).contains(&sy) && (0..w).contains(&sx) && mask.get(sy as usize, sx as usize)
    })
}

/// Noisy region candidates for every instance of a scene. The last
/// candidate of each instance is shifted horizontally by `ceil(jitter · w)`
/// toward the side with more room and is not morphed, so with `jitter = 1`
/// it is disjoint from its instance.
pub fn perturb_candidates(scene: &Scene, noise: &CandidateNoise) -> Result<Vec<Candidate>> {
    noise.validate()?;
    let mut rng = stream_rng(noise.seed, scene.index);
    let (h, w) = (scene.image.height(), scene.image.width());
    let mut out = Vec::new();
    for (gi, g) in scene.instances.iter().enumerate() {
        let b = g.bbox().ok_or_else(|| invalid!("instance {gi} has an empty mask"))?;
        for j in 0..noise.per_instance {
            let extreme = j + 1 == noise.per_instance;
            let (dx, dy, r) = if extreme {
                let step = (noise.jitter * b.width()).ceil() as isize;
                let left_room = b.x0;
                let right_room = w as f64 - b.x1;
                (if left_room > right_room { -step } else { step }, 0, 0)
            } else {
                let dx = (rng.gen_range(-1.0..=1.0) * noise.jitter * b.width()).round() as isize;
                let dy = (rng.gen_range(-1.0..=1.0) * noise.jitter * b.height()).round() as isize;
                let r = rng.gen_range(0..=noise.morph as isize);
                (dx, dy, r)
            };
            let mut m = shift(&morph(&g.mask, r), dx, dy);
            if m.is_empty() {
                m = shift(&g.mask, dx, dy);
            }
            if m.is_empty() {
                m = g.mask.clone();
            }
            let iou = m.iou(&g.mask)?.0;
            let eps: f64 = StandardNormal.sample(&mut rng);
            let mut det = Detection::new(g.category, m.bbox().expect("non-empty mask"), iou + noise.score_noise * eps);
            det.candidate_mask = Some(m);
            out.push(Candidate {
                detection: det,
                source: Some(gi),
                iou,
            });
        }
    }
    for _ in 0..noise.background {
        let bw = rng.gen_range(4..=w / 3);
        let bh = rng.gen_range(4..=h / 3);
        let x0 = rng.gen_range(0..=w - bw);
        let y0 = rng.gen_range(0..=h - bh);
        let m = Mask::from_fn(h, w, |y, x| (y0..y0 + bh).contains(&y) && (x0..x0 + bw).contains(&x));
        let best = scene
            .instances
            .iter()
            .map(|g| m.iou(&g.mask).map(|r| r.0))
            .collect::<Result<Vec<_>>>()?
            .into_iter()
            .fold(0.0, f64::max);
        let eps: f64 = StandardNormal.sample(&mut rng);
        let bbox = BoundingBox::new(x0 as f64, y0 as f64, (x0 + bw) as f64, (y0 + bh) as f64)?;
        let mut det = Detection::new(super::CATEGORY, bbox, best + noise.score_noise * eps);
        det.candidate_mask = Some(m);
        out.push(Candidate {
            detection: det,
            source: None,
            iou: best,
        });
    }
    Ok(out)
}

/// Ten equal-width IoU bins over `[0, 1]`; 1.0 falls in the last bin.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct IouHistogram {
    pub counts: [usize; 10],
    pub at_least_07: usize,
    pub below_05: usize,
}

impl IouHistogram {
    pub fn add(&mut self, iou: f64) {
        self.counts[((iou * 10.0).floor() as usize).min(9)] += 1;
        if iou >= 0.7 {
            self.at_least_07 += 1;
        }
        if iou < 0.5 {
            self.below_05 += 1;
        }
    }

    pub fn from_candidates(c: &[Candidate]) -> Self {
        let mut h = Self::default();
        for x in c {
            h.add(x.iou);
        }
        h
    }

    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }
}
