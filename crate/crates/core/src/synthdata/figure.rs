use std::collections::BTreeMap;
use std::f64::consts::PI;

use rand::Rng;

use crate::tasks::{Keypoint, Mask};

pub const PART_NAMES: [&str; 4] = ["arms", "head", "legs", "torso"];
pub const KEYPOINT_NAMES: [&str; 7] = ["head", "hip", "left_foot", "left_hand", "neck", "right_foot", "right_hand"];

#[derive(Clone, Copy, Debug, PartialEq)]
pub(crate) struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    fn offset(self, angle: f64, len: f64) -> Self {
        // angle 0 points straight down; positive turns toward +x
        Self::new(self.x + len * angle.sin(), self.y + len * angle.cos())
    }

    fn shift(self, dx: f64, dy: f64) -> Self {
        Self::new(self.x + dx, self.y + dy)
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct Capsule {
    a: Point,
    b: Point,
    radius: f64,
}

impl Capsule {
    fn contains(&self, p: Point) -> bool {
        let (dx, dy) = (self.b.x - self.a.x, self.b.y - self.a.y);
        let len2 = dx * dx + dy * dy;
        let t = if len2 == 0.0 {
            0.0
        } else {
            (((p.x - self.a.x) * dx + (p.y - self.a.y) * dy) / len2).clamp(0.0, 1.0)
        };
        (p.x - self.a.x - t * dx).hypot(p.y - self.a.y - t * dy) <= self.radius
    }

    fn extent(&self) -> (f64, f64, f64, f64) {
        (
            self.a.x.min(self.b.x) - self.radius,
            self.a.y.min(self.b.y) - self.radius,
            self.a.x.max(self.b.x) + self.radius,
            self.a.y.max(self.b.y) + self.radius,
        )
    }

    fn shift(self, dx: f64, dy: f64) -> Self {
        Self {
            a: self.a.shift(dx, dy),
            b: self.b.shift(dx, dy),
            radius: self.radius,
        }
    }
}

/// An articulated stick figure in continuous coordinates.
#[derive(Clone, Debug)]
pub(crate) struct Figure {
    /// Parts in rasterization priority order: head, torso, arms, legs.
    parts: Vec<(&'static str, Vec<Capsule>)>,
    keypoints: Vec<(&'static str, Point)>,
    pub torso_length: f64,
    pub shading: [f64; 4],
}

impl Figure {
    /// A figure whose head top sits at the origin, spine pointing down.
    pub fn sample(rng: &mut impl Rng, height: f64) -> Self {
        let head_r = 0.11 * height;
        let head = Point::new(0.0, head_r);
        let neck = Point::new(0.0, 2.0 * head_r);
        let hip = Point::new(rng.gen_range(-0.06..0.06) * height, 0.55 * height);
        let shoulder = Point::new(neck.x + 0.15 * (hip.x - neck.x), neck.y + 0.15 * (hip.y - neck.y));
        let limb = (0.045 * height).max(1.0);
        let arm_len = 0.33 * height;
        let leg_len = 0.45 * height;
        let left_hand = shoulder.offset(-rng.gen_range(0.3..1.9), arm_len);
        let right_hand = shoulder.offset(rng.gen_range(0.3..1.9), arm_len);
        let left_foot = hip.offset(-rng.gen_range(0.08..0.6), leg_len);
        let right_foot = hip.offset(rng.gen_range(0.08..0.6), leg_len);
        let cap = |a, b, radius| Capsule { a, b, radius };
        let brightness = rng.gen_range(0.75..1.0);
        Self {
            parts: vec![
                ("head", vec![cap(head, head, head_r)]),
                ("torso", vec![cap(neck, hip, (0.09 * height).max(1.5))]),
                ("arms", vec![cap(shoulder, left_hand, limb), cap(shoulder, right_hand, limb)]),
                ("legs", vec![cap(hip, left_foot, limb * 1.2), cap(hip, right_foot, limb * 1.2)]),
            ],
            keypoints: vec![
                ("head", head),
                ("neck", neck),
                ("hip", hip),
                ("left_hand", left_hand),
                ("right_hand", right_hand),
                ("left_foot", left_foot),
                ("right_foot", right_foot),
            ],
            torso_length: (hip.x - neck.x).hypot(hip.y - neck.y),
            shading: [brightness, 0.85 * brightness, 0.95 * brightness, 0.7 * brightness],
        }
    }

    /// `(x0, y0, x1, y1)` continuous extent.
    pub fn extent(&self) -> (f64, f64, f64, f64) {
        self.parts
            .iter()
            .flat_map(|(_, c)| c.iter().map(Capsule::extent))
            .fold((f64::MAX, f64::MAX, f64::MIN, f64::MIN), |a, e| {
                (a.0.min(e.0), a.1.min(e.1), a.2.max(e.2), a.3.max(e.3))
            })
    }

    pub fn shift(&self, dx: f64, dy: f64) -> Self {
        Self {
            parts: self
                .parts
                .iter()
                .map(|(n, c)| (*n, c.iter().map(|c| c.shift(dx, dy)).collect()))
                .collect(),
            keypoints: self.keypoints.iter().map(|(n, p)| (*n, p.shift(dx, dy))).collect(),
            torso_length: self.torso_length,
            shading: self.shading,
        }
    }

    /// Part masks (a partition of the instance) and per-pixel shading.
    pub fn rasterize(&self, height: usize, width: usize) -> (Mask, BTreeMap<String, Mask>, Vec<Option<f64>>) {
        let mut owner: Vec<Option<usize>> = vec![None; height * width];
        for y in 0..height {
            for x in 0..width {
                let p = Point::new(x as f64 + 0.5, y as f64 + 0.5);
                owner[y * width + x] = self.parts.iter().position(|(_, caps)| caps.iter().any(|c| c.contains(p)));
            }
        }
        let mask = Mask::new(height, width, owner.iter().map(Option::is_some).collect()).expect("sized buffer");
        let parts = self
            .parts
            .iter()
            .enumerate()
            .map(|(i, (n, _))| {
                let m = Mask::new(height, width, owner.iter().map(|o| *o == Some(i)).collect()).expect("sized buffer");
                (n.to_string(), m)
            })
            .collect();
        let shade = owner.iter().map(|o| o.map(|i| self.shading[i])).collect();
        (mask, parts, shade)
    }

    pub fn keypoints(&self, rng: &mut impl Rng, invisible_rate: f64) -> Vec<Keypoint> {
        let mut kps: Vec<Keypoint> = self
            .keypoints
            .iter()
            .map(|(n, p)| Keypoint {
                name: n.to_string(),
                x: p.x,
                y: p.y,
                visible: !rng.gen_bool(invisible_rate),
            })
            .collect();
        kps.sort_by(|a, b| a.name.cmp(&b.name));
        kps
    }
}

/// Random clutter disk or bar, drawn under the figures.
pub(crate) fn clutter_shape(rng: &mut impl Rng, height: usize, width: usize) -> (Vec<Capsule>, f64) {
    let a = Point::new(rng.gen_range(0.0..width as f64), rng.gen_range(0.0..height as f64));
    let len = rng.gen_range(0.0..0.25) * width as f64;
    let b = a.offset(rng.gen_range(0.0..2.0 * PI), len);
    let radius = rng.gen_range(1.0..0.06 * width as f64 + 1.5);
    (vec![Capsule { a, b, radius }], rng.gen_range(0.25..0.6))
}

pub(crate) fn paint(image: &mut [f64], height: usize, width: usize, shapes: &[Capsule], value: f64) {
    for y in 0..height {
        for x in 0..width {
            let p = Point::new(x as f64 + 0.5, y as f64 + 0.5);
            if shapes.iter().any(|c| c.contains(p)) {
                image[y * width + x] = value;
            }
        }
    }
}
