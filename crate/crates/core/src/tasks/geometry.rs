use std::fmt;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{invalid, shape_err, Error, Result};

/// Axis-aligned box in continuous image coordinates; pixel `(x, y)` covers
/// `[x, x+1) × [y, y+1)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 4]", into = "[f64; 4]")]
pub struct BoundingBox {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl TryFrom<[f64; 4]> for BoundingBox {
    type Error = Error;

    fn try_from(v: [f64; 4]) -> Result<Self> {
        BoundingBox::new(v[0], v[1], v[2], v[3])
    }
}

impl From<BoundingBox> for [f64; 4] {
    fn from(b: BoundingBox) -> Self {
        [b.x0, b.y0, b.x1, b.y1]
    }
}

impl BoundingBox {
    pub fn new(x0: f64, y0: f64, x1: f64, y1: f64) -> Result<Self> {
        if ![x0, y0, x1, y1].iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite(format!("box ({x0}, {y0}, {x1}, {y1})")));
        }
        if x0 >= x1 || y0 >= y1 {
            return Err(invalid!("degenerate box ({x0}, {y0}, {x1}, {y1})"));
        }
        Ok(Self { x0, y0, x1, y1 })
    }

    pub fn width(&self) -> f64 {
        self.x1 - self.x0
    }

    pub fn height(&self) -> f64 {
        self.y1 - self.y0
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn intersection(&self, other: &BoundingBox) -> f64 {
        let w = (self.x1.min(other.x1) - self.x0.max(other.x0)).max(0.0);
        let h = (self.y1.min(other.y1) - self.y0.max(other.y0)).max(0.0);
        w * h
    }

    pub fn iou(&self, other: &BoundingBox) -> f64 {
        let inter = self.intersection(other);
        inter / (self.area() + other.area() - inter)
    }

    /// Clip to `[0, width] × [0, height]`; `None` if nothing remains.
    pub fn clip(&self, height: usize, width: usize) -> Option<BoundingBox> {
        BoundingBox::new(
            self.x0.max(0.0),
            self.y0.max(0.0),
            self.x1.min(width as f64),
            self.y1.min(height as f64),
        )
        .ok()
    }

    pub fn translate(&self, dx: f64, dy: f64) -> BoundingBox {
        BoundingBox {
            x0: self.x0 + dx,
            y0: self.y0 + dy,
            x1: self.x1 + dx,
            y1: self.y1 + dy,
        }
    }
}

/// Integer pixel rectangle `[x0, x1) × [y0, y1)`: a detection box padded by
/// a fraction of its size on every side, rounded outward and clipped.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ExpandedBox {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

pub const DEFAULT_EXPANSION: f64 = 0.1;

impl ExpandedBox {
    pub fn new(bbox: &BoundingBox, expansion: f64, height: usize, width: usize) -> Result<Self> {
        if !(expansion >= 0.0 && expansion.is_finite()) {
            return Err(invalid!("expansion fraction must be finite and non-negative, got {expansion}"));
        }
        let clipped = bbox
            .clip(height, width)
            .ok_or_else(|| invalid!("box {bbox:?} lies outside the {height}x{width} image"))?;
        let px = expansion * clipped.width();
        let py = expansion * clipped.height();
        let x0 = (clipped.x0 - px).floor().max(0.0) as usize;
        let y0 = (clipped.y0 - py).floor().max(0.0) as usize;
        let x1 = ((clipped.x1 + px).ceil() as usize).min(width);
        let y1 = ((clipped.y1 + py).ceil() as usize).min(height);
        Ok(Self { x0, y0, x1, y1 })
    }

    pub fn full(height: usize, width: usize) -> Self {
        Self {
            x0: 0,
            y0: 0,
            x1: width,
            y1: height,
        }
    }

    pub fn width(&self) -> usize {
        self.x1 - self.x0
    }

    pub fn height(&self) -> usize {
        self.y1 - self.y0
    }

    pub fn diagonal(&self) -> f64 {
        (self.width() as f64).hypot(self.height() as f64)
    }

    pub fn contains_point(&self, x: f64, y: f64) -> bool {
        x >= self.x0 as f64 && x < self.x1 as f64 && y >= self.y0 as f64 && y < self.y1 as f64
    }

    pub fn contains_box(&self, b: &BoundingBox) -> bool {
        b.x0 >= self.x0 as f64 && b.y0 >= self.y0 as f64 && b.x1 <= self.x1 as f64 && b.y1 <= self.y1 as f64
    }

    pub fn to_box(&self) -> BoundingBox {
        BoundingBox {
            x0: self.x0 as f64,
            y0: self.y0 as f64,
            x1: self.x1 as f64,
            y1: self.y1 as f64,
        }
    }

    /// Image coordinates of the center of heatmap pixel `(i, j)` at resolution `r`.
    pub fn heat_to_image(&self, i: usize, j: usize, r: usize) -> (f64, f64) {
        (
            self.x0 as f64 + (j as f64 + 0.5) * self.width() as f64 / r as f64,
            self.y0 as f64 + (i as f64 + 0.5) * self.height() as f64 / r as f64,
        )
    }
}

/// Binary image mask. Serializes as a run-length string
/// `"HxW:r0,r1,..."` of alternating off/on runs in row-major order,
/// starting with an off run.
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct Mask {
    height: usize,
    width: usize,
    bits: Vec<bool>,
}

impl fmt::Debug for Mask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Mask({}x{}, {} on)", self.height, self.width, self.count())
    }
}

impl Mask {
    pub fn new(height: usize, width: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != height * width {
            return Err(invalid!("mask {height}x{width} needs {} bits, got {}", height * width, bits.len()));
        }
        Ok(Self { height, width, bits })
    }

    pub fn empty(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            bits: vec![false; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut bits = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                bits.push(f(y, x));
            }
        }
        Self { height, width, bits }
    }

    pub fn from_rect(height: usize, width: usize, rect: &ExpandedBox) -> Self {
        Self::from_fn(height, width, |y, x| {
            (rect.y0..rect.y1).contains(&y) && (rect.x0..rect.x1).contains(&x)
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.bits[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, on: bool) {
        self.bits[y * self.width + x] = on;
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|&b| b)
    }

    fn check_same(&self, other: &Mask) -> Result<()> {
        if self.height != other.height || self.width != other.width {
            return Err(shape_err!(
                "mask sizes differ: {}x{} vs {}x{}",
                self.height,
                self.width,
                other.height,
                other.width
            ));
        }
        Ok(())
    }

    pub fn intersection_count(&self, other: &Mask) -> Result<usize> {
        self.check_same(other)?;
        Ok(self.bits.iter().zip(&other.bits).filter(|(a, b)| **a && **b).count())
    }

    pub fn union_count(&self, other: &Mask) -> Result<usize> {
        self.check_same(other)?;
        Ok(self.bits.iter().zip(&other.bits).filter(|(a, b)| **a || **b).count())
    }

    /// Intersection over union; two empty masks give `(0.0, true)`.
    pub fn iou(&self, other: &Mask) -> Result<(f64, bool)> {
        let union = self.union_count(other)?;
        if union == 0 {
            return Ok((0.0, true));
        }
        Ok((self.intersection_count(other)? as f64 / union as f64, false))
    }

    pub fn union(&self, other: &Mask) -> Result<Mask> {
        self.check_same(other)?;
        Ok(Mask {
            height: self.height,
            width: self.width,
            bits: self.bits.iter().zip(&other.bits).map(|(a, b)| *a || *b).collect(),
        })
    }

    /// Tight pixel-extent box of the on pixels.
    pub fn bbox(&self) -> Option<BoundingBox> {
        let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(y, x) {
                    x0 = x0.min(x);
                    y0 = y0.min(y);
                    x1 = x1.max(x + 1);
                    y1 = y1.max(y + 1);
                }
            }
        }
        (x0 != usize::MAX).then(|| BoundingBox {
            x0: x0 as f64,
            y0: y0 as f64,
            x1: x1 as f64,
            y1: y1 as f64,
        })
    }

    /// 4-connectivity of the on pixels (an empty mask is not connected).
    pub fn is_connected(&self) -> bool {
        let Some(start) = self.bits.iter().position(|&b| b) else {
            return false;
        };
        let mut seen = vec![false; self.bits.len()];
        let mut stack = vec![start];
        seen[start] = true;
        let mut reached = 0;
        while let Some(i) = stack.pop() {
            reached += 1;
            let (y, x) = (i / self.width, i % self.width);
            let mut push = |j: usize| {
                if self.bits[j] && !seen[j] {
                    seen[j] = true;
                    stack.push(j);
                }
            };
            if y > 0 {
                push(i - self.width);
            }
            if y + 1 < self.height {
                push(i + self.width);
            }
            if x > 0 {
                push(i - 1);
            }
            if x + 1 < self.width {
                push(i + 1);
            }
        }
        reached == self.count()
    }

    pub fn to_rle(&self) -> String {
        let mut runs = Vec::new();
        let mut current = false;
        let mut len = 0usize;
        for &b in &self.bits {
            if b == current {
                len += 1;
            } else {
                runs.push(len);
                current = b;
                len = 1;
            }
        }
        runs.push(len);
        let body: Vec<String> = runs.iter().map(usize::to_string).collect();
        format!("{}x{}:{}", self.height, self.width, body.join(","))
    }

    pub fn from_rle(s: &str) -> Result<Self> {
        let bad = || Error::Format(format!("malformed mask run-length string {s:?}"));
        let (dims, body) = s.split_once(':').ok_or_else(bad)?;
        let (h, w) = dims.split_once('x').ok_or_else(bad)?;
        let height: usize = h.parse().map_err(|_| bad())?;
        let width: usize = w.parse().map_err(|_| bad())?;
        let mut bits = Vec::with_capacity(height * width);
        let mut on = false;
        for run in body.split(',') {
            let n: usize = run.parse().map_err(|_| bad())?;
            if bits.len() + n > height * width {
                return Err(bad());
            }
            bits.extend(std::iter::repeat(on).take(n));
            on = !on;
        }
        if bits.len() != height * width {
            return Err(bad());
        }
        Ok(Self { height, width, bits })
    }
}

impl Serialize for Mask {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_rle())
    }
}

impl<'de> Deserialize<'de> for Mask {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        Mask::from_rle(&s).map_err(serde::de::Error::custom)
    }
}

/// Per-pixel label image; `0` is background, `k > 0` is `names[k - 1]`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelImage {
    pub height: usize,
    pub width: usize,
    pub names: Vec<String>,
    pub labels: Vec<u16>,
}

impl LabelImage {
    pub fn new(height: usize, width: usize, names: Vec<String>, labels: Vec<u16>) -> Result<Self> {
        if labels.len() != height * width {
            return Err(invalid!("label image {height}x{width} needs {} labels, got {}", height * width, labels.len()));
        }
        if let Some(&l) = labels.iter().find(|&&l| l as usize > names.len()) {
            return Err(invalid!("label {l} exceeds the {} named classes", names.len()));
        }
        Ok(Self { height, width, names, labels })
    }

    pub fn get(&self, y: usize, x: usize) -> u16 {
        self.labels[y * self.width + x]
    }

    pub fn name_at(&self, y: usize, x: usize) -> Option<&str> {
        match self.get(y, x) {
            0 => None,
            l => Some(&self.names[l as usize - 1]),
        }
    }

    pub fn foreground(&self) -> Mask {
        Mask::from_fn(self.height, self.width, |y, x| self.get(y, x) != 0)
    }

    pub fn mask_of(&self, name: &str) -> Mask {
        let id = self.names.iter().position(|n| n == name).map(|i| i as u16 + 1);
        Mask::from_fn(self.height, self.width, |y, x| Some(self.get(y, x)) == id)
    }
}

/// Superpixel label map over an image.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Superpixels {
    pub height: usize,
    pub width: usize,
    pub labels: Vec<u32>,
}

impl Superpixels {
    pub fn new(height: usize, width: usize, labels: Vec<u32>) -> Result<Self> {
        if labels.len() != height * width {
            return Err(invalid!("superpixel map {height}x{width} needs {} labels, got {}", height * width, labels.len()));
        }
        Ok(Self { height, width, labels })
    }

    /// Square cells of side `cell` (the last row/column of cells may be smaller).
    pub fn grid(height: usize, width: usize, cell: usize) -> Result<Self> {
        if cell == 0 {
            return Err(invalid!("superpixel cell size must be positive"));
        }
        let cols = width.div_ceil(cell);
        let labels = (0..height * width)
            .map(|i| ((i / width / cell) * cols + (i % width) / cell) as u32)
            .collect();
        Ok(Self { height, width, labels })
    }

    pub fn count(&self) -> usize {
        self.labels.iter().map(|&l| l as usize + 1).max().unwrap_or(0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn box_iou_cases() {
        let a = BoundingBox::new(0.0, 0.0, 2.0, 2.0).unwrap();
        let b = BoundingBox::new(1.0, 0.0, 3.0, 2.0).unwrap();
        assert_eq!(a.iou(&a), 1.0);
        assert!((a.iou(&b) - 2.0 / 6.0).abs() < 1e-15);
        assert_eq!(a.iou(&a.translate(5.0, 0.0)), 0.0);
        assert!(BoundingBox::new(1.0, 0.0, 1.0, 2.0).is_err());
    }

    #[test]
    fn expanded_box_rounds_outward_and_clips() {
        let b = BoundingBox::new(10.0, 10.0, 20.0, 30.0).unwrap();
        let e = ExpandedBox::new(&b, 0.1, 100, 100).unwrap();
        assert_eq!(e, ExpandedBox { x0: 9, y0: 8, x1: 21, y1: 32 });
        let edge = BoundingBox::new(0.0, 0.0, 10.0, 10.0).unwrap();
        assert_eq!(ExpandedBox::new(&edge, 0.1, 10, 10).unwrap(), ExpandedBox::full(10, 10));
        assert!(ExpandedBox::new(&b.translate(200.0, 0.0), 0.1, 100, 100).is_err());
    }

    #[test]
    fn rle_examples() {
        let m = Mask::new(2, 3, vec![true, true, false, false, false, true]).unwrap();
        assert_eq!(m.to_rle(), "2x3:0,2,3,1");
        assert_eq!(Mask::empty(2, 2).to_rle(), "2x2:4");
        assert!(Mask::from_rle("2x2:1,1,1").is_err());
        assert!(Mask::from_rle("2x2:5").is_err());
        assert!(Mask::from_rle("junk").is_err());
    }

    #[test]
    fn mask_iou_nested_half() {
        let a = Mask::from_fn(10, 10, |_, _| true);
        let b = Mask::from_fn(10, 10, |y, _| y < 5);
        assert_eq!(a.iou(&b).unwrap(), (0.5, false));
        assert_eq!(Mask::empty(3, 3).iou(&Mask::empty(3, 3)).unwrap(), (0.0, true));
        assert!(a.iou(&Mask::empty(3, 3)).is_err());
    }

    #[test]
    fn connectivity() {
        assert!(Mask::from_fn(4, 4, |y, x| y == 1 || x == 2).is_connected());
        assert!(!Mask::from_fn(4, 4, |y, x| (y, x) == (0, 0) || (y, x) == (3, 3)).is_connected());
        assert!(!Mask::empty(2, 2).is_connected());
    }

    #[test]
    fn superpixel_grid_labels() {
        let s = Superpixels::grid(5, 5, 2).unwrap();
        assert_eq!(s.count(), 9);
        assert_eq!(s.labels[0], 0);
        assert_eq!(s.labels[4], 2);
        assert_eq!(s.labels[24], 8);
    }

    proptest! {
        #[test]
        fn rle_round_trip(h in 1usize..8, w in 1usize..8, seed in any::<u64>()) {
            let m = Mask::from_fn(h, w, |y, x| (seed >> ((y * w + x) % 64)) & 1 == 1);
            let json = serde_json::to_string(&m).unwrap();
            prop_assert_eq!(serde_json::from_str::<Mask>(&json).unwrap(), m);
        }

        #[test]
        fn expanded_box_contains_clipped_box(
            x0 in -20.0f64..80.0, y0 in -20.0f64..80.0, w in 0.5f64..60.0, h in 0.5f64..60.0, rho in 0.0f64..0.5,
        ) {
            let b = BoundingBox::new(x0, y0, x0 + w, y0 + h).unwrap();
            if let Some(c) = b.clip(64, 64) {
                let e = ExpandedBox::new(&b, rho, 64, 64).unwrap();
                prop_assert!(e.contains_box(&c));
                prop_assert!(e.x1 <= 64 && e.y1 <= 64 && e.width() > 0 && e.height() > 0);
            }
        }
    }
}
