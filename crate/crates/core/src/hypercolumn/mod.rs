//! Hypercolumn descriptors and classifier scoring.
//!
//! A descriptor concatenates, per tap, the `n × n` neighborhood of every
//! channel (taken at the tap's native resolution, zero-padded) after it has
//! been bilinearly resized to `R × R`, followed by optional auxiliary
//! features. [`assemble`] materializes descriptors; [`score_fast`] evaluates
//! linear classifiers on them without doing so.

mod bench;
mod score;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape_err, Result};
use crate::tensor::FeatureMap;

pub use bench::{bench_paths, BenchConfig, BenchReport};
pub use score::{
    assemble, assemble_at, aux_vector, block_kernel, candidate_grid_features, expand_neighborhood, score_fast, score_fast_multi,
    score_naive_multi, AuxField, LinearClassifiers,
};

/// Side of the coarse candidate-mask discretization.
pub const CANDIDATE_GRID: usize = 10;
pub const DEFAULT_RESOLUTION: usize = 50;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TapEntry {
    pub tap: String,
    pub neighborhood: usize,
}

impl TapEntry {
    pub fn new(tap: impl Into<String>, neighborhood: usize) -> Self {
        Self {
            tap: tap.into(),
            neighborhood,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuxFeatures {
    /// 1 if the pixel lies inside the candidate mask.
    #[serde(default)]
    pub inside_candidate: bool,
    /// The candidate mask averaged onto a 10×10 grid, same at every pixel.
    #[serde(default)]
    pub candidate_grid: bool,
    /// Normalized `(x, y)` of the pixel center.
    #[serde(default)]
    pub location: bool,
}

impl AuxFeatures {
    pub fn all() -> Self {
        Self {
            inside_candidate: true,
            candidate_grid: true,
            location: true,
        }
    }

    pub fn dim(&self) -> usize {
        usize::from(self.inside_candidate)
            + if self.candidate_grid { CANDIDATE_GRID * CANDIDATE_GRID } else { 0 }
            + if self.location { 2 } else { 0 }
    }

    pub fn needs_candidate(&self) -> bool {
        self.inside_candidate || self.candidate_grid
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HypercolumnSpec {
    pub entries: Vec<TapEntry>,
    #[serde(default)]
    pub aux: AuxFeatures,
    #[serde(default = "default_resolution")]
    pub resolution: usize,
}

fn default_resolution() -> usize {
    DEFAULT_RESOLUTION
}

impl HypercolumnSpec {
    pub fn new(entries: Vec<TapEntry>, aux: AuxFeatures, resolution: usize) -> Result<Self> {
        let spec = Self {
            entries,
            aux,
            resolution,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.resolution == 0 {
            return Err(invalid!("target resolution must be positive"));
        }
        if self.entries.is_empty() && self.aux.dim() == 0 {
            return Err(invalid!("hypercolumn spec selects no features"));
        }
        let mut seen = std::collections::BTreeSet::new();
        for e in &self.entries {
            if !matches!(e.neighborhood, 1 | 3 | 5) {
                return Err(invalid!(
                    "tap {:?}: neighborhood must be 1, 3 or 5, got {}",
                    e.tap,
                    e.neighborhood
                ));
            }
            if !seen.insert(e.tap.as_str()) {
                return Err(invalid!("tap {:?} listed twice", e.tap));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("spec serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let spec: Self = serde_json::from_str(s)?;
        spec.validate()?;
        Ok(spec)
    }
}

/// Total descriptor length: `Σ n_j² · channels_j` plus enabled aux dims.
pub fn descriptor_dim(spec: &HypercolumnSpec, tap_channels: &BTreeMap<String, usize>) -> Result<usize> {
    let mut dim = spec.aux.dim();
    for e in &spec.entries {
        let c = tap_channels
            .get(&e.tap)
            .ok_or_else(|| invalid!("unknown tap {:?}", e.tap))?;
        dim += e.neighborhood * e.neighborhood * c;
    }
    Ok(dim)
}

/// One tap's slice of the descriptor.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Block {
    pub tap: String,
    pub neighborhood: usize,
    pub channels: usize,
    /// Native `(height, width)` of the tap.
    pub native: (usize, usize),
    pub offset: usize,
    pub len: usize,
}

impl Block {
    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockLayout {
    pub blocks: Vec<Block>,
    pub aux: AuxFeatures,
    /// Offset of the first aux feature; aux features are contiguous, ordered
    /// inside-bit, candidate grid, location.
    pub aux_offset: usize,
    pub dim: usize,
    pub resolution: usize,
}

impl BlockLayout {
    pub fn new(spec: &HypercolumnSpec, tap_shapes: &BTreeMap<String, (usize, usize, usize)>) -> Result<Self> {
        spec.validate()?;
        let mut blocks = Vec::with_capacity(spec.entries.len());
        let mut offset = 0;
        for e in &spec.entries {
            let &(h, w, c) = tap_shapes
                .get(&e.tap)
                .ok_or_else(|| invalid!("unknown tap {:?}", e.tap))?;
            if h == 0 || w == 0 || c == 0 {
                return Err(invalid!("tap {:?} has an empty shape {h}x{w}x{c}", e.tap));
            }
            if (h, w) == (1, 1) && e.neighborhood != 1 {
                return Err(invalid!(
                    "tap {:?} is 1x1 and only supports neighborhood 1, got {}",
                    e.tap,
                    e.neighborhood
                ));
            }
            let len = e.neighborhood * e.neighborhood * c;
            blocks.push(Block {
                tap: e.tap.clone(),
                neighborhood: e.neighborhood,
                channels: c,
                native: (h, w),
                offset,
                len,
            });
            offset += len;
        }
        Ok(Self {
            blocks,
            aux: spec.aux,
            aux_offset: offset,
            dim: offset + spec.aux.dim(),
            resolution: spec.resolution,
        })
    }

    pub fn aux_range(&self) -> std::ops::Range<usize> {
        self.aux_offset..self.dim
    }

    /// Human-readable block listing used in dimension errors.
    pub fn describe(&self) -> String {
        let mut parts: Vec<String> = self
            .blocks
            .iter()
            .map(|b| format!("{}(n={})[{}..{}]", b.tap, b.neighborhood, b.offset, b.offset + b.len))
            .collect();
        if self.aux.dim() > 0 {
            parts.push(format!("aux[{}..{}]", self.aux_offset, self.dim));
        }
        parts.join(", ")
    }

    /// Slices of a descriptor, one per block, then the aux slice.
    pub fn split<'a>(&self, descriptor: &'a [f64]) -> Result<Vec<&'a [f64]>> {
        if descriptor.len() != self.dim {
            return Err(shape_err!(
                "descriptor has {} values, layout expects {} ({})",
                descriptor.len(),
                self.dim,
                self.describe()
            ));
        }
        let mut out: Vec<&[f64]> = self.blocks.iter().map(|b| &descriptor[b.range()]).collect();
        out.push(&descriptor[self.aux_range()]);
        Ok(out)
    }

    /// Verify that `taps` has every tap with the shape this layout was built for.
    pub fn check_taps(&self, taps: &BTreeMap<String, FeatureMap>) -> Result<()> {
        for b in &self.blocks {
            let t = taps
                .get(&b.tap)
                .ok_or_else(|| invalid!("tap {:?} missing from inputs", b.tap))?;
            if t.shape() != (b.native.0, b.native.1, b.channels) {
                return Err(shape_err!(
                    "tap {:?} is {:?}, layout expects {:?}",
                    b.tap,
                    t.shape(),
                    (b.native.0, b.native.1, b.channels)
                ));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn channels(list: &[(&str, usize)]) -> BTreeMap<String, usize> {
        list.iter().map(|&(n, c)| (n.to_string(), c)).collect()
    }

    #[test]
    fn classic_three_layer_dimension() {
        let spec = HypercolumnSpec::new(
            vec![TapEntry::new("pool2", 1), TapEntry::new("conv4", 1), TapEntry::new("fc7", 1)],
            AuxFeatures::default(),
            50,
        )
        .unwrap();
        let dim = descriptor_dim(&spec, &channels(&[("pool2", 256), ("conv4", 384), ("fc7", 4096)])).unwrap();
        assert_eq!(dim, 4736);
    }

    #[test]
    fn neighborhood_dimension() {
        let spec = HypercolumnSpec::new(vec![TapEntry::new("a", 3)], AuxFeatures::default(), 50).unwrap();
        assert_eq!(descriptor_dim(&spec, &channels(&[("a", 8)])).unwrap(), 72);
    }

    #[test]
    fn aux_dimension() {
        let spec = HypercolumnSpec::new(
            vec![TapEntry::new("a", 1), TapEntry::new("b", 1)],
            AuxFeatures::all(),
            50,
        )
        .unwrap();
        assert_eq!(descriptor_dim(&spec, &channels(&[("a", 16), ("b", 32)])).unwrap(), 151);
    }

    #[test]
    fn unknown_tap() {
        let spec = HypercolumnSpec::new(vec![TapEntry::new("zz", 1)], AuxFeatures::default(), 50).unwrap();
        assert!(descriptor_dim(&spec, &channels(&[("a", 1)])).is_err());
    }

    #[test]
    fn spec_validation() {
        assert!(HypercolumnSpec::new(vec![TapEntry::new("a", 2)], AuxFeatures::default(), 50).is_err());
        assert!(HypercolumnSpec::new(vec![], AuxFeatures::default(), 50).is_err());
        assert!(HypercolumnSpec::new(vec![TapEntry::new("a", 1)], AuxFeatures::default(), 0).is_err());
        assert!(HypercolumnSpec::new(
            vec![TapEntry::new("a", 1), TapEntry::new("a", 3)],
            AuxFeatures::default(),
            50
        )
        .is_err());
    }

    #[test]
    fn global_tap_needs_unit_neighborhood() {
        let spec = HypercolumnSpec::new(vec![TapEntry::new("fc", 3)], AuxFeatures::default(), 50).unwrap();
        let shapes = BTreeMap::from([("fc".to_string(), (1, 1, 32))]);
        assert!(BlockLayout::new(&spec, &shapes).is_err());
        let zero = BTreeMap::from([("fc".to_string(), (1, 1, 0))]);
        let spec = HypercolumnSpec::new(vec![TapEntry::new("fc", 1)], AuxFeatures::default(), 50).unwrap();
        assert!(BlockLayout::new(&spec, &zero).is_err());
    }

    #[test]
    fn layout_is_contiguous() {
        let spec = HypercolumnSpec::new(
            vec![TapEntry::new("a", 3), TapEntry::new("b", 1)],
            AuxFeatures {
                location: true,
                ..Default::default()
            },
            20,
        )
        .unwrap();
        let shapes = BTreeMap::from([("a".to_string(), (8, 8, 4)), ("b".to_string(), (1, 1, 6))]);
        let layout = BlockLayout::new(&spec, &shapes).unwrap();
        assert_eq!(layout.blocks[0].range(), 0..36);
        assert_eq!(layout.blocks[1].range(), 36..42);
        assert_eq!(layout.aux_range(), 42..44);
        assert_eq!(layout.dim, 44);
        let d: Vec<f64> = (0..44).map(f64::from).collect();
        let parts = layout.split(&d).unwrap();
        assert_eq!(parts.concat(), d);
        assert!(layout.split(&d[1..]).is_err());
    }

    #[test]
    fn spec_json_round_trip() {
        let spec = HypercolumnSpec::new(
            vec![TapEntry::new("pool1", 3), TapEntry::new("fc", 1)],
            AuxFeatures::all(),
            50,
        )
        .unwrap();
        assert_eq!(HypercolumnSpec::from_json(&spec.to_json()).unwrap(), spec);
        assert!(HypercolumnSpec::from_json(r#"{"entries":[{"tap":"a","neighborhood":4}]}"#).is_err());
    }
}
