use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{BlockLayout, CANDIDATE_GRID};
use crate::error::{invalid, shape_err, Result};
use crate::tensor::{axis_stencils, convolve, dot, resize, FeatureMap, Kernel};

/// `count` linear classifiers over a `dim`-dimensional descriptor,
/// weights stored row-major `[count, dim]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearClassifiers {
    pub dim: usize,
    pub weights: Vec<f64>,
    pub biases: Vec<f64>,
}

impl LinearClassifiers {
    pub fn new(dim: usize, weights: Vec<f64>, biases: Vec<f64>) -> Result<Self> {
        if weights.len() != dim * biases.len() {
            return Err(invalid!(
                "{} weights do not form {} classifiers of dimension {dim}",
                weights.len(),
                biases.len()
            ));
        }
        Ok(Self { dim, weights, biases })
    }

    pub fn zeros(dim: usize, count: usize) -> Self {
        Self {
            dim,
            weights: vec![0.0; dim * count],
            biases: vec![0.0; count],
        }
    }

    pub fn count(&self) -> usize {
        self.biases.len()
    }

    pub fn weight(&self, i: usize) -> &[f64] {
        &self.weights[i * self.dim..(i + 1) * self.dim]
    }

    pub fn weight_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.weights[i * self.dim..(i + 1) * self.dim]
    }
}

/// Area average of an `R × R` mask over a 10×10 partition of the box.
pub fn candidate_grid_features(mask: &FeatureMap) -> Vec<f64> {
    let (h, w, _) = mask.shape();
    let g = CANDIDATE_GRID;
    // overlap of [lo, hi) with pixel [p, p+1)
    let overlaps = |n: usize, cell: usize| -> Vec<(usize, f64)> {
        let lo = cell as f64 * n as f64 / g as f64;
        let hi = (cell + 1) as f64 * n as f64 / g as f64;
        (lo.floor() as usize..(hi.ceil() as usize).min(n))
            .map(|p| (p, (hi.min(p as f64 + 1.0) - lo.max(p as f64)).max(0.0)))
            .filter(|&(_, a)| a > 0.0)
            .collect()
    };
    let rows: Vec<_> = (0..g).map(|u| overlaps(h, u)).collect();
    let cols: Vec<_> = (0..g).map(|v| overlaps(w, v)).collect();
    let area = (h as f64 / g as f64) * (w as f64 / g as f64);
    let mut out = Vec::with_capacity(g * g);
    for r in &rows {
        for c in &cols {
            let mut s = 0.0;
            for &(y, ay) in r {
                for &(x, ax) in c {
                    s += ay * ax * mask.get(y, x, 0);
                }
            }
            out.push(s / area);
        }
    }
    out
}

/// Auxiliary per-pixel features for one candidate, precomputed once.
#[derive(Clone, Debug)]
pub struct AuxField {
    layout_aux: super::AuxFeatures,
    resolution: usize,
    inside: Option<FeatureMap>,
    grid: Vec<f64>,
}

impl AuxField {
    pub fn new(layout: &BlockLayout, candidate: Option<&FeatureMap>) -> Result<Self> {
        let aux = layout.aux;
        let r = layout.resolution;
        match (aux.needs_candidate(), candidate) {
            (true, None) => return Err(invalid!("spec uses candidate features but no candidate mask was given")),
            (false, Some(_)) => {
                return Err(invalid!("candidate mask given but spec has no candidate features"))
            }
            (true, Some(m)) if m.shape() != (r, r, 1) => {
                return Err(shape_err!("candidate mask is {:?}, expected {:?}", m.shape(), (r, r, 1)))
            }
            _ => {}
        }
        let grid = match candidate {
            Some(m) if aux.candidate_grid => candidate_grid_features(m),
            _ => Vec::new(),
        };
        Ok(Self {
            layout_aux: aux,
            resolution: r,
            inside: candidate.filter(|_| aux.inside_candidate).cloned(),
            grid,
        })
    }

    pub fn dim(&self) -> usize {
        self.layout_aux.dim()
    }

    /// Write the aux features of pixel `(y, x)` into `out` (length [`dim`](Self::dim)).
    pub fn write(&self, y: usize, x: usize, out: &mut [f64]) {
        let mut i = 0;
        if let Some(m) = &self.inside {
            out[i] = m.get(y, x, 0);
            i += 1;
        }
        if self.layout_aux.candidate_grid {
            out[i..i + self.grid.len()].copy_from_slice(&self.grid);
            i += self.grid.len();
        }
        if self.layout_aux.location {
            let r = self.resolution as f64;
            out[i] = (x as f64 + 0.5) / r;
            out[i + 1] = (y as f64 + 0.5) / r;
        }
    }

    /// Contribution `w_aux · aux(y, x)` for one classifier's aux weights.
    pub fn dot(&self, y: usize, x: usize, weights: &[f64]) -> f64 {
        let mut i = 0;
        let mut s = 0.0;
        if let Some(m) = &self.inside {
            s += weights[0] * m.get(y, x, 0);
            i += 1;
        }
        if self.layout_aux.candidate_grid {
            s += dot(&weights[i..i + self.grid.len()], &self.grid);
            i += self.grid.len();
        }
        if self.layout_aux.location {
            let r = self.resolution as f64;
            s += weights[i] * (x as f64 + 0.5) / r + weights[i + 1] * (y as f64 + 0.5) / r;
        }
        s
    }
}

/// Aux vector at one pixel (convenience for tests and sample extraction).
pub fn aux_vector(field: &AuxField, y: usize, x: usize) -> Vec<f64> {
    let mut v = vec![0.0; field.dim()];
    field.write(y, x, &mut v);
    v
}

/// Flatten each `n × n` neighborhood into channels ordered `(dy, dx, c)`,
/// zero outside the map.
pub fn expand_neighborhood(tap: &FeatureMap, n: usize) -> FeatureMap {
    if n == 1 {
        return tap.clone();
    }
    let (h, w, c) = tap.shape();
    let p = (n - 1) / 2;
    let mut out = FeatureMap::zeros(h, w, n * n * c);
    for y in 0..h {
        for x in 0..w {
            let dst = out.pixel_mut(y, x);
            for dy in 0..n {
                let sy = (y + dy) as isize - p as isize;
                if sy < 0 || sy >= h as isize {
                    continue;
                }
                for dx in 0..n {
                    let sx = (x + dx) as isize - p as isize;
                    if sx < 0 || sx >= w as isize {
                        continue;
                    }
                    let o = (dy * n + dx) * c;
                    dst[o..o + c].copy_from_slice(tap.pixel(sy as usize, sx as usize));
                }
            }
        }
    }
    out
}

/// Descriptors at selected `(y, x)` positions only; bit-identical to the
/// corresponding pixels of [`assemble`].
pub fn assemble_at(
    taps: &BTreeMap<String, FeatureMap>,
    layout: &BlockLayout,
    candidate: Option<&FeatureMap>,
    pixels: &[(usize, usize)],
) -> Result<Vec<Vec<f64>>> {
    layout.check_taps(taps)?;
    let field = AuxField::new(layout, candidate)?;
    let r = layout.resolution;
    if let Some(&(y, x)) = pixels.iter().find(|&&(y, x)| y >= r || x >= r) {
        return Err(invalid!("pixel ({y}, {x}) outside the {r}x{r} grid"));
    }
    let expanded: Vec<FeatureMap> = layout
        .blocks
        .iter()
        .map(|b| expand_neighborhood(&taps[&b.tap], b.neighborhood))
        .collect();
    let stencils: Vec<_> = expanded
        .iter()
        .map(|m| (axis_stencils(m.height(), r), axis_stencils(m.width(), r)))
        .collect();
    Ok(pixels
        .iter()
        .map(|&(y, x)| {
            let mut d = vec![0.0; layout.dim];
            for ((b, m), (ys, xs)) in layout.blocks.iter().zip(&expanded).zip(&stencils) {
                let (sy, sx) = (ys[y], xs[x]);
                let out = &mut d[b.range()];
                let lerp_row = |row: usize, ch: usize| {
                    let a = m.get(row, sx.lo, ch);
                    if sx.t == 0.0 {
                        a
                    } else {
                        a + sx.t * (m.get(row, sx.hi, ch) - a)
                    }
                };
                for (ch, o) in out.iter_mut().enumerate() {
                    let a = lerp_row(sy.lo, ch);
                    *o = if sy.t == 0.0 { a } else { a + sy.t * (lerp_row(sy.hi, ch) - a) };
                }
            }
            field.write(y, x, &mut d[layout.aux_offset..]);
            d
        })
        .collect())
}

/// Reference path: the full `R × R × D` descriptor map.
pub fn assemble(
    taps: &BTreeMap<String, FeatureMap>,
    layout: &BlockLayout,
    candidate: Option<&FeatureMap>,
) -> Result<FeatureMap> {
    layout.check_taps(taps)?;
    let field = AuxField::new(layout, candidate)?;
    let r = layout.resolution;
    let parts: Vec<FeatureMap> = layout
        .blocks
        .iter()
        .map(|b| resize(&expand_neighborhood(&taps[&b.tap], b.neighborhood), r, r))
        .collect();
    let mut out = FeatureMap::zeros(r, r, layout.dim);
    for y in 0..r {
        for x in 0..r {
            let px = out.pixel_mut(y, x);
            for (b, part) in layout.blocks.iter().zip(&parts) {
                px[b.range()].copy_from_slice(part.pixel(y, x));
            }
            field.write(y, x, &mut px[layout.aux_offset..]);
        }
    }
    Ok(out)
}

fn check_classifiers(layout: &BlockLayout, classifiers: &LinearClassifiers) -> Result<()> {
    if classifiers.dim != layout.dim {
        let mismatch = layout
            .blocks
            .iter()
            .find(|b| b.offset + b.len > classifiers.dim)
            .map(|b| format!("block {:?} (n={}) spans {}..{}", b.tap, b.neighborhood, b.offset, b.offset + b.len))
            .unwrap_or_else(|| format!("aux block spans {}..{}", layout.aux_offset, layout.dim));
        return Err(shape_err!(
            "classifier dimension {} != descriptor dimension {}; {mismatch}; layout: {}",
            classifiers.dim,
            layout.dim,
            layout.describe()
        ));
    }
    if classifiers.count() == 0 {
        return Err(invalid!("no classifiers to score"));
    }
    Ok(())
}

/// Pre-sigmoid scores of every classifier at every pixel (`R × R × count`),
/// computed by convolving each tap with its weight block at native
/// resolution and upsampling the score maps.
pub fn score_fast_multi(
    taps: &BTreeMap<String, FeatureMap>,
    layout: &BlockLayout,
    classifiers: &LinearClassifiers,
    candidate: Option<&FeatureMap>,
) -> Result<FeatureMap> {
    check_classifiers(layout, classifiers)?;
    layout.check_taps(taps)?;
    let field = AuxField::new(layout, candidate)?;
    let r = layout.resolution;
    let m = classifiers.count();
    let mut total = FeatureMap::zeros(r, r, m);
    for b in &layout.blocks {
        let kernel = block_kernel(classifiers, b)?;
        let partial = convolve(&taps[&b.tap], &kernel, &vec![0.0; m], (b.neighborhood - 1) / 2)?;
        total.add_scaled(&resize(&partial, r, r), 1.0);
    }
    let aux = layout.aux_range();
    for y in 0..r {
        for x in 0..r {
            let px = total.pixel_mut(y, x);
            for (k, v) in px.iter_mut().enumerate() {
                if !aux.is_empty() {
                    *v += field.dot(y, x, &classifiers.weight(k)[aux.clone()]);
                }
                *v += classifiers.biases[k];
            }
        }
    }
    Ok(total)
}

/// The weight block of every classifier for one tap, as a convolution kernel
/// with one output channel per classifier.
pub fn block_kernel(classifiers: &LinearClassifiers, block: &super::Block) -> Result<Kernel> {
    let m = classifiers.count();
    let mut data = Vec::with_capacity(m * block.len);
    for k in 0..m {
        data.extend_from_slice(&classifiers.weight(k)[block.range()]);
    }
    Kernel::new(m, block.neighborhood, block.channels, data)
}

/// Single-classifier fast path: an `R × R × 1` score map.
pub fn score_fast(
    taps: &BTreeMap<String, FeatureMap>,
    layout: &BlockLayout,
    weights: &[f64],
    bias: f64,
    candidate: Option<&FeatureMap>,
) -> Result<FeatureMap> {
    let c = LinearClassifiers::new(weights.len(), weights.to_vec(), vec![bias])?;
    score_fast_multi(taps, layout, &c, candidate)
}

/// Naive path: materialize descriptors, then take dot products.
pub fn score_naive_multi(
    taps: &BTreeMap<String, FeatureMap>,
    layout: &BlockLayout,
    classifiers: &LinearClassifiers,
    candidate: Option<&FeatureMap>,
) -> Result<FeatureMap> {
    check_classifiers(layout, classifiers)?;
    let desc = assemble(taps, layout, candidate)?;
    let r = layout.resolution;
    let m = classifiers.count();
    Ok(FeatureMap::from_fn(r, r, m, |y, x, k| {
        dot(classifiers.weight(k), desc.pixel(y, x)) + classifiers.biases[k]
    }))
}
