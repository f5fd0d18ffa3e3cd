//! A K×K grid of location-specific logistic classifiers.
//!
//! Training ignores interpolation: every pixel belongs to exactly one cell
//! and each cell's classifier sees only its own pixels. At prediction time
//! all K² classifiers run at every pixel and their probabilities are mixed
//! with bilinear weights over the cell centers.

pub mod logistic;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backbone::TapSet;
use crate::error::{invalid, shape_err, Error, Result};
use crate::heatmap::Heatmap;
use crate::hypercolumn::{score_fast_multi, BlockLayout, HypercolumnSpec, LinearClassifiers};
use crate::tensor::{dot, sigmoid, FeatureMap};

pub use logistic::{LogisticFit, SolverConfig};

pub const DEFAULT_GRID: usize = 10;
pub const DEFAULT_LAMBDA: f64 = 1e-4;

/// Per-pixel `(cell index, weight)` pairs, cells indexed `u * K + v`.
#[derive(Clone, Debug, PartialEq)]
pub struct GridInterp {
    pub k: usize,
    pub resolution: usize,
    pub entries: Vec<Vec<(usize, f64)>>,
}

impl GridInterp {
    pub fn at(&self, y: usize, x: usize) -> &[(usize, f64)] {
        &self.entries[y * self.resolution + x]
    }
}

fn cell_axis(k: usize, r: usize, i: usize) -> [(usize, f64); 2] {
    let center = (i as f64 + 0.5) / r as f64;
    let g = (center * k as f64 - 0.5).clamp(0.0, (k - 1) as f64);
    let lo = (g.floor() as usize).min(k - 1);
    let t = g - lo as f64;
    if lo + 1 >= k || t == 0.0 {
        [(lo, 1.0), (lo, 0.0)]
    } else {
        [(lo, 1.0 - t), (lo + 1, t)]
    }
}

/// Bilinear weights of each pixel center over the K×K cell centers
/// `((u + 0.5) / K, (v + 0.5) / K)`, clamped to the edge cells.
pub fn grid_interp(k: usize, r: usize) -> GridInterp {
    assert!(k >= 1 && r >= 1, "grid and resolution must be positive");
    let axes: Vec<_> = (0..r).map(|i| cell_axis(k, r, i)).collect();
    let mut entries = Vec::with_capacity(r * r);
    for ay in &axes {
        for ax in &axes {
            let mut e = Vec::with_capacity(4);
            for &(u, wy) in ay.iter().filter(|p| p.1 != 0.0) {
                for &(v, wx) in ax.iter().filter(|p| p.1 != 0.0) {
                    e.push((u * k + v, wy * wx));
                }
            }
            entries.push(e);
        }
    }
    GridInterp {
        k,
        resolution: r,
        entries,
    }
}

/// Training cell of every pixel: `(⌊y·K/R⌋, ⌊x·K/R⌋)` flattened as `u * K + v`.
pub fn assign_cells(r: usize, k: usize) -> Result<Vec<usize>> {
    if k == 0 || r < k {
        return Err(invalid!("resolution {r} must be at least the grid size {k}"));
    }
    let axis: Vec<usize> = (0..r).map(|i| i * k / r).collect();
    Ok(axis
        .iter()
        .flat_map(|&u| axis.iter().map(move |&v| u * k + v))
        .collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainingSample {
    pub descriptor: Vec<f64>,
    pub y: usize,
    pub x: usize,
    pub label: bool,
    pub instance: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CellFit {
    Solved {
        samples: usize,
        positives: usize,
        iterations: usize,
        grad_norm: f64,
        converged: bool,
    },
    /// Single-class (or empty) cell: `w = 0`, `b` = clipped log-odds.
    Degenerate { samples: usize, positives: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridTrainConfig {
    pub k: usize,
    pub lambda: f64,
    pub solver: SolverConfig,
}

impl Default for GridTrainConfig {
    fn default() -> Self {
        Self {
            k: DEFAULT_GRID,
            lambda: DEFAULT_LAMBDA,
            solver: SolverConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifierGrid {
    pub k: usize,
    pub lambda: f64,
    pub spec: HypercolumnSpec,
    pub layout: BlockLayout,
    /// K² classifiers, cell `u * K + v`.
    pub classifiers: LinearClassifiers,
    pub fits: Vec<CellFit>,
}

impl ClassifierGrid {
    pub fn interp(&self) -> GridInterp {
        grid_interp(self.k, self.spec.resolution)
    }

    /// `σ(w_k · f + b_k)`
    pub fn cell_probability(&self, cell: usize, descriptor: &[f64]) -> f64 {
        sigmoid(dot(self.classifiers.weight(cell), descriptor) + self.classifiers.biases[cell])
    }
}

/// Closed-form prior for a single-class cell: `log(p / (1 - p))` with
/// `p` clipped to `[1/(m+2), (m+1)/(m+2)]`.
pub fn degenerate_bias(positives: usize, samples: usize) -> f64 {
    let m = samples as f64;
    let p = if samples == 0 { 0.5 } else { positives as f64 / m };
    let p = p.clamp(1.0 / (m + 2.0), (m + 1.0) / (m + 2.0));
    (p / (1.0 - p)).ln()
}

fn canonical_order(a: &&TrainingSample, b: &&TrainingSample) -> std::cmp::Ordering {
    (a.instance, a.y, a.x, a.label)
        .cmp(&(b.instance, b.y, b.x, b.label))
        .then_with(|| {
            a.descriptor
                .iter()
                .zip(&b.descriptor)
                .map(|(p, q)| p.total_cmp(q))
                .find(|o| o.is_ne())
                .unwrap_or(std::cmp::Ordering::Equal)
        })
}

/// Train one logistic classifier per cell on that cell's pixels only.
pub fn train_grid(
    samples: &[TrainingSample],
    spec: &HypercolumnSpec,
    layout: &BlockLayout,
    config: &GridTrainConfig,
) -> Result<ClassifierGrid> {
    if samples.is_empty() {
        return Err(invalid!("no training samples"));
    }
    let k = config.k;
    let r = spec.resolution;
    let cells = assign_cells(r, k)?;
    for s in samples {
        if s.descriptor.len() != layout.dim {
            return Err(shape_err!(
                "sample descriptor has {} values, layout expects {}",
                s.descriptor.len(),
                layout.dim
            ));
        }
        if s.y >= r || s.x >= r {
            return Err(invalid!("sample position ({}, {}) outside {r}x{r}", s.y, s.x));
        }
        if s.descriptor.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("training descriptor".into()));
        }
    }
    let mut by_cell: Vec<Vec<&TrainingSample>> = vec![Vec::new(); k * k];
    for s in samples {
        by_cell[cells[s.y * r + s.x]].push(s);
    }

    let fits: Vec<(Vec<f64>, f64, CellFit)> = by_cell
        .into_par_iter()
        .enumerate()
        .map(|(cell, mut members)| {
            members.sort_by(canonical_order);
            let positives: Vec<_> = members.iter().copied().filter(|s| s.label).collect();
            let mut negatives: Vec<_> = members.iter().copied().filter(|s| !s.label).collect();
            if positives.is_empty() || negatives.is_empty() {
                let fit = CellFit::Degenerate {
                    samples: members.len(),
                    positives: positives.len(),
                };
                return (vec![0.0; layout.dim], degenerate_bias(positives.len(), members.len()), fit);
            }
            if let Some(ratio) = config.solver.max_negative_ratio {
                let cap = (ratio * positives.len() as f64).ceil() as usize;
                if negatives.len() > cap {
                    let mut rng = ChaCha8Rng::seed_from_u64(config.solver.seed ^ (cell as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
                    negatives.shuffle(&mut rng);
                    negatives.truncate(cap);
                    negatives.sort_by(canonical_order);
                }
            }
            let used: Vec<&TrainingSample> = positives.into_iter().chain(negatives).collect();
            let rows: Vec<&[f64]> = used.iter().map(|s| s.descriptor.as_slice()).collect();
            let labels: Vec<bool> = used.iter().map(|s| s.label).collect();
            let fit = logistic::fit(&rows, &labels, config.lambda, &config.solver);
            let info = CellFit::Solved {
                samples: rows.len(),
                positives: labels.iter().filter(|&&l| l).count(),
                iterations: fit.iterations,
                grad_norm: fit.grad_norm,
                converged: fit.converged,
            };
            (fit.weights, fit.bias, info)
        })
        .collect();

    let mut weights = Vec::with_capacity(k * k * layout.dim);
    let mut biases = Vec::with_capacity(k * k);
    let mut infos = Vec::with_capacity(k * k);
    for (w, b, info) in fits {
        weights.extend(w);
        biases.push(b);
        infos.push(info);
    }
    Ok(ClassifierGrid {
        k,
        lambda: config.lambda,
        spec: spec.clone(),
        layout: layout.clone(),
        classifiers: LinearClassifiers::new(layout.dim, weights, biases)?,
        fits: infos,
    })
}

/// Mix per-cell probabilities: `p_i = Σ_k α_ik σ(s_ik)`.
pub fn mix_probabilities(scores: &FeatureMap, interp: &GridInterp) -> Result<Heatmap> {
    let r = interp.resolution;
    if scores.shape() != (r, r, interp.k * interp.k) {
        return Err(shape_err!(
            "score map {:?} does not match a {}x{} grid at resolution {r}",
            scores.shape(),
            interp.k,
            interp.k
        ));
    }
    let out = FeatureMap::from_fn(r, r, 1, |y, x, _| {
        let s = scores.pixel(y, x);
        interp.at(y, x).iter().map(|&(c, a)| a * sigmoid(s[c])).sum::<f64>()
    });
    Heatmap::new(out)
}

/// Heatmap for one detection from backbone taps, via the fast scoring path.
pub fn predict_grid(
    grid: &ClassifierGrid,
    taps: &TapSet,
    interp: &GridInterp,
    candidate: Option<&FeatureMap>,
) -> Result<Heatmap> {
    check_interp(grid, interp)?;
    let scores = score_fast_multi(taps, &grid.layout, &grid.classifiers, candidate)?;
    mix_probabilities(&scores, interp)
}

/// Heatmap from an already materialized `R × R × D` descriptor map.
pub fn predict_grid_descriptors(grid: &ClassifierGrid, descriptors: &FeatureMap, interp: &GridInterp) -> Result<Heatmap> {
    check_interp(grid, interp)?;
    let r = grid.spec.resolution;
    if descriptors.shape() != (r, r, grid.layout.dim) {
        return Err(shape_err!(
            "descriptor map {:?} does not match grid ({r}x{r}x{})",
            descriptors.shape(),
            grid.layout.dim
        ));
    }
    let out = FeatureMap::from_fn(r, r, 1, |y, x, _| {
        let f = descriptors.pixel(y, x);
        interp
            .at(y, x)
            .iter()
            .map(|&(c, a)| a * grid.cell_probability(c, f))
            .sum::<f64>()
    });
    Heatmap::new(out)
}

fn check_interp(grid: &ClassifierGrid, interp: &GridInterp) -> Result<()> {
    if interp.k != grid.k || interp.resolution != grid.spec.resolution {
        return Err(shape_err!(
            "interpolation is {}x{} at {}, grid is {}x{} at {}",
            interp.k,
            interp.k,
            interp.resolution,
            grid.k,
            grid.k,
            grid.spec.resolution
        ));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hypercolumn::{AuxFeatures, TapEntry};
    use proptest::prelude::*;
    use std::collections::BTreeMap;

    #[test]
    fn single_cell_everywhere() {
        let g = grid_interp(1, 7);
        assert!(g.entries.iter().all(|e| e == &vec![(0, 1.0)]));
    }

    #[test]
    fn pixel_on_cell_center() {
        // K=5, R=5: pixel centers coincide with cell centers
        let g = grid_interp(5, 5);
        for y in 0..5 {
            for x in 0..5 {
                assert_eq!(g.at(y, x), &[(y * 5 + x, 1.0)]);
            }
        }
    }

    #[test]
    fn hand_evaluated_weights() {
        let g = grid_interp(2, 4);
        let e = g.at(1, 1);
        assert_eq!(e, &[(0, 0.5625), (1, 0.1875), (2, 0.1875), (3, 0.0625)]);
        // pixel 0 sits left of the first center and clamps to it
        assert_eq!(g.at(0, 0), &[(0, 1.0)]);
    }

    #[test]
    fn cell_assignment() {
        let c = assign_cells(50, 10).unwrap();
        let mut counts = vec![0; 100];
        c.iter().for_each(|&i| counts[i] += 1);
        assert!(counts.iter().all(|&n| n == 25));
        assert_eq!(assign_cells(4, 4).unwrap(), (0..16).collect::<Vec<_>>());
        let c = assign_cells(7, 2).unwrap();
        let rows_in_first: usize = (0..7).filter(|&y| c[y * 7] / 2 == 0).count();
        assert_eq!(rows_in_first, 4);
        assert!(assign_cells(3, 4).is_err());
    }

    #[test]
    fn degenerate_bias_formula() {
        // all positive, m = 8 -> p = 9/10
        assert!((degenerate_bias(8, 8) - 9f64.ln()).abs() < 1e-12);
        assert!((degenerate_bias(0, 8) + 9f64.ln()).abs() < 1e-12);
        assert_eq!(degenerate_bias(0, 0), 0.0);
    }

    fn one_tap_layout(r: usize, c: usize) -> (HypercolumnSpec, BlockLayout) {
        let spec = HypercolumnSpec::new(vec![TapEntry::new("t", 1)], AuxFeatures::default(), r).unwrap();
        let layout = BlockLayout::new(&spec, &BTreeMap::from([("t".to_string(), (r, r, c))])).unwrap();
        (spec, layout)
    }

    #[test]
    fn all_positive_cell_uses_prior() {
        let (spec, layout) = one_tap_layout(4, 1);
        let samples: Vec<_> = (0..6)
            .map(|i| TrainingSample {
                descriptor: vec![i as f64],
                y: 0,
                x: 0,
                label: true,
                instance: i,
            })
            .collect();
        let grid = train_grid(
            &samples,
            &spec,
            &layout,
            &GridTrainConfig {
                k: 2,
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(grid.classifiers.weight(0), &[0.0]);
        assert!((grid.classifiers.biases[0] - 7f64.ln()).abs() < 1e-12);
        assert!(matches!(grid.fits[0], CellFit::Degenerate { samples: 6, positives: 6 }));
        assert_eq!(grid.classifiers.biases[3], 0.0);
    }

    #[test]
    fn separable_cell_is_fit_exactly() {
        let (spec, layout) = one_tap_layout(2, 1);
        let samples: Vec<_> = (0..30)
            .map(|i| TrainingSample {
                descriptor: vec![i as f64 / 3.0 - 5.0],
                y: 0,
                x: 0,
                label: i >= 15,
                instance: i,
            })
            .collect();
        let cfg = GridTrainConfig {
            k: 1,
            lambda: 1e-6,
            ..Default::default()
        };
        let grid = train_grid(&samples, &spec, &layout, &cfg).unwrap();
        for s in &samples {
            assert_eq!(grid.cell_probability(0, &s.descriptor) > 0.5, s.label);
        }
    }

    #[test]
    fn uniform_cells_ignore_interpolation() {
        let (spec, layout) = one_tap_layout(6, 2);
        let mut cls = LinearClassifiers::zeros(2, 9);
        for k in 0..9 {
            cls.weight_mut(k).copy_from_slice(&[0.5, -1.0]);
            cls.biases[k] = 0.2;
        }
        let grid = ClassifierGrid {
            k: 3,
            lambda: 0.0,
            spec,
            layout,
            classifiers: cls,
            fits: vec![],
        };
        let tap = FeatureMap::from_fn(6, 6, 2, |y, x, c| (y as f64 - x as f64) * 0.3 + c as f64);
        let taps = BTreeMap::from([("t".to_string(), tap.clone())]);
        let h = predict_grid(&grid, &taps, &grid.interp(), None).unwrap();
        for y in 0..6 {
            for x in 0..6 {
                let expected = sigmoid(0.5 * tap.get(y, x, 0) - tap.get(y, x, 1) + 0.2);
                assert!((h.get(y, x) - expected).abs() < 1e-12);
            }
        }
    }

    proptest! {
        #[test]
        fn interp_rows_sum_to_one(k in 1usize..=16, extra in 0usize..=112) {
            let r = (k + extra).min(128);
            let g = grid_interp(k, r);
            for e in &g.entries {
                let s: f64 = e.iter().map(|p| p.1).sum();
                prop_assert!((s - 1.0).abs() <= 1e-12);
                prop_assert!(e.iter().all(|&(c, a)| a >= 0.0 && c < k * k));
            }
        }
    }
}
