//! The classifier grid grafted onto the backbone as extra layers: one
//! K²-channel convolution per tap, bilinear upsampling, summation, per-channel
//! sigmoid and grid interpolation. Every step is differentiable, so the whole
//! stack can be finetuned on target heatmaps.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backbone::{BackboneGrads, BackboneState, TapSet, Trace};
use crate::error::{invalid, shape_err, Error, Result};
use crate::grid::{grid_interp, mix_probabilities, ClassifierGrid, GridInterp};
use crate::heatmap::Heatmap;
use crate::hypercolumn::{AuxField, BlockLayout, HypercolumnSpec, LinearClassifiers};
use crate::tensor::{convolve, convolve_backward, resize, resize_adjoint, softplus, FeatureMap, Kernel};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Negative,
    Positive,
    Ignore,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TargetHeatmap {
    pub resolution: usize,
    /// Row-major `R × R` labels.
    pub labels: Vec<Label>,
}

impl TargetHeatmap {
    pub fn new(resolution: usize, labels: Vec<Label>) -> Result<Self> {
        if labels.len() != resolution * resolution {
            return Err(invalid!(
                "target has {} labels for a {resolution}x{resolution} grid",
                labels.len()
            ));
        }
        Ok(Self { resolution, labels })
    }

    pub fn filled(resolution: usize, label: Label) -> Self {
        Self {
            resolution,
            labels: vec![label; resolution * resolution],
        }
    }

    pub fn get(&self, y: usize, x: usize) -> Label {
        self.labels[y * self.resolution + x]
    }

    pub fn set(&mut self, y: usize, x: usize, label: Label) {
        self.labels[y * self.resolution + x] = label;
    }

    pub fn count(&self, label: Label) -> usize {
        self.labels.iter().filter(|&&l| l == label).count()
    }

    pub fn labeled(&self) -> usize {
        self.labels.len() - self.count(Label::Ignore)
    }
}

/// One grafted convolution: K² output channels over a single tap.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Graft {
    pub tap: String,
    pub kernel: Kernel,
    pub bias: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LearningRates {
    pub graft: f64,
    pub backbone: f64,
    /// Per backbone layer multiplier on `backbone`; empty means all 1.
    #[serde(default)]
    pub layer_scale: Vec<f64>,
}

impl Default for LearningRates {
    fn default() -> Self {
        Self {
            graft: 1e-2,
            backbone: 1e-4,
            layer_scale: Vec::new(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct ForwardCache {
    trace: Trace,
    taps: TapSet,
    scores: FeatureMap,
    aux: AuxField,
    pub heatmap: Heatmap,
}

#[derive(Clone, Debug)]
pub struct GraftGrads {
    pub kernel: Kernel,
    pub bias: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct LossGrad {
    pub loss: f64,
    pub labeled: usize,
    pub grafts: Vec<GraftGrads>,
    /// `[K², aux_dim]`
    pub aux: Vec<f64>,
    pub backbone: Option<BackboneGrads>,
    /// Gradient w.r.t. the pre-sigmoid scores, `R × R × K²`.
    pub scores: FeatureMap,
}

#[derive(Clone, Debug)]
pub struct HyperNet {
    pub backbone: BackboneState,
    pub grafts: Vec<Graft>,
    /// Aux-feature weights, `[K², aux_dim]` row-major.
    pub aux_weights: Vec<f64>,
    pub spec: HypercolumnSpec,
    pub layout: BlockLayout,
    pub k: usize,
    pub rates: LearningRates,
    interp: GridInterp,
    cache: Option<ForwardCache>,
}

const LOG_CLIP: f64 = -27.631_021_115_928_547; // ln(1e-12)

fn log_sum_exp(terms: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = terms.clone().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + terms.map(|t| (t - m).exp()).sum::<f64>().ln()
}

impl HyperNet {
    /// Graft a trained grid onto a backbone. Block `j` of classifier `k`
    /// becomes output channel `k` of tap `j`'s kernel; the full bias goes on
    /// the first graft.
    pub fn from_grid(grid: &ClassifierGrid, backbone: BackboneState) -> Result<Self> {
        let layout = BlockLayout::new(&grid.spec, &backbone.tap_shapes())?;
        if layout != grid.layout {
            return Err(shape_err!(
                "grid layout ({}) does not match backbone taps ({})",
                grid.layout.describe(),
                layout.describe()
            ));
        }
        if layout.blocks.is_empty() {
            return Err(invalid!("a grafted network needs at least one tap"));
        }
        let kk = grid.k * grid.k;
        if grid.classifiers.count() != kk {
            return Err(shape_err!("grid has {} classifiers, expected {kk}", grid.classifiers.count()));
        }
        let mut grafts = Vec::with_capacity(layout.blocks.len());
        for (j, b) in layout.blocks.iter().enumerate() {
            let kernel = crate::hypercolumn::block_kernel(&grid.classifiers, b)?;
            let bias = if j == 0 { grid.classifiers.biases.clone() } else { vec![0.0; kk] };
            grafts.push(Graft {
                tap: b.tap.clone(),
                kernel,
                bias,
            });
        }
        let aux = layout.aux_range();
        let aux_weights = (0..kk)
            .flat_map(|k| grid.classifiers.weight(k)[aux.clone()].to_vec())
            .collect();
        Ok(Self {
            backbone,
            grafts,
            aux_weights,
            interp: grid_interp(grid.k, grid.spec.resolution),
            spec: grid.spec.clone(),
            layout,
            k: grid.k,
            rates: LearningRates::default(),
            cache: None,
        })
    }

    /// Rebuild from stored parts (checkpoint loading).
    pub fn from_parts(
        backbone: BackboneState,
        grafts: Vec<Graft>,
        aux_weights: Vec<f64>,
        spec: HypercolumnSpec,
        k: usize,
        rates: LearningRates,
    ) -> Result<Self> {
        let layout = BlockLayout::new(&spec, &backbone.tap_shapes())?;
        let kk = k * k;
        if k == 0 || grafts.len() != layout.blocks.len() || layout.blocks.is_empty() {
            return Err(shape_err!(
                "{} grafts for layout {} with K={k}",
                grafts.len(),
                layout.describe()
            ));
        }
        for (g, b) in grafts.iter().zip(&layout.blocks) {
            let k = &g.kernel;
            if g.tap != b.tap
                || k.out_channels() != kk
                || k.size() != b.neighborhood
                || k.in_channels() != b.channels
                || g.bias.len() != kk
            {
                return Err(shape_err!("graft on {:?} does not match block {:?}", g.tap, b.tap));
            }
        }
        if aux_weights.len() != kk * layout.aux.dim() {
            return Err(shape_err!(
                "{} aux weights, expected {}",
                aux_weights.len(),
                kk * layout.aux.dim()
            ));
        }
        Ok(Self {
            backbone,
            grafts,
            aux_weights,
            interp: grid_interp(k, spec.resolution),
            spec,
            layout,
            k,
            rates,
            cache: None,
        })
    }

    /// Collapse the grafted layers back into a classifier grid.
    pub fn extract_grid(&self) -> ClassifierGrid {
        let kk = self.k * self.k;
        let dim = self.layout.dim;
        let aux_dim = self.layout.aux.dim();
        let mut cls = LinearClassifiers::zeros(dim, kk);
        for k in 0..kk {
            for (b, g) in self.layout.blocks.iter().zip(&self.grafts) {
                cls.weight_mut(k)[b.range()].copy_from_slice(g.kernel.filter(k));
            }
            cls.weight_mut(k)[self.layout.aux_range()]
                .copy_from_slice(&self.aux_weights[k * aux_dim..(k + 1) * aux_dim]);
            cls.biases[k] = self.grafts.iter().map(|g| g.bias[k]).sum();
        }
        ClassifierGrid {
            k: self.k,
            lambda: 0.0,
            spec: self.spec.clone(),
            layout: self.layout.clone(),
            classifiers: cls,
            fits: Vec::new(),
        }
    }

    pub fn interp(&self) -> &GridInterp {
        &self.interp
    }

    pub fn resolution(&self) -> usize {
        self.spec.resolution
    }

    /// Forward pass without caching.
    pub fn infer(&self, image: &FeatureMap, candidate: Option<&FeatureMap>) -> Result<ForwardCache> {
        let (taps, trace) = self.backbone.infer(image)?;
        let aux = AuxField::new(&self.layout, candidate)?;
        let r = self.resolution();
        let kk = self.k * self.k;
        let mut scores = FeatureMap::zeros(r, r, kk);
        for (g, b) in self.grafts.iter().zip(&self.layout.blocks) {
            let native = convolve(&taps[&g.tap], &g.kernel, &g.bias, (b.neighborhood - 1) / 2)?;
            scores.add_scaled(&resize(&native, r, r), 1.0);
        }
        let aux_dim = self.layout.aux.dim();
        if aux_dim > 0 {
            for y in 0..r {
                for x in 0..r {
                    let px = scores.pixel_mut(y, x);
                    for (k, v) in px.iter_mut().enumerate() {
                        *v += aux.dot(y, x, &self.aux_weights[k * aux_dim..(k + 1) * aux_dim]);
                    }
                }
            }
        }
        if !scores.is_finite() {
            return Err(Error::NonFinite("grafted network scores".into()));
        }
        let heatmap = mix_probabilities(&scores, &self.interp)?;
        Ok(ForwardCache {
            trace,
            taps,
            scores,
            aux,
            heatmap,
        })
    }

    pub fn predict(&self, image: &FeatureMap, candidate: Option<&FeatureMap>) -> Result<Heatmap> {
        Ok(self.infer(image, candidate)?.heatmap)
    }

    pub fn forward(&mut self, image: &FeatureMap, candidate: Option<&FeatureMap>) -> Result<Heatmap> {
        let cache = self.infer(image, candidate)?;
        let h = cache.heatmap.clone();
        self.cache = Some(cache);
        Ok(h)
    }

    /// Loss and gradients for the cached forward pass.
    pub fn loss_and_grad(&self, target: &TargetHeatmap, with_backbone: bool) -> Result<LossGrad> {
        let cache = self
            .cache
            .as_ref()
            .ok_or_else(|| Error::State("loss_and_grad called without a cached forward pass".into()))?;
        self.loss_and_grad_for(cache, target, with_backbone)
    }

    pub fn loss_and_grad_for(&self, cache: &ForwardCache, target: &TargetHeatmap, with_backbone: bool) -> Result<LossGrad> {
        let r = self.resolution();
        if target.resolution != r {
            return Err(shape_err!("target is {0}x{0}, network outputs {r}x{r}", target.resolution));
        }
        let labeled = target.labeled();
        if labeled == 0 {
            return Err(invalid!("target has no labeled pixels"));
        }
        let kk = self.k * self.k;
        let mut gs = FeatureMap::zeros(r, r, kk);
        let mut loss = 0.0;
        for y in 0..r {
            for x in 0..r {
                let label = target.get(y, x);
                if label == Label::Ignore {
                    continue;
                }
                let positive = label == Label::Positive;
                let s = cache.scores.pixel(y, x);
                let cells = self.interp.at(y, x);
                let g = gs.pixel_mut(y, x);
                // log of the probability assigned to the observed label
                let log_obs = log_sum_exp(cells.iter().map(|&(c, a)| {
                    a.ln() - if positive { softplus(-s[c]) } else { softplus(s[c]) }
                }));
                loss -= log_obs.max(LOG_CLIP);
                if let [(c, _)] = cells {
                    // p = σ(s): the fused gradient reduces to σ - y
                    g[*c] = crate::tensor::sigmoid(s[*c]) - if positive { 1.0 } else { 0.0 };
                    continue;
                }
                // ∂ℓ/∂s_k = α_k σ_k (1 - σ_k) (p - y) / (p (1 - p)), in log space
                for &(c, a) in cells {
                    let log_sr = -softplus(-s[c]) - softplus(s[c]);
                    let mag = a * (log_sr - log_obs).exp();
                    g[c] = if positive { -mag } else { mag };
                }
            }
        }

        let mut grafts = Vec::with_capacity(self.grafts.len());
        let mut tap_grads = TapSet::new();
        for (gr, b) in self.grafts.iter().zip(&self.layout.blocks) {
            let native = resize_adjoint(&gs, b.native.0, b.native.1);
            let cg = convolve_backward(&cache.taps[&gr.tap], &gr.kernel, (b.neighborhood - 1) / 2, &native)?;
            grafts.push(GraftGrads {
                kernel: cg.kernel,
                bias: cg.bias,
            });
            tap_grads.insert(gr.tap.clone(), cg.input);
        }
        let aux_dim = self.layout.aux.dim();
        let mut aux = vec![0.0; kk * aux_dim];
        if aux_dim > 0 {
            let mut f = vec![0.0; aux_dim];
            for y in 0..r {
                for x in 0..r {
                    cache.aux.write(y, x, &mut f);
                    for (k, &gk) in gs.pixel(y, x).iter().enumerate() {
                        if gk != 0.0 {
                            for (w, fi) in aux[k * aux_dim..(k + 1) * aux_dim].iter_mut().zip(&f) {
                                *w += gk * fi;
                            }
                        }
                    }
                }
            }
        }
        let backbone = if with_backbone {
            Some(self.backbone.backward_trace(&cache.trace, &tap_grads)?)
        } else {
            None
        };
        Ok(LossGrad {
            loss,
            labeled,
            grafts,
            aux,
            backbone,
            scores: gs,
        })
    }

    /// `params -= scale * grad` using the configured learning rates.
    fn apply(&mut self, grad: &LossGrad, scale: f64) {
        let lr = self.rates.graft * scale;
        if lr != 0.0 {
            for (g, d) in self.grafts.iter_mut().zip(&grad.grafts) {
                for (w, dw) in g.kernel.data_mut().iter_mut().zip(d.kernel.data()) {
                    *w -= lr * dw;
                }
                for (b, db) in g.bias.iter_mut().zip(&d.bias) {
                    *b -= lr * db;
                }
            }
            for (w, dw) in self.aux_weights.iter_mut().zip(&grad.aux) {
                *w -= lr * dw;
            }
        }
        if let Some(bg) = &grad.backbone {
            let base = self.rates.backbone * scale;
            if base != 0.0 {
                let layer_scale = self.rates.layer_scale.clone();
                for (i, (p, d)) in self.backbone.params_mut().iter_mut().zip(&bg.params).enumerate() {
                    let lr = base * layer_scale.get(i).copied().unwrap_or(1.0);
                    for (w, dw) in p.weights.iter_mut().zip(&d.weights) {
                        *w -= lr * dw;
                    }
                    for (b, db) in p.bias.iter_mut().zip(&d.bias) {
                        *b -= lr * db;
                    }
                }
            }
        }
        self.cache = None;
    }
}

pub(crate) fn sum_grads(mut acc: LossGrad, other: LossGrad) -> LossGrad {
    acc.loss += other.loss;
    acc.labeled += other.labeled;
    for (a, b) in acc.grafts.iter_mut().zip(&other.grafts) {
        a.kernel.data_mut().iter_mut().zip(b.kernel.data()).for_each(|(p, q)| *p += q);
        a.bias.iter_mut().zip(&b.bias).for_each(|(p, q)| *p += q);
    }
    acc.aux.iter_mut().zip(&other.aux).for_each(|(p, q)| *p += q);
    if let (Some(a), Some(b)) = (acc.backbone.as_mut(), other.backbone.as_ref()) {
        for (pa, pb) in a.params.iter_mut().zip(&b.params) {
            pa.weights.iter_mut().zip(&pb.weights).for_each(|(p, q)| *p += q);
            pa.bias.iter_mut().zip(&pb.bias).for_each(|(p, q)| *p += q);
        }
    }
    acc
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinetuneConfig {
    pub epochs: usize,
    pub seed: u64,
    #[serde(default = "one")]
    pub batch_size: usize,
    /// Also update backbone parameters (at `rates.backbone`).
    #[serde(default = "yes")]
    pub update_backbone: bool,
}

fn one() -> usize {
    1
}

fn yes() -> bool {
    true
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            epochs: 5,
            seed: 0,
            batch_size: 1,
            update_backbone: true,
        }
    }
}

/// One training example: backbone input, optional `R × R` candidate mask, target.
#[derive(Clone, Debug)]
pub struct FinetuneSample {
    pub image: FeatureMap,
    pub candidate: Option<FeatureMap>,
    pub target: TargetHeatmap,
}

/// Seeded minibatch SGD. Steps use the gradient of the per-pixel mean loss;
/// the returned trace holds the mean per-pixel loss of each epoch, measured
/// on each batch before its update.
pub fn finetune(net: &mut HyperNet, dataset: &[FinetuneSample], config: &FinetuneConfig) -> Result<Vec<f64>> {
    if dataset.is_empty() {
        return Err(invalid!("finetuning needs at least one sample"));
    }
    if config.batch_size == 0 {
        return Err(invalid!("batch size must be positive"));
    }
    if let Some(s) = dataset.iter().find(|s| s.target.labeled() == 0) {
        return Err(invalid!(
            "finetuning sample with no labeled pixels ({}x{})",
            s.target.resolution,
            s.target.resolution
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut trace = Vec::with_capacity(config.epochs);
    let with_backbone = config.update_backbone && net.rates.backbone != 0.0;
    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut epoch_pixels = 0usize;
        for batch in order.chunks(config.batch_size) {
            let snapshot = &*net;
            let grads: Vec<LossGrad> = batch
                .par_iter()
                .map(|&i| {
                    let s = &dataset[i];
                    let cache = snapshot.infer(&s.image, s.candidate.as_ref())?;
                    snapshot.loss_and_grad_for(&cache, &s.target, with_backbone)
                })
                .collect::<Result<_>>()?;
            let total = grads.into_iter().reduce(sum_grads).expect("non-empty batch");
            epoch_loss += total.loss;
            epoch_pixels += total.labeled;
            let scale = 1.0 / total.labeled as f64;
            net.apply(&total, scale);
        }
        trace.push(epoch_loss / epoch_pixels as f64);
    }
    Ok(trace)
}
