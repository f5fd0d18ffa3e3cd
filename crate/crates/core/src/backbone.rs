//! A small configurable convolutional network standing in for a pretrained
//! feature extractor. Produces named feature maps ("taps") at several
//! resolutions and back-propagates gradients arriving at any of them.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape_err, Error, Result};
use crate::tensor::{convolve, convolve_backward, dot, max_pool, max_pool_backward, FeatureMap, Kernel};

/// Named feature maps keyed by tap name.
pub type TapSet = BTreeMap<String, FeatureMap>;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    /// Same-padded `size × size` convolution.
    Conv {
        name: String,
        out_channels: usize,
        size: usize,
        #[serde(default = "yes")]
        relu: bool,
        #[serde(default)]
        tap: bool,
    },
    Pool {
        name: String,
        window: usize,
        stride: usize,
        #[serde(default)]
        tap: bool,
    },
    /// Fully connected over the flattened input; output is a 1×1 map.
    Fc {
        name: String,
        out_channels: usize,
        #[serde(default = "yes")]
        relu: bool,
        #[serde(default)]
        tap: bool,
    },
}

fn yes() -> bool {
    true
}

impl LayerSpec {
    pub fn name(&self) -> &str {
        match self {
            LayerSpec::Conv { name, .. } | LayerSpec::Pool { name, .. } | LayerSpec::Fc { name, .. } => name,
        }
    }

    pub fn is_tap(&self) -> bool {
        match self {
            LayerSpec::Conv { tap, .. } | LayerSpec::Pool { tap, .. } | LayerSpec::Fc { tap, .. } => *tap,
        }
    }

    fn relu(&self) -> bool {
        match self {
            LayerSpec::Conv { relu, .. } | LayerSpec::Fc { relu, .. } => *relu,
            LayerSpec::Pool { .. } => false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub input_size: usize,
    pub in_channels: usize,
    pub layers: Vec<LayerSpec>,
    pub seed: u64,
}

impl Default for BackboneConfig {
    /// conv5×5(8) → pool/4 → conv3×3(16) → pool/2 → conv3×3(16) → pool/2 → fc(32),
    /// tapping every pool and the fc layer.
    fn default() -> Self {
        let conv = |name: &str, out_channels, size| LayerSpec::Conv {
            name: name.into(),
            out_channels,
            size,
            relu: true,
            tap: false,
        };
        let pool = |name: &str, window| LayerSpec::Pool {
            name: name.into(),
            window,
            stride: window,
            tap: true,
        };
        Self {
            input_size: 64,
            in_channels: 1,
            layers: vec![
                conv("conv1", 8, 5),
                pool("pool1", 4),
                conv("conv2", 16, 3),
                pool("pool2", 2),
                conv("conv3", 16, 3),
                pool("pool3", 2),
                LayerSpec::Fc {
                    name: "fc".into(),
                    out_channels: 32,
                    relu: true,
                    tap: true,
                },
            ],
            seed: 0,
        }
    }
}

impl BackboneConfig {
    /// Output shape `(h, w, c)` of every layer, checking layer-to-layer
    /// consistency and name uniqueness.
    pub fn shapes(&self) -> Result<Vec<(usize, usize, usize)>> {
        if self.input_size == 0 || !(1..=4).contains(&self.in_channels) {
            return Err(invalid!(
                "input must be a positive square with 1-4 channels, got size {} with {} channels",
                self.input_size,
                self.in_channels
            ));
        }
        if self.layers.is_empty() {
            return Err(invalid!("backbone has no layers"));
        }
        let mut seen = std::collections::BTreeSet::new();
        let mut shape = (self.input_size, self.input_size, self.in_channels);
        let mut out = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            if !seen.insert(layer.name()) {
                return Err(invalid!("duplicate layer name {:?}", layer.name()));
            }
            shape = match *layer {
                LayerSpec::Conv { out_channels, size, .. } => {
                    if size % 2 == 0 || out_channels == 0 {
                        return Err(invalid!("layer {:?}: conv needs odd size and channels > 0", layer.name()));
                    }
                    (shape.0, shape.1, out_channels)
                }
                LayerSpec::Pool { window, stride, .. } => {
                    if window == 0 || stride == 0 || window > shape.0 || window > shape.1 {
                        return Err(invalid!(
                            "layer {:?}: pool window {window} stride {stride} invalid for {}x{}",
                            layer.name(),
                            shape.0,
                            shape.1
                        ));
                    }
                    ((shape.0 - window) / stride + 1, (shape.1 - window) / stride + 1, shape.2)
                }
                LayerSpec::Fc { out_channels, .. } => {
                    if out_channels == 0 {
                        return Err(invalid!("layer {:?}: fc needs channels > 0", layer.name()));
                    }
                    (1, 1, out_channels)
                }
            };
            out.push(shape);
        }
        Ok(out)
    }

    /// Full validation, including the tap layout hypercolumns rely on:
    /// at least three taps at distinct resolutions, exactly one of them 1×1.
    pub fn validate(&self) -> Result<()> {
        let shapes = self.shapes()?;
        let taps: Vec<_> = self
            .layers
            .iter()
            .zip(&shapes)
            .filter(|(l, _)| l.is_tap())
            .map(|(_, s)| (s.0, s.1))
            .collect();
        let distinct: std::collections::BTreeSet<_> = taps.iter().collect();
        if taps.len() < 3 || distinct.len() != taps.len() {
            return Err(invalid!(
                "backbone needs at least 3 taps at distinct resolutions, got {taps:?}"
            ));
        }
        let global = taps.iter().filter(|&&s| s == (1, 1)).count();
        if global != 1 {
            return Err(invalid!("backbone needs exactly one 1x1 tap, got {global}"));
        }
        Ok(())
    }

    pub fn tap_shapes(&self) -> Result<BTreeMap<String, (usize, usize, usize)>> {
        let shapes = self.shapes()?;
        Ok(self
            .layers
            .iter()
            .zip(shapes)
            .filter(|(l, _)| l.is_tap())
            .map(|(l, s)| (l.name().to_string(), s))
            .collect())
    }
}

/// `sqrt(6 / (fan_in + fan_out))`
pub fn glorot_bound(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

/// Weights and biases of one layer. Conv weights follow the [`Kernel`]
/// layout, fc weights are `[out, in]` over the flattened `(y, x, c)` input;
/// pool layers carry nothing.
#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct LayerParams {
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl LayerParams {
    pub fn len(&self) -> usize {
        self.weights.len() + self.bias.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn zeros_like(&self) -> Self {
        Self {
            weights: vec![0.0; self.weights.len()],
            bias: vec![0.0; self.bias.len()],
        }
    }
}

#[derive(Clone, Debug)]
struct LayerCache {
    pre_relu: Option<FeatureMap>,
    out: FeatureMap,
    argmax: Option<Vec<usize>>,
}

/// Activations recorded by a forward pass, consumed by the backward pass.
#[derive(Clone, Debug)]
pub struct Trace {
    input: FeatureMap,
    layers: Vec<LayerCache>,
}

#[derive(Clone, Debug)]
pub struct BackboneGrads {
    pub params: Vec<LayerParams>,
    pub input: FeatureMap,
}

#[derive(Clone, Debug)]
pub struct BackboneState {
    config: BackboneConfig,
    shapes: Vec<(usize, usize, usize)>,
    params: Vec<LayerParams>,
    cache: Option<Trace>,
}

impl BackboneState {
    /// Seeded Glorot-uniform weights, zero biases.
    pub fn init(config: BackboneConfig) -> Result<Self> {
        config.validate()?;
        Self::init_relaxed(config)
    }

    /// Like [`init`](Self::init) but only checks structural consistency, so
    /// single-layer probes and gradient-check networks can be built.
    pub fn init_relaxed(config: BackboneConfig) -> Result<Self> {
        let shapes = config.shapes()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut prev = (config.input_size, config.input_size, config.in_channels);
        let mut params = Vec::with_capacity(config.layers.len());
        for (layer, &shape) in config.layers.iter().zip(&shapes) {
            let p = match *layer {
                LayerSpec::Conv { out_channels, size, .. } => {
                    let fan_in = size * size * prev.2;
                    let fan_out = size * size * out_channels;
                    let a = glorot_bound(fan_in, fan_out);
                    LayerParams {
                        weights: (0..out_channels * fan_in).map(|_| rng.gen_range(-a..a)).collect(),
                        bias: vec![0.0; out_channels],
                    }
                }
                LayerSpec::Fc { out_channels, .. } => {
                    let fan_in = prev.0 * prev.1 * prev.2;
                    let a = glorot_bound(fan_in, out_channels);
                    LayerParams {
                        weights: (0..out_channels * fan_in).map(|_| rng.gen_range(-a..a)).collect(),
                        bias: vec![0.0; out_channels],
                    }
                }
                LayerSpec::Pool { .. } => LayerParams::default(),
            };
            params.push(p);
            prev = shape;
        }
        Ok(Self {
            config,
            shapes,
            params,
            cache: None,
        })
    }

    /// Rebuild from stored parameters (checkpoint loading).
    pub fn from_parts(config: BackboneConfig, params: Vec<LayerParams>) -> Result<Self> {
        let template = Self::init_relaxed(config)?;
        if params.len() != template.params.len() {
            return Err(shape_err!(
                "checkpoint has {} layers, config has {}",
                params.len(),
                template.params.len()
            ));
        }
        for ((p, t), l) in params.iter().zip(&template.params).zip(&template.config.layers) {
            if p.weights.len() != t.weights.len() || p.bias.len() != t.bias.len() {
                return Err(shape_err!("layer {:?} parameter shape mismatch", l.name()));
            }
            if p.weights.iter().chain(&p.bias).any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("layer {:?} parameters", l.name())));
            }
        }
        Ok(Self {
            params,
            ..template
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn params(&self) -> &[LayerParams] {
        &self.params
    }

    /// Mutable parameter access; drops any cached forward pass.
    pub fn params_mut(&mut self) -> &mut [LayerParams] {
        self.cache = None;
        &mut self.params
    }

    pub fn has_cache(&self) -> bool {
        self.cache.is_some()
    }

    pub fn tap_shapes(&self) -> BTreeMap<String, (usize, usize, usize)> {
        self.config
            .layers
            .iter()
            .zip(&self.shapes)
            .filter(|(l, _)| l.is_tap())
            .map(|(l, &s)| (l.name().to_string(), s))
            .collect()
    }

    pub fn layer_index(&self, name: &str) -> Option<usize> {
        self.config.layers.iter().position(|l| l.name() == name)
    }

    /// Forward pass without touching the cache; safe on shared references.
    pub fn infer(&self, image: &FeatureMap) -> Result<(TapSet, Trace)> {
        let expected = (self.config.input_size, self.config.input_size, self.config.in_channels);
        if image.shape() != expected {
            return Err(invalid!(
                "backbone expects a {expected:?} image, got {:?}",
                image.shape()
            ));
        }
        let mut caches: Vec<LayerCache> = Vec::with_capacity(self.config.layers.len());
        for (i, (layer, p)) in self.config.layers.iter().zip(&self.params).enumerate() {
            let input = caches.last().map_or(image, |c| &c.out);
            let (pre, argmax) = match *layer {
                LayerSpec::Conv { out_channels, size, .. } => {
                    let k = Kernel::new(out_channels, size, input.channels(), p.weights.clone())?;
                    (convolve(input, &k, &p.bias, (size - 1) / 2)?, None)
                }
                LayerSpec::Pool { window, stride, .. } => {
                    let pooled = max_pool(input, window, stride)?;
                    (pooled.map, Some(pooled.argmax))
                }
                LayerSpec::Fc { out_channels, .. } => {
                    let x = input.data();
                    let out = (0..out_channels)
                        .map(|o| p.bias[o] + dot(&p.weights[o * x.len()..(o + 1) * x.len()], x))
                        .collect();
                    (FeatureMap::new(1, 1, out_channels, out)?, None)
                }
            };
            debug_assert_eq!(pre.shape(), self.shapes[i]);
            let cache = if layer.relu() {
                let out = pre.map(|v| v.max(0.0));
                LayerCache {
                    pre_relu: Some(pre),
                    out,
                    argmax,
                }
            } else {
                LayerCache {
                    pre_relu: None,
                    out: pre,
                    argmax,
                }
            };
            caches.push(cache);
        }
        let taps = self
            .config
            .layers
            .iter()
            .zip(&caches)
            .filter(|(l, _)| l.is_tap())
            .map(|(l, c)| (l.name().to_string(), c.out.clone()))
            .collect();
        Ok((
            taps,
            Trace {
                input: image.clone(),
                layers: caches,
            },
        ))
    }

    pub fn forward(&mut self, image: &FeatureMap) -> Result<TapSet> {
        let (taps, trace) = self.infer(image)?;
        self.cache = Some(trace);
        Ok(taps)
    }

    /// Gradients for the cached forward pass. Missing taps count as zero.
    pub fn backward(&self, grad_per_tap: &TapSet) -> Result<BackboneGrads> {
        let trace = self
            .cache
            .as_ref()
            .ok_or_else(|| Error::State("backward called without a cached forward pass".into()))?;
        self.backward_trace(trace, grad_per_tap)
    }

    pub fn backward_trace(&self, trace: &Trace, grad_per_tap: &TapSet) -> Result<BackboneGrads> {
        for (name, g) in grad_per_tap {
            let i = self
                .layer_index(name)
                .filter(|&i| self.config.layers[i].is_tap())
                .ok_or_else(|| invalid!("gradient supplied for unknown tap {name:?}"))?;
            if g.shape() != self.shapes[i] {
                return Err(shape_err!(
                    "gradient for tap {name:?} is {:?}, tap is {:?}",
                    g.shape(),
                    self.shapes[i]
                ));
            }
        }
        let n = self.config.layers.len();
        let mut grads: Vec<LayerParams> = self.params.iter().map(LayerParams::zeros_like).collect();
        let mut g: Option<FeatureMap> = None;
        for i in (0..n).rev() {
            let layer = &self.config.layers[i];
            if let Some(tg) = grad_per_tap.get(layer.name()) {
                match g.as_mut() {
                    Some(acc) => acc.add_scaled(tg, 1.0),
                    None => g = Some(tg.clone()),
                }
            }
            let Some(mut go) = g.take() else { continue };
            let cache = &trace.layers[i];
            if let Some(pre) = &cache.pre_relu {
                for (v, &p) in go.data_mut().iter_mut().zip(pre.data()) {
                    if p <= 0.0 {
                        *v = 0.0;
                    }
                }
            }
            let input = if i == 0 { &trace.input } else { &trace.layers[i - 1].out };
            let gi = match *layer {
                LayerSpec::Conv { out_channels, size, .. } => {
                    let k = Kernel::new(out_channels, size, input.channels(), self.params[i].weights.clone())?;
                    let cg = convolve_backward(input, &k, (size - 1) / 2, &go)?;
                    grads[i].weights = cg.kernel.data().to_vec();
                    grads[i].bias = cg.bias;
                    cg.input
                }
                LayerSpec::Pool { .. } => {
                    let argmax = cache.argmax.as_ref().expect("pool cache has argmax");
                    max_pool_backward(input.shape(), argmax, &go)
                }
                LayerSpec::Fc { out_channels, .. } => {
                    let x = input.data();
                    let w = &self.params[i].weights;
                    let mut gx = vec![0.0; x.len()];
                    for o in 0..out_channels {
                        let go_o = go.data()[o];
                        grads[i].bias[o] = go_o;
                        let row = &w[o * x.len()..(o + 1) * x.len()];
                        let grow = &mut grads[i].weights[o * x.len()..(o + 1) * x.len()];
                        for j in 0..x.len() {
                            grow[j] = go_o * x[j];
                            gx[j] += go_o * row[j];
                        }
                    }
                    let (h, w, c) = input.shape();
                    FeatureMap::new(h, w, c, gx)?
                }
            };
            g = Some(gi);
        }
        let input = g.unwrap_or_else(|| {
            let (h, w, c) = trace.input.shape();
            FeatureMap::zeros(h, w, c)
        });
        Ok(BackboneGrads { params: grads, input })
    }
}
