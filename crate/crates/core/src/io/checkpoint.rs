//! Checkpoint layout: `b"HCCK"`, little-endian `u32` format version, `u32`
//! header length, the JSON header, then one feature-map container per
//! tensor named in the header, in order.

use std::fs;
use std::io::{Cursor, Read};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{atomic_write, FORMAT_VERSION, LIBRARY_VERSION};
use crate::backbone::{BackboneConfig, BackboneState, LayerParams, LayerSpec};
use crate::error::{shape_err, Error, Result};
use crate::grid::{CellFit, ClassifierGrid};
use crate::hypercolumn::{BlockLayout, HypercolumnSpec, LinearClassifiers};
use crate::hypernet::{Graft, HyperNet, LearningRates};
use crate::tensor::{read_map, write_map, FeatureMap, Kernel};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"HCCK";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckpointKind {
    Grid,
    Hypernet,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub version: u32,
    pub library: String,
    pub kind: CheckpointKind,
    pub config_hash: String,
    pub payload: serde_json::Value,
    pub tensors: Vec<String>,
}

pub fn write_checkpoint(path: &Path, header: &CheckpointHeader, tensors: &[FeatureMap]) -> Result<()> {
    if header.tensors.len() != tensors.len() {
        return Err(shape_err!("{} tensor names for {} tensors", header.tensors.len(), tensors.len()));
    }
    let json = serde_json::to_vec(header)?;
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    let len = u32::try_from(json.len()).map_err(|_| Error::Format("checkpoint header too large".into()))?;
    buf.extend_from_slice(&len.to_le_bytes());
    buf.extend_from_slice(&json);
    for t in tensors {
        write_map(&mut buf, t)?;
    }
    atomic_write(path, &buf)
}

pub fn read_checkpoint(path: &Path) -> Result<(CheckpointHeader, Vec<FeatureMap>)> {
    let bytes = fs::read(path)?;
    let mut r = Cursor::new(bytes);
    let mut word = [0u8; 4];
    r.read_exact(&mut word)?;
    if &word != CHECKPOINT_MAGIC {
        return Err(Error::Format(format!("{} is not a checkpoint", path.display())));
    }
    r.read_exact(&mut word)?;
    let version = u32::from_le_bytes(word);
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    r.read_exact(&mut word)?;
    let mut json = vec![0u8; u32::from_le_bytes(word) as usize];
    r.read_exact(&mut json)?;
    let header: CheckpointHeader = serde_json::from_slice(&json)?;
    let tensors = header.tensors.iter().map(|_| read_map(&mut r)).collect::<Result<Vec<_>>>()?;
    Ok((header, tensors))
}

fn vector(v: &[f64]) -> Result<FeatureMap> {
    FeatureMap::new(1, 1, v.len(), v.to_vec())
}

fn backbone_tensors(bb: &BackboneState, names: &mut Vec<String>, out: &mut Vec<FeatureMap>) -> Result<()> {
    for (layer, p) in bb.config().layers.iter().zip(bb.params()) {
        if p.is_empty() {
            continue;
        }
        let rows = p.bias.len();
        let cols = p.weights.len() / rows;
        let (mid, inner) = match layer {
            LayerSpec::Conv { size, .. } => (size * size, cols / (size * size)),
            _ => (1, cols),
        };
        names.push(format!("backbone.{}.weight", layer.name()));
        out.push(FeatureMap::new(rows, mid, inner, p.weights.clone())?);
        names.push(format!("backbone.{}.bias", layer.name()));
        out.push(vector(&p.bias)?);
    }
    Ok(())
}

struct Tensors {
    names: Vec<String>,
    maps: Vec<Option<FeatureMap>>,
}

impl Tensors {
    fn take(&mut self, name: &str) -> Result<FeatureMap> {
        let i = self
            .names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| Error::Format(format!("checkpoint lacks tensor {name:?}")))?;
        self.maps[i]
            .take()
            .ok_or_else(|| Error::Format(format!("tensor {name:?} listed twice")))
    }
}

fn restore_backbone(config: BackboneConfig, t: &mut Tensors) -> Result<BackboneState> {
    let template = BackboneState::init_relaxed(config.clone())?;
    let mut params = Vec::with_capacity(config.layers.len());
    for (layer, p) in config.layers.iter().zip(template.params()) {
        if p.is_empty() {
            params.push(LayerParams::default());
            continue;
        }
        params.push(LayerParams {
            weights: t.take(&format!("backbone.{}.weight", layer.name()))?.into_data(),
            bias: t.take(&format!("backbone.{}.bias", layer.name()))?.into_data(),
        });
    }
    BackboneState::from_parts(config, params)
}

fn open(path: &Path, kind: CheckpointKind) -> Result<(CheckpointHeader, Tensors)> {
    let (header, maps) = read_checkpoint(path)?;
    if header.kind != kind {
        return Err(Error::Format(format!(
            "{} holds a {:?} checkpoint, expected {kind:?}",
            path.display(),
            header.kind
        )));
    }
    let t = Tensors {
        names: header.tensors.clone(),
        maps: maps.into_iter().map(Some).collect(),
    };
    Ok((header, t))
}

#[derive(Serialize, Deserialize)]
struct GridPayload {
    backbone: BackboneConfig,
    k: usize,
    lambda: f64,
    spec: HypercolumnSpec,
    layout: BlockLayout,
    fits: Vec<CellFit>,
}

pub fn save_grid_model(path: &Path, backbone: &BackboneState, grid: &ClassifierGrid, config_hash: &str) -> Result<()> {
    let mut names = Vec::new();
    let mut maps = Vec::new();
    backbone_tensors(backbone, &mut names, &mut maps)?;
    let c = &grid.classifiers;
    names.push("grid.weight".into());
    maps.push(FeatureMap::new(c.count(), 1, c.dim, c.weights.clone())?);
    names.push("grid.bias".into());
    maps.push(vector(&c.biases)?);
    let payload = GridPayload {
        backbone: backbone.config().clone(),
        k: grid.k,
        lambda: grid.lambda,
        spec: grid.spec.clone(),
        layout: grid.layout.clone(),
        fits: grid.fits.clone(),
    };
    let header = CheckpointHeader {
        version: FORMAT_VERSION,
        library: LIBRARY_VERSION.into(),
        kind: CheckpointKind::Grid,
        config_hash: config_hash.into(),
        payload: serde_json::to_value(payload)?,
        tensors: names,
    };
    write_checkpoint(path, &header, &maps)
}

pub fn load_grid_model(path: &Path) -> Result<(CheckpointHeader, BackboneState, ClassifierGrid)> {
    let (header, mut t) = open(path, CheckpointKind::Grid)?;
    let p: GridPayload = serde_json::from_value(header.payload.clone())?;
    let backbone = restore_backbone(p.backbone, &mut t)?;
    let layout = BlockLayout::new(&p.spec, &backbone.tap_shapes())?;
    if layout != p.layout {
        return Err(shape_err!("stored layout does not match the stored backbone"));
    }
    let classifiers = LinearClassifiers::new(layout.dim, t.take("grid.weight")?.into_data(), t.take("grid.bias")?.into_data())?;
    if classifiers.count() != p.k * p.k {
        return Err(shape_err!("{} classifiers for K={}", classifiers.count(), p.k));
    }
    let grid = ClassifierGrid {
        k: p.k,
        lambda: p.lambda,
        spec: p.spec,
        layout,
        classifiers,
        fits: p.fits,
    };
    Ok((header, backbone, grid))
}

#[derive(Serialize, Deserialize)]
struct HypernetPayload {
    backbone: BackboneConfig,
    k: usize,
    spec: HypercolumnSpec,
    rates: LearningRates,
}

pub fn save_hypernet(path: &Path, net: &HyperNet, config_hash: &str) -> Result<()> {
    let mut names = Vec::new();
    let mut maps = Vec::new();
    backbone_tensors(&net.backbone, &mut names, &mut maps)?;
    for g in &net.grafts {
        let k = &g.kernel;
        names.push(format!("graft.{}.weight", g.tap));
        maps.push(FeatureMap::new(k.out_channels(), k.size() * k.size(), k.in_channels(), k.data().to_vec())?);
        names.push(format!("graft.{}.bias", g.tap));
        maps.push(vector(&g.bias)?);
    }
    if !net.aux_weights.is_empty() {
        names.push("aux.weight".into());
        maps.push(vector(&net.aux_weights)?);
    }
    let payload = HypernetPayload {
        backbone: net.backbone.config().clone(),
        k: net.k,
        spec: net.spec.clone(),
        rates: net.rates.clone(),
    };
    let header = CheckpointHeader {
        version: FORMAT_VERSION,
        library: LIBRARY_VERSION.into(),
        kind: CheckpointKind::Hypernet,
        config_hash: config_hash.into(),
        payload: serde_json::to_value(payload)?,
        tensors: names,
    };
    write_checkpoint(path, &header, &maps)
}

pub fn load_hypernet(path: &Path) -> Result<(CheckpointHeader, HyperNet)> {
    let (header, mut t) = open(path, CheckpointKind::Hypernet)?;
    let p: HypernetPayload = serde_json::from_value(header.payload.clone())?;
    let backbone = restore_backbone(p.backbone, &mut t)?;
    let layout = BlockLayout::new(&p.spec, &backbone.tap_shapes())?;
    let kk = p.k * p.k;
    let mut grafts = Vec::new();
    for b in &layout.blocks {
        let w = t.take(&format!("graft.{}.weight", b.tap))?;
        let kernel = Kernel::new(kk, b.neighborhood, b.channels, w.into_data())?;
        grafts.push(Graft {
            tap: b.tap.clone(),
            kernel,
            bias: t.take(&format!("graft.{}.bias", b.tap))?.into_data(),
        });
    }
    let aux = if layout.aux.dim() > 0 { t.take("aux.weight")?.into_data() } else { Vec::new() };
    let net = HyperNet::from_parts(backbone, grafts, aux, p.spec, p.k, p.rates)?;
    Ok((header, net))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::BackboneConfig;
    use crate::hypercolumn::{AuxFeatures, TapEntry};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn grid(bb: &BackboneState, k: usize) -> ClassifierGrid {
        let spec = HypercolumnSpec::new(
            vec![TapEntry::new("pool2", 3), TapEntry::new("fc", 1)],
            AuxFeatures { location: true, ..Default::default() },
            8,
        )
        .unwrap();
        let layout = BlockLayout::new(&spec, &bb.tap_shapes()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let c = LinearClassifiers::new(
            layout.dim,
            (0..layout.dim * k * k).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            (0..k * k).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        ClassifierGrid { k, lambda: 0.1, spec, layout, classifiers: c, fits: vec![] }
    }

    #[test]
    fn grid_and_hypernet_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let bb = BackboneState::init(BackboneConfig::default()).unwrap();
        let g = grid(&bb, 2);
        let p = dir.path().join("m.ckpt");
        save_grid_model(&p, &bb, &g, "abc").unwrap();
        let (h, bb2, g2) = load_grid_model(&p).unwrap();
        assert_eq!(h.config_hash, "abc");
        assert_eq!(bb2.params(), bb.params());
        assert_eq!(g2, g);
        assert!(load_hypernet(&p).is_err());

        let mut net = HyperNet::from_grid(&g, bb).unwrap();
        net.rates.layer_scale = vec![0.5; 3];
        let q = dir.path().join("n.ckpt");
        save_hypernet(&q, &net, "def").unwrap();
        let (_, net2) = load_hypernet(&q).unwrap();
        assert_eq!(net2.grafts, net.grafts);
        assert_eq!(net2.aux_weights, net.aux_weights);
        assert_eq!(net2.rates, net.rates);
        assert_eq!(net2.backbone.params(), net.backbone.params());
    }

    #[test]
    fn corrupt_checkpoint_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.ckpt");
        fs::write(&p, b"HCCKjunk").unwrap();
        assert!(read_checkpoint(&p).is_err());
        fs::write(&p, b"nope").unwrap();
        assert!(matches!(read_checkpoint(&p), Err(Error::Format(_))));
    }
}
