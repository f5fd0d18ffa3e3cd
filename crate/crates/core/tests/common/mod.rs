//! Independent reference implementations shared by the oracle and
//! acceptance suites.
#![allow(dead_code)]

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use hypercol::backbone::{BackboneConfig, BackboneState, LayerSpec};
use hypercol::eval::ImageCase;
use hypercol::grid::ClassifierGrid;
use hypercol::hypercolumn::{candidate_grid_features, AuxFeatures, BlockLayout, HypercolumnSpec, LinearClassifiers, TapEntry};
use hypercol::hypernet::{HyperNet, Label, TargetHeatmap};
use hypercol::tasks::{BoundingBox, Detection, InstanceGT, Keypoint, KeypointPrediction, LabelImage, Mask};
use hypercol::tensor::FeatureMap;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_map(rng: &mut ChaCha8Rng, h: usize, w: usize, c: usize, scale: f64) -> FeatureMap {
    FeatureMap::from_fn(h, w, c, |_, _, _| rng.gen_range(-scale..scale))
}

fn random_aux(rng: &mut ChaCha8Rng) -> AuxFeatures {
    AuxFeatures {
        inside_candidate: rng.gen_bool(0.4),
        candidate_grid: rng.gen_bool(0.3),
        location: rng.gen_bool(0.5),
    }
}

/// A random spec with taps, classifiers and (when needed) a candidate map.
pub struct Triple {
    pub taps: BTreeMap<String, FeatureMap>,
    pub layout: BlockLayout,
    pub classifiers: LinearClassifiers,
    pub candidate: Option<FeatureMap>,
}

pub fn random_triple(seed: u64) -> Triple {
    let mut rng = rng(seed);
    let n_taps = rng.gen_range(1..=3);
    let r = rng.gen_range(1..=14);
    let mut entries = Vec::new();
    let mut shapes = BTreeMap::new();
    let mut taps = BTreeMap::new();
    for t in 0..n_taps {
        let name = format!("t{t}");
        let (h, w, c) = (rng.gen_range(1..=7), rng.gen_range(1..=7), rng.gen_range(1..=6));
        let n = if h * w == 1 { 1 } else { [1, 3, 5][rng.gen_range(0..3)] };
        entries.push(TapEntry::new(name.clone(), n));
        shapes.insert(name.clone(), (h, w, c));
        taps.insert(name, random_map(&mut rng, h, w, c, 2.0));
    }
    let aux = random_aux(&mut rng);
    let spec = HypercolumnSpec::new(entries, aux, r).unwrap();
    let layout = BlockLayout::new(&spec, &shapes).unwrap();
    let m = rng.gen_range(1..=4);
    let classifiers = LinearClassifiers::new(
        layout.dim,
        (0..layout.dim * m).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        (0..m).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    )
    .unwrap();
    let candidate = aux
        .needs_candidate()
        .then(|| FeatureMap::from_fn(r, r, 1, |_, _, _| f64::from(rng.gen_range(0..=4u8)) / 4.0));
    Triple {
        taps,
        layout,
        classifiers,
        candidate,
    }
}

/// Align-corners bilinear sample of `tap` at output pixel `(y, x)` of an
/// `r × r` grid, reading the `n × n` neighborhood offset `(dy, dx)` with
/// zero padding.
fn sample(tap: &FeatureMap, r: usize, y: usize, x: usize, n: usize, dy: usize, dx: usize, c: usize) -> f64 {
    let (h, w, _) = tap.shape();
    let pos = |i: usize, src: usize| -> f64 {
        if src == 1 {
            0.0
        } else if r == 1 {
            (src - 1) as f64 / 2.0
        } else {
            i as f64 * (src - 1) as f64 / (r - 1) as f64
        }
    };
    let p = (n / 2) as isize;
    let read = |yy: isize, xx: isize| -> f64 {
        let (sy, sx) = (yy + dy as isize - p, xx + dx as isize - p);
        if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
            0.0
        } else {
            tap.get(sy as usize, sx as usize, c)
        }
    };
    let (py, px) = (pos(y, h), pos(x, w));
    let (y0, x0) = (py.floor(), px.floor());
    let (ty, tx) = (py - y0, px - x0);
    let (y0, x0) = (y0 as isize, x0 as isize);
    let y1 = (y0 + 1).min(h as isize - 1);
    let x1 = (x0 + 1).min(w as isize - 1);
    (1.0 - ty) * (1.0 - tx) * read(y0, x0) + (1.0 - ty) * tx * read(y0, x1) + ty * (1.0 - tx) * read(y1, x0) + ty * tx * read(y1, x1)
}

/// Hypercolumn descriptor at one pixel, built from first principles.
pub fn oracle_descriptor(t: &Triple, y: usize, x: usize) -> Vec<f64> {
    let r = t.layout.resolution;
    let mut d = Vec::with_capacity(t.layout.dim);
    for b in &t.layout.blocks {
        let tap = &t.taps[&b.tap];
        let n = b.neighborhood;
        for dy in 0..n {
            for dx in 0..n {
                for c in 0..tap.channels() {
                    d.push(sample(tap, r, y, x, n, dy, dx, c));
                }
            }
        }
    }
    let aux = t.layout.aux;
    if aux.inside_candidate {
        d.push(t.candidate.as_ref().unwrap().get(y, x, 0));
    }
    if aux.candidate_grid {
        d.extend(candidate_grid_features(t.candidate.as_ref().unwrap()));
    }
    if aux.location {
        d.push((x as f64 + 0.5) / r as f64);
        d.push((y as f64 + 0.5) / r as f64);
    }
    d
}

pub fn oracle_scores(t: &Triple) -> FeatureMap {
    let r = t.layout.resolution;
    let m = t.classifiers.count();
    let mut out = FeatureMap::zeros(r, r, m);
    for y in 0..r {
        for x in 0..r {
            let d = oracle_descriptor(t, y, x);
            for k in 0..m {
                let s: f64 = t.classifiers.weight(k).iter().zip(&d).map(|(a, b)| a * b).sum();
                out.set(y, x, k, s + t.classifiers.biases[k]);
            }
        }
    }
    out
}

pub fn max_abs_diff(a: &FeatureMap, b: &FeatureMap) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.data().iter().zip(b.data()).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max)
}

pub fn small_backbone(seed: u64) -> BackboneConfig {
    BackboneConfig {
        input_size: 8,
        in_channels: 1,
        layers: vec![
            LayerSpec::Conv { name: "c1".into(), out_channels: 3, size: 3, relu: true, tap: false },
            LayerSpec::Pool { name: "p1".into(), window: 2, stride: 2, tap: true },
            LayerSpec::Conv { name: "c2".into(), out_channels: 4, size: 3, relu: true, tap: false },
            LayerSpec::Pool { name: "p2".into(), window: 2, stride: 2, tap: true },
            LayerSpec::Fc { name: "fc".into(), out_channels: 5, relu: true, tap: true },
        ],
        seed,
    }
}

pub fn random_grid(backbone: &BackboneState, entries: Vec<TapEntry>, k: usize, r: usize, aux: AuxFeatures, rng: &mut ChaCha8Rng) -> ClassifierGrid {
    let spec = HypercolumnSpec::new(entries, aux, r).unwrap();
    let layout = BlockLayout::new(&spec, &backbone.tap_shapes()).unwrap();
    let kk = k * k;
    let classifiers = LinearClassifiers::new(
        layout.dim,
        (0..layout.dim * kk).map(|_| rng.gen_range(-0.6..0.6)).collect(),
        (0..kk).map(|_| rng.gen_range(-0.6..0.6)).collect(),
    )
    .unwrap();
    ClassifierGrid {
        k,
        lambda: 0.0,
        spec,
        layout,
        classifiers,
        fits: vec![],
    }
}

/// A grafted network with random classifiers on the small backbone.
pub struct NetCase {
    pub net: HyperNet,
    pub grid: ClassifierGrid,
    pub image: FeatureMap,
    pub candidate: Option<FeatureMap>,
    pub target: TargetHeatmap,
}

pub fn random_net(seed: u64) -> NetCase {
    let mut rng = rng(seed);
    let backbone = BackboneState::init(small_backbone(seed)).unwrap();
    let k = rng.gen_range(1..=3);
    let r = rng.gen_range(k.max(3)..=7);
    let entries = vec![
        TapEntry::new("p1", [1, 3][rng.gen_range(0..2)]),
        TapEntry::new("p2", [1, 3][rng.gen_range(0..2)]),
        TapEntry::new("fc", 1),
    ];
    let aux = random_aux(&mut rng);
    let grid = random_grid(&backbone, entries, k, r, aux, &mut rng);
    let image = random_map(&mut rng, 8, 8, 1, 1.0);
    let candidate = aux
        .needs_candidate()
        .then(|| FeatureMap::from_fn(r, r, 1, |_, _, _| f64::from(rng.gen_range(0..=2u8)) / 2.0));
    let mut labels: Vec<Label> = (0..r * r)
        .map(|_| match rng.gen_range(0..10) {
            0..=1 => Label::Ignore,
            2..=5 => Label::Positive,
            _ => Label::Negative,
        })
        .collect();
    labels[0] = Label::Ignore;
    labels[1] = Label::Positive;
    let target = TargetHeatmap::new(r, labels).unwrap();
    let net = HyperNet::from_grid(&grid, backbone).unwrap();
    NetCase {
        net,
        grid,
        image,
        candidate,
        target,
    }
}

/// Loss of `net` on one image, recomputed from scratch.
pub fn loss_of(net: &HyperNet, case: &NetCase) -> f64 {
    let cache = net.infer(&case.image, case.candidate.as_ref()).unwrap();
    net.loss_and_grad_for(&cache, &case.target, false).unwrap().loss
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs());
    if scale < 1e-7 {
        (analytic - numeric).abs() / 1e-7
    } else {
        (analytic - numeric).abs() / scale
    }
}

/// Central-difference check of every graft, aux and backbone gradient
/// (a seeded subset of entries per tensor). Returns the worst relative
/// error and the number of entries compared.
pub fn gradient_check(case: &NetCase, step: f64, per_tensor: usize, seed: u64) -> (f64, usize) {
    let mut rng = rng(seed);
    let cache = case.net.infer(&case.image, case.candidate.as_ref()).unwrap();
    let grad = case.net.loss_and_grad_for(&cache, &case.target, true).unwrap();
    let bb = grad.backbone.as_ref().unwrap();
    let mut worst = 0.0f64;
    let mut compared = 0;

    let mut check = |analytic: f64, perturb: &dyn Fn(&mut HyperNet, f64)| {
        let mut plus = case.net.clone();
        perturb(&mut plus, step);
        let mut minus = case.net.clone();
        perturb(&mut minus, -step);
        let numeric = (loss_of(&plus, case) - loss_of(&minus, case)) / (2.0 * step);
        worst = worst.max(relative_error(analytic, numeric));
        compared += 1;
    };

    let mut pick = |len: usize| -> Vec<usize> {
        if len <= per_tensor {
            (0..len).collect()
        } else {
            (0..per_tensor).map(|_| rng.gen_range(0..len)).collect()
        }
    };

    for (j, g) in grad.grafts.iter().enumerate() {
        for i in pick(g.kernel.data().len()) {
            check(g.kernel.data()[i], &|n, h| n.grafts[j].kernel.data_mut()[i] += h);
        }
        for i in pick(g.bias.len()) {
            check(g.bias[i], &|n, h| n.grafts[j].bias[i] += h);
        }
    }
    for i in pick(grad.aux.len()) {
        check(grad.aux[i], &|n, h| n.aux_weights[i] += h);
    }
    for (l, p) in bb.params.iter().enumerate() {
        for i in pick(p.weights.len()) {
            check(p.weights[i], &|n, h| n.backbone.params_mut()[l].weights[i] += h);
        }
        for i in pick(p.bias.len()) {
            check(p.bias[i], &|n, h| n.backbone.params_mut()[l].bias[i] += h);
        }
    }
    (worst, compared)
}

/// Plain L2-regularized logistic regression by Newton's method:
/// minimizes mean log-loss + (λ/2)|w|², bias unregularized.
pub fn newton_logistic(rows: &[Vec<f64>], labels: &[bool], lambda: f64) -> (Vec<f64>, f64) {
    let d = rows[0].len();
    let p = d + 1;
    let m = rows.len() as f64;
    let mut theta = vec![0.0; p];
    for _ in 0..100 {
        let mut g = vec![0.0; p];
        let mut h = vec![vec![0.0; p]; p];
        for (row, &y) in rows.iter().zip(labels) {
            let z: f64 = row.iter().zip(&theta).map(|(a, b)| a * b).sum::<f64>() + theta[d];
            let s = 1.0 / (1.0 + (-z).exp());
            let e = s - f64::from(u8::from(y));
            let x: Vec<f64> = row.iter().copied().chain([1.0]).collect();
            for i in 0..p {
                g[i] += e * x[i] / m;
                for j in 0..p {
                    h[i][j] += s * (1.0 - s) * x[i] * x[j] / m;
                }
            }
        }
        for i in 0..d {
            g[i] += lambda * theta[i];
            h[i][i] += lambda;
        }
        let step = solve(h, g.clone());
        for (t, s) in theta.iter_mut().zip(&step) {
            *t -= s;
        }
        if g.iter().map(|v| v * v).sum::<f64>().sqrt() < 1e-14 {
            break;
        }
    }
    let b = theta.pop().unwrap();
    (theta, b)
}

/// Gaussian elimination with partial pivoting.
fn solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Vec<f64> {
    let n = b.len();
    for c in 0..n {
        let piv = (c..n).max_by(|&i, &j| a[i][c].abs().total_cmp(&a[j][c].abs())).unwrap();
        a.swap(c, piv);
        b.swap(c, piv);
        for r in c + 1..n {
            let f = a[r][c] / a[c][c];
            for k in c..n {
                a[r][k] -= f * a[c][k];
            }
            b[r] -= f * b[c];
        }
    }
    let mut x = vec![0.0; n];
    for c in (0..n).rev() {
        let s: f64 = (c + 1..n).map(|k| a[c][k] * x[k]).sum();
        x[c] = (b[c] - s) / a[c][c];
    }
    x
}

// ---------------------------------------------------------------------------
// Metric oracles

pub const PARTS: [&str; 2] = ["arm", "leg"];
pub const KEYPOINTS: [&str; 2] = ["head", "hand"];

fn random_rect_mask(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Mask {
    let (y0, x0) = (rng.gen_range(0..h), rng.gen_range(0..w));
    let (y1, x1) = (rng.gen_range(y0 + 1..=h), rng.gen_range(x0 + 1..=w));
    Mask::from_fn(h, w, |y, x| (y0..y1).contains(&y) && (x0..x1).contains(&x))
}

/// One randomized image: up to 8 detections and 5 instances on a small
/// canvas, scores from a coarse set so ties occur.
pub struct MetricImage {
    pub detections: Vec<Detection>,
    pub instances: Vec<InstanceGT>,
}

impl MetricImage {
    pub fn case(&self) -> ImageCase<'_> {
        ImageCase {
            detections: &self.detections,
            instances: &self.instances,
        }
    }
}

pub fn random_metric_image(rng: &mut ChaCha8Rng) -> MetricImage {
    let (h, w) = (6, 6);
    let n_gt = rng.gen_range(0..=5);
    let n_det = rng.gen_range(0..=8);
    let instances: Vec<InstanceGT> = (0..n_gt)
        .map(|_| {
            let mask = random_rect_mask(rng, h, w);
            let split = rng.gen_range(0..=h);
            let mut parts = BTreeMap::new();
            parts.insert(PARTS[0].to_string(), Mask::from_fn(h, w, |y, x| mask.get(y, x) && y < split));
            if rng.gen_bool(0.8) {
                parts.insert(PARTS[1].to_string(), Mask::from_fn(h, w, |y, x| mask.get(y, x) && y >= split));
            }
            let keypoints = KEYPOINTS
                .iter()
                .map(|n| Keypoint {
                    name: n.to_string(),
                    x: rng.gen_range(0..w) as f64 + 0.5,
                    y: rng.gen_range(0..h) as f64 + 0.5,
                    visible: rng.gen_bool(0.75),
                })
                .collect();
            InstanceGT {
                category: 1,
                mask,
                parts,
                keypoints,
                reference_length: [2.0, 5.0, 10.0][rng.gen_range(0..3)],
            }
        })
        .collect();
    let detections = (0..n_det)
        .map(|_| {
            let score = f64::from(rng.gen_range(0..6u8)) / 5.0;
            let mut d = Detection::new(1, BoundingBox::new(0.0, 0.0, w as f64, h as f64).unwrap(), score);
            let mask = if !instances.is_empty() && rng.gen_bool(0.6) {
                let base = &instances[rng.gen_range(0..instances.len())].mask;
                Mask::from_fn(h, w, |y, x| if rng.gen_bool(0.15) { !base.get(y, x) } else { base.get(y, x) })
            } else {
                random_rect_mask(rng, h, w)
            };
            let names: Vec<String> = PARTS.iter().map(|s| s.to_string()).collect();
            let labels = mask.bits().iter().map(|&b| if b { rng.gen_range(0..=2u16) } else { 0 }).collect();
            d.parts = Some(LabelImage::new(h, w, names, labels).unwrap());
            d.mask = Some(mask);
            let mut kps = Vec::new();
            for n in KEYPOINTS {
                if rng.gen_bool(0.85) {
                    kps.push(KeypointPrediction {
                        name: n.to_string(),
                        x: rng.gen_range(0..w) as f64 + 0.5,
                        y: rng.gen_range(0..h) as f64 + 0.5,
                        score: f64::from(rng.gen_range(0..4u8)) / 3.0,
                    });
                }
            }
            d.keypoints = Some(kps);
            d
        })
        .collect();
    MetricImage { detections, instances }
}

/// Pixel-count IoU.
pub fn count_iou(a: &Mask, b: &Mask) -> f64 {
    let mut inter = 0usize;
    let mut union = 0usize;
    for (&p, &q) in a.bits().iter().zip(b.bits()) {
        inter += usize::from(p && q);
        union += usize::from(p || q);
    }
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// Part IoU by pixel counting: intersection needs matching part names.
pub fn count_part_iou(d: &Detection, g: &InstanceGT) -> f64 {
    let m = d.mask.as_ref().unwrap();
    let labels = d.parts.as_ref().unwrap();
    let (h, w) = (m.height(), m.width());
    let gt_name = |y: usize, x: usize| g.parts.iter().find(|(_, pm)| pm.get(y, x)).map(|(n, _)| n.as_str());
    let mut inter = 0usize;
    let mut union = 0usize;
    for y in 0..h {
        for x in 0..w {
            let (p, q) = (m.get(y, x), g.mask.get(y, x));
            union += usize::from(p || q);
            if p && q {
                if let (Some(a), Some(b)) = (labels.name_at(y, x), gt_name(y, x)) {
                    inter += usize::from(a == b);
                }
            }
        }
    }
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// Repeatedly take the highest-scoring unprocessed item (lowest index on
/// ties) by scanning everything.
fn scan_order(scores: &[f64]) -> Vec<usize> {
    let mut done = vec![false; scores.len()];
    let mut order = Vec::new();
    for _ in 0..scores.len() {
        let mut best: Option<usize> = None;
        for i in 0..scores.len() {
            if !done[i] && best.is_none_or(|b| scores[i] > scores[b]) {
                best = Some(i);
            }
        }
        let b = best.unwrap();
        done[b] = true;
        order.push(b);
    }
    order
}

/// AP from ranked hit flags, re-counting the hits above every cutoff.
pub fn oracle_ap(hits: &[bool], n_gt: usize) -> f64 {
    if n_gt == 0 {
        return 0.0;
    }
    let mut sum = 0.0;
    for k in 0..hits.len() {
        if hits[k] {
            let above = hits[..=k].iter().filter(|&&h| h).count();
            sum += above as f64 / (k + 1) as f64;
        }
    }
    sum / n_gt as f64
}

/// Global ranking: score descending, then detection index, then image.
fn oracle_rank(items: &mut [(f64, usize, usize, bool)]) -> Vec<bool> {
    let mut out = Vec::new();
    let mut done = vec![false; items.len()];
    for _ in 0..items.len() {
        let mut best: Option<usize> = None;
        for (i, it) in items.iter().enumerate() {
            if done[i] {
                continue;
            }
            let better = match best {
                None => true,
                Some(b) => {
                    let bt = &items[b];
                    it.0 > bt.0 || (it.0 == bt.0 && (it.2 < bt.2 || (it.2 == bt.2 && it.1 < bt.1)))
                }
            };
            if better {
                best = Some(i);
            }
        }
        let b = best.unwrap();
        done[b] = true;
        out.push(items[b].3);
    }
    out
}

pub fn oracle_region_ap(images: &[MetricImage], threshold: f64, overlap: impl Fn(&Detection, &InstanceGT) -> f64) -> f64 {
    let mut items = Vec::new();
    let mut n_gt = 0;
    for (img, im) in images.iter().enumerate() {
        n_gt += im.instances.len();
        let scores: Vec<f64> = im.detections.iter().map(|d| d.score).collect();
        let mut taken = vec![false; im.instances.len()];
        for d in scan_order(&scores) {
            let mut best: Option<(usize, f64)> = None;
            for (g, gt) in im.instances.iter().enumerate() {
                let o = overlap(&im.detections[d], gt);
                if !taken[g] && o >= threshold && best.is_none_or(|(_, b)| o > b) {
                    best = Some((g, o));
                }
            }
            if let Some((g, _)) = best {
                taken[g] = true;
            }
            items.push((scores[d], img, d, best.is_some()));
        }
    }
    oracle_ap(&oracle_rank(&mut items), n_gt)
}

pub fn oracle_apk(images: &[MetricImage], tau: f64) -> (BTreeMap<String, f64>, f64) {
    let mut per = BTreeMap::new();
    for name in KEYPOINTS {
        let mut items = Vec::new();
        let mut n_gt = 0;
        for (img, im) in images.iter().enumerate() {
            let gts: Vec<Option<&Keypoint>> = im
                .instances
                .iter()
                .map(|g| g.keypoints.iter().find(|k| k.name == name && k.visible))
                .collect();
            n_gt += gts.iter().flatten().count();
            let preds: Vec<(usize, &KeypointPrediction)> = im
                .detections
                .iter()
                .enumerate()
                .filter_map(|(i, d)| d.keypoints.as_ref().unwrap().iter().find(|p| p.name == name).map(|p| (i, p)))
                .collect();
            let scores: Vec<f64> = preds.iter().map(|p| p.1.score).collect();
            let mut taken = vec![false; gts.len()];
            for j in scan_order(&scores) {
                let (i, p) = preds[j];
                let mut best: Option<(usize, f64)> = None;
                for (g, kp) in gts.iter().enumerate() {
                    if let Some(kp) = kp {
                        let dist = ((p.x - kp.x).powi(2) + (p.y - kp.y).powi(2)).sqrt();
                        let limit = tau * im.instances[g].reference_length;
                        if !taken[g] && dist <= limit && best.is_none_or(|(_, b)| dist < b) {
                            best = Some((g, dist));
                        }
                    }
                }
                if let Some((g, _)) = best {
                    taken[g] = true;
                }
                items.push((p.score, img, i, best.is_some()));
            }
        }
        if n_gt > 0 {
            per.insert(name.to_string(), oracle_ap(&oracle_rank(&mut items), n_gt));
        }
    }
    let mean = if per.is_empty() {
        0.0
    } else {
        per.values().sum::<f64>() / per.len() as f64
    };
    (per, mean)
}

/// Per-class intersection over union by direct counting.
pub fn oracle_mean_iu(pred: &[u16], gt: &[u16], classes: usize) -> f64 {
    let mut vals = Vec::new();
    for c in 0..classes as u16 {
        let inter = pred.iter().zip(gt).filter(|(p, g)| **p == c && **g == c).count();
        let union = pred.iter().zip(gt).filter(|(p, g)| **p == c || **g == c).count();
        if union > 0 {
            vals.push(inter as f64 / union as f64);
        }
    }
    if vals.is_empty() {
        0.0
    } else {
        vals.iter().sum::<f64>() / vals.len() as f64
    }
}

// ---------------------------------------------------------------------------
// Label-rule oracles

/// Expanded box `[x0, x1) × [y0, y1)` by padding, outward rounding and clipping.
pub fn oracle_expand(b: &BoundingBox, frac: f64, h: usize, w: usize) -> (usize, usize, usize, usize) {
    let (bx0, by0) = (b.x0.max(0.0), b.y0.max(0.0));
    let (bx1, by1) = (b.x1.min(w as f64), b.y1.min(h as f64));
    let (pw, ph) = (frac * (bx1 - bx0), frac * (by1 - by0));
    let x0 = (bx0 - pw).floor().max(0.0) as usize;
    let y0 = (by0 - ph).floor().max(0.0) as usize;
    let x1 = ((bx1 + pw).ceil() as usize).min(w);
    let y1 = ((by1 + ph).ceil() as usize).min(h);
    (x0, y0, x1, y1)
}

/// Supersampled coverage: every pixel is split into `r × r` subpixels, so
/// each of the `r × r` target cells spans exactly `W × H` subpixels.
pub fn oracle_mask_labels(mask: &Mask, rect: (usize, usize, usize, usize), r: usize) -> Vec<Label> {
    let (x0, y0, x1, y1) = rect;
    let (w, h) = (x1 - x0, y1 - y0);
    let mut out = Vec::with_capacity(r * r);
    for i in 0..r {
        for j in 0..r {
            let mut on = 0usize;
            for sy in i * h..(i + 1) * h {
                for sx in j * w..(j + 1) * w {
                    if mask.get(y0 + sy / r, x0 + sx / r) {
                        on += 1;
                    }
                }
            }
            out.push(if 2 * on > w * h { Label::Positive } else { Label::Negative });
        }
    }
    out
}

pub fn oracle_keypoint_labels(kx: f64, ky: f64, rect: (usize, usize, usize, usize), r: usize, radius: f64) -> Vec<Label> {
    let (x0, y0, x1, y1) = rect;
    let (w, h) = ((x1 - x0) as f64, (y1 - y0) as f64);
    let limit = radius * (w * w + h * h).sqrt();
    let mut out = Vec::with_capacity(r * r);
    for i in 0..r {
        for j in 0..r {
            let cx = x0 as f64 + (j as f64 + 0.5) * w / r as f64;
            let cy = y0 as f64 + (i as f64 + 0.5) * h / r as f64;
            let inside_x = kx >= x0 as f64 + j as f64 * w / r as f64 && (kx < x0 as f64 + (j + 1) as f64 * w / r as f64 || j == r - 1);
            let inside_y = ky >= y0 as f64 + i as f64 * h / r as f64 && (ky < y0 as f64 + (i + 1) as f64 * h / r as f64 || i == r - 1);
            out.push(if inside_x && inside_y {
                Label::Positive
            } else if ((cx - kx).powi(2) + (cy - ky).powi(2)).sqrt() > limit {
                Label::Negative
            } else {
                Label::Ignore
            });
        }
    }
    out
}

pub fn labels_of(t: &TargetHeatmap) -> Vec<Label> {
    let r = t.resolution;
    (0..r * r).map(|i| t.get(i / r, i % r)).collect()
}

// ---------------------------------------------------------------------------
// Greedy suppression by enumeration

/// The unique subset `S` of `pool` with: `i ∈ S` iff no member of `S`
/// ranked above `i` overlaps it by more than `thr`. Found by trying every
/// subset.
pub fn enumerate_nms(scores: &[f64], pool: &[usize], thr: f64, overlap: impl Fn(usize, usize) -> f64) -> Vec<usize> {
    let above = |a: usize, b: usize| scores[a] > scores[b] || (scores[a] == scores[b] && a < b);
    let n = pool.len();
    let mut found = Vec::new();
    for bits in 0u32..(1 << n) {
        let inside = |k: usize| bits >> k & 1 == 1;
        let consistent = (0..n).all(|k| {
            let blocked = (0..n).any(|j| inside(j) && above(pool[j], pool[k]) && overlap(pool[j], pool[k]) > thr);
            inside(k) == !blocked
        });
        if consistent {
            found.push(bits);
        }
    }
    assert_eq!(found.len(), 1, "greedy suppression has exactly one fixed point");
    let bits = found[0];
    let mut kept: Vec<usize> = (0..n).filter(|&k| bits >> k & 1 == 1).map(|k| pool[k]).collect();
    kept.sort_by(|&a, &b| if above(a, b) { std::cmp::Ordering::Less } else { std::cmp::Ordering::Greater });
    kept
}

pub fn random_box(rng: &mut ChaCha8Rng, size: f64) -> BoundingBox {
    let x0 = f64::from(rng.gen_range(0..8u8)) * size / 10.0;
    let y0 = f64::from(rng.gen_range(0..8u8)) * size / 10.0;
    let w = f64::from(rng.gen_range(1..=4u8)) * size / 10.0;
    let h = f64::from(rng.gen_range(1..=4u8)) * size / 10.0;
    BoundingBox::new(x0, y0, x0 + w, y0 + h).unwrap()
}

pub fn box_iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let iw = (a.x1.min(b.x1) - a.x0.max(b.x0)).max(0.0);
    let ih = (a.y1.min(b.y1) - a.y0.max(b.y0)).max(0.0);
    let inter = iw * ih;
    let union = (a.x1 - a.x0) * (a.y1 - a.y0) + (b.x1 - b.x0) * (b.y1 - b.y0) - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}
