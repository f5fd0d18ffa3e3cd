use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::config::{ExperimentConfig, Task};
use super::data::{head_names, head_target, make_crop, matched_instance, sample_pixels, task_detections, Crop, Splits};
use super::model::{Head, Model, Rescorer};
use super::predict::segment_scene;
use crate::backbone::{BackboneState, TapSet};
use crate::error::{invalid, Result};
use crate::grid::{degenerate_bias, logistic, train_grid, SolverConfig, TrainingSample};
use crate::hypercolumn::{assemble_at, BlockLayout};
use crate::hypernet::{finetune, FinetuneConfig, FinetuneSample, HyperNet};
use crate::tasks::{rescore_labels, Detection, Label};

/// A training detection that passed the overlap gate, with its crop and
/// backbone taps.
struct TrainItem {
    scene: usize,
    det: Detection,
    gt: usize,
    crop: Crop,
    taps: TapSet,
}

fn train_items(config: &ExperimentConfig, backbone: &BackboneState, splits: &Splits) -> Result<Vec<TrainItem>> {
    let per_scene: Vec<Vec<TrainItem>> = splits
        .train
        .par_iter()
        .enumerate()
        .map(|(si, scene)| {
            let mut out = Vec::new();
            for det in task_detections(config.task, &splits.train_candidates[si]) {
                let Some(gt) = matched_instance(&det, &scene.instances, config.targets.overlap_gate)? else {
                    continue;
                };
                let crop = make_crop(config, scene, &det)?;
                let taps = backbone.infer(&crop.image)?.0;
                out.push(TrainItem {
                    scene: si,
                    det,
                    gt,
                    crop,
                    taps,
                });
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;
    Ok(per_scene.into_iter().flatten().collect())
}

fn head_salt(head: usize) -> u64 {
    (head as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

fn head_samples(
    config: &ExperimentConfig,
    layout: &BlockLayout,
    splits: &Splits,
    items: &[TrainItem],
    head: usize,
    name: &str,
) -> Result<Vec<TrainingSample>> {
    let per_item: Vec<Vec<TrainingSample>> = items
        .par_iter()
        .enumerate()
        .map(|(i, it)| {
            let gt = &splits.train[it.scene].instances[it.gt];
            let Some(target) = head_target(name, &it.det, gt, config)? else {
                return Ok(Vec::new());
            };
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ head_salt(head));
            rng.set_stream(i as u64);
            let pixels = sample_pixels(&target, config.sampling.pixels_per_candidate, &mut rng);
            let coords: Vec<(usize, usize)> = pixels.iter().map(|&(y, x, _)| (y, x)).collect();
            let descriptors = assemble_at(&it.taps, layout, it.crop.candidate.as_ref(), &coords)?;
            Ok(pixels
                .into_iter()
                .zip(descriptors)
                .map(|((y, x, label), descriptor)| TrainingSample {
                    descriptor,
                    y,
                    x,
                    label,
                    instance: i as u64,
                })
                .collect())
        })
        .collect::<Result<_>>()?;
    Ok(per_item.into_iter().flatten().collect())
}

fn finetune_head(
    config: &ExperimentConfig,
    splits: &Splits,
    items: &[TrainItem],
    backbone: &BackboneState,
    grid: &crate::grid::ClassifierGrid,
    head: usize,
    name: &str,
) -> Result<(HyperNet, Vec<f64>)> {
    let mut net = HyperNet::from_grid(grid, backbone.clone())?;
    net.rates = config.finetune.rates.clone();
    let mut samples = Vec::new();
    for it in items {
        if samples.len() == config.finetune.max_samples {
            break;
        }
        let gt = &splits.train[it.scene].instances[it.gt];
        if let Some(target) = head_target(name, &it.det, gt, config)? {
            samples.push(FinetuneSample {
                image: it.crop.image.clone(),
                candidate: it.crop.candidate.clone(),
                target,
            });
        }
    }
    if samples.is_empty() {
        return Err(invalid!("no finetuning samples for head {name:?}"));
    }
    let ft = FinetuneConfig {
        epochs: config.finetune.epochs,
        seed: config.seed ^ head_salt(head),
        batch_size: config.finetune.batch_size,
        update_backbone: true,
    };
    let trace = finetune(&mut net, &samples, &ft)?;
    Ok((net, trace))
}

/// Features the rescorer sees for a segmented detection: the detector
/// score, the mean heat over the predicted figure and the figure's share
/// of the heatmap.
pub fn rescore_features(score: f64, heat: &[f64]) -> Vec<f64> {
    let inside: Vec<f64> = heat.iter().copied().filter(|&v| v >= crate::tasks::MASK_THRESHOLD).collect();
    let mean = if inside.is_empty() {
        0.0
    } else {
        inside.iter().sum::<f64>() / inside.len() as f64
    };
    vec![score, mean, inside.len() as f64 / heat.len() as f64]
}

fn train_rescorer(config: &ExperimentConfig, model: &Model, splits: &Splits) -> Result<Rescorer> {
    let per_scene: Vec<Vec<(Vec<f64>, bool)>> = splits
        .train
        .par_iter()
        .zip(&splits.train_candidates)
        .map(|(scene, cands)| {
            let seg = segment_scene(config, model, scene, cands)?;
            let dets: Vec<Detection> = seg.iter().map(|s| s.detection.clone()).collect();
            let labels = rescore_labels(&dets, &scene.instances)?;
            Ok(seg
                .into_iter()
                .zip(labels)
                .filter(|(_, l)| *l != Label::Ignore)
                .map(|(s, l)| (s.features, l == Label::Positive))
                .collect())
        })
        .collect::<Result<_>>()?;
    let rows: Vec<(Vec<f64>, bool)> = per_scene.into_iter().flatten().collect();
    let positives = rows.iter().filter(|r| r.1).count();
    let negatives = rows.len() - positives;
    if positives == 0 || negatives == 0 {
        return Ok(Rescorer {
            weights: vec![0.0; 3],
            bias: degenerate_bias(positives, rows.len()),
            positives,
            negatives,
        });
    }
    let x: Vec<&[f64]> = rows.iter().map(|r| r.0.as_slice()).collect();
    let y: Vec<bool> = rows.iter().map(|r| r.1).collect();
    let solver = SolverConfig {
        max_negative_ratio: None,
        ..config.grid.solver.clone()
    };
    let fit = logistic::fit(&x, &y, config.system2.lambda, &solver);
    Ok(Rescorer {
        weights: fit.weights,
        bias: fit.bias,
        positives,
        negatives,
    })
}

/// Train every head of the task (and the rescorer for System 2).
pub fn train(config: &ExperimentConfig, splits: &Splits) -> Result<Model> {
    config.validate()?;
    let backbone = BackboneState::init(config.backbone.clone())?;
    let layout = BlockLayout::new(&config.hypercolumn, &backbone.tap_shapes())?;
    let items = train_items(config, &backbone, splits)?;
    if items.is_empty() {
        return Err(invalid!(
            "no training detection overlaps an instance by at least {}",
            config.targets.overlap_gate
        ));
    }
    let mut heads = BTreeMap::new();
    let mut traces = BTreeMap::new();
    for (hi, name) in head_names(config.task).into_iter().enumerate() {
        let samples = head_samples(config, &layout, splits, &items, hi, &name)?;
        if samples.is_empty() {
            return Err(invalid!("head {name:?} has no training pixels"));
        }
        let grid = train_grid(&samples, &config.hypercolumn, &layout, &config.grid)?;
        drop(samples);
        let head = if config.finetune.enabled {
            let (net, trace) = finetune_head(config, splits, &items, &backbone, &grid, hi, &name)?;
            traces.insert(name.clone(), trace);
            Head::Net(Box::new(net))
        } else {
            Head::Grid(grid)
        };
        heads.insert(name, head);
    }
    drop(items);
    let mut model = Model::new(config.task, config.hash()?, splits.dataset_hash.clone(), backbone, heads);
    model.finetune_traces = traces;
    if config.task == Task::System2 {
        model.rescorer = Some(train_rescorer(config, &model, splits)?);
    }
    Ok(model)
}
