//! End-to-end experiments on synthetic scenes: train the heads a task
//! needs, predict on the test split, evaluate, and compare variants.

mod ablate;
mod config;
mod data;
mod evaluate;
mod model;
mod predict;
mod train;

use std::path::Path;

pub use ablate::{default_variants, fc_only, global_tap, paired_values, run_ablation, AblationReport, AblationRow, Variant, ABLATION_GRIDS, PERMUTATIONS};
pub use config::{default_entries, DataConfig, ExperimentConfig, FinetuneSwitches, SamplingConfig, System2Config, Task};
pub use data::{head_kind, head_names, head_target, make_crop, matched_instance, sample_pixels, task_detections, Crop, HeadKind, Splits, FIGURE};
pub use evaluate::{evaluate, instance_labels, Evaluation, MetricReport};
pub use model::{Head, HeadEntry, Model, ModelManifest, Rescorer};
pub use predict::{analyse, predict_all, predict_scene, scene_detections, ScenePrediction};
pub use train::{rescore_features, train};

use crate::error::Result;
use crate::io::{atomic_write, write_jsonl, write_pgm};
use crate::synthdata::{Candidate, Scene};
use crate::tasks::splat;

pub struct RunOutput {
    pub model: Model,
    pub predictions: Vec<ScenePrediction>,
    pub evaluation: Evaluation,
}

/// Train on the training split, then predict and evaluate on the test split.
pub fn run(config: &ExperimentConfig, splits: &Splits) -> Result<RunOutput> {
    let model = train(config, splits)?;
    let predictions = predict_all(config, &model, &splits.test, &splits.test_candidates)?;
    let evaluation = evaluate(config, &splits.test, &predictions, &splits.dataset_hash)?;
    Ok(RunOutput {
        model,
        predictions,
        evaluation,
    })
}

/// `metrics.json`, `metrics.csv` and one `pr_<name>.csv` per curve.
pub fn write_evaluation(dir: &Path, evaluation: &Evaluation) -> Result<()> {
    atomic_write(&dir.join("metrics.json"), evaluation.report.to_json()?.as_bytes())?;
    atomic_write(&dir.join("metrics.csv"), evaluation.report.to_csv().as_bytes())?;
    for (name, curve) in &evaluation.curves {
        atomic_write(&dir.join(format!("pr_{name}.csv")), curve.to_csv().as_bytes())?;
    }
    Ok(())
}

pub fn write_predictions(path: &Path, predictions: &[ScenePrediction]) -> Result<()> {
    write_jsonl(path, predictions)
}

/// Grayscale heatmaps of the first `per_scene` detections of the first
/// `scenes` test scenes: the `R × R` map and its splat onto the image.
/// Returns the number of files written.
pub fn export_heatmaps(
    config: &ExperimentConfig,
    model: &Model,
    test: &[Scene],
    candidates: &[Vec<Candidate>],
    dir: &Path,
    scenes: usize,
    per_scene: usize,
) -> Result<usize> {
    let mut written = 0;
    for (scene, cands) in test.iter().zip(candidates).take(scenes) {
        let (h, w) = (scene.image.height(), scene.image.width());
        write_pgm(&dir.join(format!("scene{:05}_image.pgm", scene.index)), &scene.image, 0.0, 1.0)?;
        written += 1;
        for (j, det) in scene_detections(config, cands)?.iter().take(per_scene).enumerate() {
            let (_, crop, heat) = analyse(config, model, scene, det)?;
            for (name, hm) in &heat {
                let stem = format!("scene{:05}_det{j:02}_{}", scene.index, name.replace(':', "-"));
                write_pgm(&dir.join(format!("{stem}.pgm")), hm.map(), 0.0, 1.0)?;
                write_pgm(&dir.join(format!("{stem}_image.pgm")), &splat(hm, &crop.rect, h, w)?, 0.0, 1.0)?;
                written += 2;
            }
        }
    }
    Ok(written)
}
