use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::backbone::BackboneConfig;
use crate::error::{invalid, Error, Result};
use crate::grid::GridTrainConfig;
use crate::hypercolumn::{AuxFeatures, HypercolumnSpec, TapEntry};
use crate::hypernet::LearningRates;
use crate::io::config_hash;
use crate::synthdata::{CandidateNoise, SceneConfig};
use crate::tasks::TargetConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    /// Figure-ground refinement of region candidates (candidate mask features available).
    Sds,
    Keypoint,
    Part,
    /// Box detections, pool expansion, segmentation, rescoring, mask NMS.
    System2,
}

impl Task {
    pub fn name(self) -> &'static str {
        match self {
            Task::Sds => "sds",
            Task::Keypoint => "keypoint",
            Task::Part => "part",
            Task::System2 => "system2",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub train_scenes: usize,
    pub test_scenes: usize,
    pub scene: SceneConfig,
    pub noise: CandidateNoise,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            train_scenes: 200,
            test_scenes: 100,
            scene: SceneConfig::default(),
            noise: CandidateNoise::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplingConfig {
    /// Labeled pixels drawn per training candidate.
    pub pixels_per_candidate: usize,
    /// Heatmap IoU gate for a test candidate to count in the refinement metric.
    pub eval_gate: f64,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self {
            pixels_per_candidate: 64,
            eval_gate: 0.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FinetuneSwitches {
    pub enabled: bool,
    pub epochs: usize,
    pub batch_size: usize,
    /// Training candidates used for finetuning (the first ones in dataset order).
    pub max_samples: usize,
    pub rates: LearningRates,
}

impl Default for FinetuneSwitches {
    fn default() -> Self {
        Self {
            enabled: false,
            epochs: 5,
            batch_size: 4,
            max_samples: 400,
            rates: LearningRates::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct System2Config {
    /// Initial detector NMS threshold (box IoU).
    pub detector_nms: f64,
    /// Suppressed boxes scoring below this never enter the pool. No default.
    pub score_floor: Option<f64>,
    pub lambda: f64,
}

impl Default for System2Config {
    fn default() -> Self {
        Self {
            detector_nms: 0.3,
            score_floor: None,
            lambda: 1e-3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub task: Task,
    pub seed: u64,
    #[serde(default)]
    pub output: PathBuf,
    /// Project heatmaps onto superpixels before thresholding masks.
    #[serde(default)]
    pub superpixels: bool,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub backbone: BackboneConfig,
    pub hypercolumn: HypercolumnSpec,
    #[serde(default)]
    pub grid: GridTrainConfig,
    #[serde(default)]
    pub targets: TargetConfig,
    #[serde(default)]
    pub sampling: SamplingConfig,
    #[serde(default)]
    pub finetune: FinetuneSwitches,
    #[serde(default)]
    pub system2: System2Config,
}

/// Taps of the default backbone with their default neighborhoods.
pub fn default_entries() -> Vec<TapEntry> {
    vec![
        TapEntry::new("pool1", 3),
        TapEntry::new("pool2", 3),
        TapEntry::new("pool3", 1),
        TapEntry::new("fc", 1),
    ]
}

impl ExperimentConfig {
    pub fn new(task: Task) -> Self {
        let aux = match task {
            Task::Sds => AuxFeatures::all(),
            _ => AuxFeatures::default(),
        };
        let mut grid = GridTrainConfig::default();
        grid.k = 5;
        let mut c = Self {
            task,
            seed: 0,
            output: PathBuf::from("runs").join(task.name()),
            superpixels: false,
            data: DataConfig::default(),
            backbone: BackboneConfig::default(),
            hypercolumn: HypercolumnSpec {
                entries: default_entries(),
                aux,
                resolution: crate::hypercolumn::DEFAULT_RESOLUTION,
            },
            grid,
            targets: TargetConfig::default(),
            sampling: SamplingConfig::default(),
            finetune: FinetuneSwitches::default(),
            system2: System2Config::default(),
        };
        if task == Task::System2 {
            c.system2.score_floor = Some(0.2);
        }
        c
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let c: Self = toml::from_str(text).map_err(|e| Error::Format(format!("config: {e}")))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Format(format!("config: {e}")))
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.hypercolumn.validate()?;
        self.data.scene.validate()?;
        self.data.noise.validate()?;
        if self.data.train_scenes == 0 || self.data.test_scenes == 0 {
            return Err(invalid!("train and test scene counts must be positive"));
        }
        if self.hypercolumn.resolution != self.targets.resolution {
            return Err(invalid!(
                "hypercolumn resolution {} differs from target resolution {}",
                self.hypercolumn.resolution,
                self.targets.resolution
            ));
        }
        if self.grid.k == 0 || self.grid.k > self.hypercolumn.resolution {
            return Err(invalid!("grid size K={} must lie in 1..={}", self.grid.k, self.hypercolumn.resolution));
        }
        if self.sampling.pixels_per_candidate == 0 {
            return Err(invalid!("pixels_per_candidate must be positive"));
        }
        if self.task == Task::System2 {
            if self.system2.score_floor.is_none() {
                return Err(invalid!("system2 needs system2.score_floor; it has no default"));
            }
            if self.hypercolumn.aux.needs_candidate() {
                return Err(invalid!("system2 segments box detections; candidate-mask features are unavailable"));
            }
        }
        if self.finetune.enabled && self.hypercolumn.entries.is_empty() {
            return Err(invalid!("finetuning needs at least one tap"));
        }
        Ok(())
    }

    /// Hash of everything that influences results (the output path excluded).
    pub fn hash(&self) -> Result<String> {
        let mut c = self.clone();
        c.output = PathBuf::new();
        config_hash(&c)
    }

    pub fn with_entries(&self, entries: Vec<TapEntry>) -> Self {
        let mut c = self.clone();
        c.hypercolumn.entries = entries;
        c
    }

    pub fn with_k(&self, k: usize) -> Self {
        let mut c = self.clone();
        c.grid.k = k;
        c
    }
}
