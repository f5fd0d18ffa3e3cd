use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::tensor::FeatureMap;

/// An `R × R` grid of probabilities over an expanded detection box.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "FeatureMap", into = "FeatureMap")]
pub struct Heatmap(FeatureMap);

impl Heatmap {
    pub fn new(map: FeatureMap) -> Result<Self> {
        if map.channels() != 1 || map.height() != map.width() {
            return Err(invalid!("heatmap must be square with one channel, got {:?}", map.shape()));
        }
        if let Some(v) = map.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(invalid!("heatmap value {v} outside [0, 1]"));
        }
        Ok(Self(map))
    }

    pub fn filled(resolution: usize, value: f64) -> Self {
        Self::new(FeatureMap::filled(resolution, resolution, 1, value)).expect("valid fill value")
    }

    pub fn resolution(&self) -> usize {
        self.0.height()
    }

    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.0.get(y, x, 0)
    }

    pub fn map(&self) -> &FeatureMap {
        &self.0
    }

    pub fn values(&self) -> &[f64] {
        self.0.data()
    }
}

impl TryFrom<FeatureMap> for Heatmap {
    type Error = crate::Error;

    fn try_from(map: FeatureMap) -> Result<Self> {
        Heatmap::new(map)
    }
}

impl From<Heatmap> for FeatureMap {
    fn from(h: Heatmap) -> Self {
        h.0
    }
}
