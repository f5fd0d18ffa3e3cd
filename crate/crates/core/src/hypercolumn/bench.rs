use std::collections::BTreeMap;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{score_fast_multi, score_naive_multi, BlockLayout, HypercolumnSpec, LinearClassifiers};
use crate::error::{invalid, Result};
use crate::tensor::FeatureMap;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    pub classifiers: usize,
    pub trials: usize,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            classifiers: 25,
            trials: 5,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub naive_seconds: Vec<f64>,
    pub fast_seconds: Vec<f64>,
    pub naive_median: f64,
    pub fast_median: f64,
    /// `naive_median / fast_median`
    pub ratio: f64,
    /// Per trial `max |fast - naive| / (1 + max |naive|)`.
    pub max_rel_diff: Vec<f64>,
}

impl BenchReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("trial,naive_seconds,fast_seconds,max_rel_diff\n");
        for i in 0..self.naive_seconds.len() {
            s.push_str(&format!(
                "{},{:.9},{:.9},{:.3e}\n",
                i, self.naive_seconds[i], self.fast_seconds[i], self.max_rel_diff[i]
            ));
        }
        s
    }

    pub fn summary(&self) -> String {
        format!(
            "naive median {:.3} ms, fast median {:.3} ms, speedup {:.2}x, worst relative difference {:.2e}",
            self.naive_median * 1e3,
            self.fast_median * 1e3,
            self.ratio,
            self.max_rel_diff.iter().cloned().fold(0.0, f64::max)
        )
    }
}

fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

/// Time descriptor materialization + dot products against the
/// convolve-then-upsample path on random taps of the given shapes.
pub fn bench_paths(
    spec: &HypercolumnSpec,
    tap_shapes: &BTreeMap<String, (usize, usize, usize)>,
    config: &BenchConfig,
) -> Result<BenchReport> {
    if config.trials < 3 {
        return Err(invalid!("benchmark needs at least 3 trials, got {}", config.trials));
    }
    if config.classifiers == 0 {
        return Err(invalid!("benchmark needs at least one classifier"));
    }
    let layout = BlockLayout::new(spec, tap_shapes)?;
    let r = layout.resolution;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut report = BenchReport {
        naive_seconds: Vec::new(),
        fast_seconds: Vec::new(),
        naive_median: 0.0,
        fast_median: 0.0,
        ratio: 0.0,
        max_rel_diff: Vec::new(),
    };
    for _ in 0..config.trials {
        let taps: BTreeMap<String, FeatureMap> = tap_shapes
            .iter()
            .map(|(k, &(h, w, c))| (k.clone(), FeatureMap::from_fn(h, w, c, |_, _, _| rng.gen_range(0.0..1.0))))
            .collect();
        let candidate = layout
            .aux
            .needs_candidate()
            .then(|| FeatureMap::from_fn(r, r, 1, |_, _, _| f64::from(rng.gen_bool(0.5))));
        let m = config.classifiers;
        let cls = LinearClassifiers::new(
            layout.dim,
            (0..layout.dim * m).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            (0..m).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )?;

        let t0 = Instant::now();
        let naive = score_naive_multi(&taps, &layout, &cls, candidate.as_ref())?;
        let t1 = Instant::now();
        let fast = score_fast_multi(&taps, &layout, &cls, candidate.as_ref())?;
        let t2 = Instant::now();

        let scale = 1.0 + naive.max_abs();
        let diff = naive
            .data()
            .iter()
            .zip(fast.data())
            .fold(0.0f64, |d, (a, b)| d.max((a - b).abs()));
        report.naive_seconds.push((t1 - t0).as_secs_f64());
        report.fast_seconds.push((t2 - t1).as_secs_f64());
        report.max_rel_diff.push(diff / scale);
    }
    report.naive_median = median(&report.naive_seconds);
    report.fast_median = median(&report.fast_seconds);
    report.ratio = report.naive_median / report.fast_median.max(f64::MIN_POSITIVE);
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::super::{AuxFeatures, TapEntry};
    use super::*;

    #[test]
    fn too_few_trials() {
        let spec = HypercolumnSpec::new(vec![TapEntry::new("a", 1)], AuxFeatures::default(), 10).unwrap();
        let shapes = BTreeMap::from([("a".to_string(), (4, 4, 8))]);
        let cfg = BenchConfig {
            trials: 1,
            ..Default::default()
        };
        assert!(bench_paths(&spec, &shapes, &cfg).is_err());
    }

    #[test]
    fn reports_agreeing_paths() {
        let spec = HypercolumnSpec::new(vec![TapEntry::new("a", 3)], AuxFeatures::all(), 12).unwrap();
        let shapes = BTreeMap::from([("a".to_string(), (4, 4, 8))]);
        let r = bench_paths(&spec, &shapes, &BenchConfig::default()).unwrap();
        assert_eq!(r.naive_seconds.len(), 5);
        assert!(r.max_rel_diff.iter().all(|&d| d < 1e-8));
        assert!(r.to_csv().lines().count() == 6);
    }

    #[test]
    fn median_even_odd() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
    }
}
