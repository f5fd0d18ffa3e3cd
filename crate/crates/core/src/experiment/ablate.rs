use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use super::data::Splits;
use super::evaluate::MetricReport;
use super::run;
use crate::error::{invalid, Result};
use crate::eval::paired_perm_test;
use crate::hypercolumn::TapEntry;
use crate::io::{FORMAT_VERSION, LIBRARY_VERSION};

pub const ABLATION_GRIDS: [usize; 4] = [1, 2, 5, 10];
pub const PERMUTATIONS: usize = 10_000;

#[derive(Clone, Debug, PartialEq)]
pub struct Variant {
    pub name: String,
    pub config: ExperimentConfig,
}

fn taps_label(entries: &[TapEntry]) -> String {
    if entries.is_empty() {
        return "none".into();
    }
    entries.iter().map(|e| e.tap.as_str()).collect::<Vec<_>>().join("+")
}

/// The 1×1 tap of the configured backbone.
pub fn global_tap(config: &ExperimentConfig) -> Result<String> {
    let shapes = config.backbone.tap_shapes()?;
    shapes
        .into_iter()
        .find(|(_, s)| (s.0, s.1) == (1, 1))
        .map(|(n, _)| n)
        .ok_or_else(|| invalid!("backbone has no 1x1 tap"))
}

pub fn fc_only(config: &ExperimentConfig) -> Result<ExperimentConfig> {
    Ok(config.with_entries(vec![TapEntry::new(global_tap(config)?, 1)]))
}

/// Full spec, fc-only, every pairwise tap drop and every grid size.
pub fn default_variants(config: &ExperimentConfig) -> Result<Vec<Variant>> {
    let mut out = vec![Variant {
        name: "full".into(),
        config: config.clone(),
    }];
    out.push(Variant {
        name: "fc_only".into(),
        config: fc_only(config)?,
    });
    let entries = &config.hypercolumn.entries;
    if entries.len() > 2 {
        for i in 0..entries.len() {
            for j in i + 1..entries.len() {
                let kept: Vec<TapEntry> = entries
                    .iter()
                    .enumerate()
                    .filter(|&(k, _)| k != i && k != j)
                    .map(|(_, e)| e.clone())
                    .collect();
                out.push(Variant {
                    name: format!("drop_{}_{}", entries[i].tap, entries[j].tap),
                    config: config.with_entries(kept),
                });
            }
        }
    }
    for k in ABLATION_GRIDS {
        if k != config.grid.k && k <= config.hypercolumn.resolution {
            out.push(Variant {
                name: format!("grid_{k}x{k}"),
                config: config.with_k(k),
            });
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub name: String,
    pub taps: String,
    pub k: usize,
    pub config_hash: String,
    pub metrics: Vec<(String, f64)>,
    /// Paired permutation p-value of the per-image desk metric against the
    /// reference row; `None` for the reference itself.
    pub p_value: Option<f64>,
    pub report: MetricReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub version: u32,
    pub library: String,
    pub dataset_hash: String,
    pub reference: String,
    pub desk_metric: String,
    pub permutations: usize,
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    pub fn row(&self, name: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.name == name)
    }

    pub fn to_csv(&self) -> String {
        let keys: Vec<String> = self
            .rows
            .first()
            .map(|r| r.metrics.iter().map(|m| m.0.clone()).collect())
            .unwrap_or_default();
        let mut s = format!("variant,taps,k,{},p_value\n", keys.join(","));
        for r in &self.rows {
            let vals: Vec<String> = keys
                .iter()
                .map(|k| {
                    r.metrics
                        .iter()
                        .find(|m| &m.0 == k)
                        .map(|m| m.1.to_string())
                        .unwrap_or_default()
                })
                .collect();
            let p = r.p_value.map(|p| p.to_string()).unwrap_or_default();
            s.push_str(&format!("{},{},{},{},{p}\n", r.name, r.taps, r.k, vals.join(",")));
        }
        s
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }
}

/// Per-image values of `b` aligned to the images of `a`.
pub fn paired_values(a: &MetricReport, b: &MetricReport) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for (i, s) in a.desk_scenes.iter().enumerate() {
        if let Ok(j) = b.desk_scenes.binary_search(s) {
            xs.push(a.desk_per_image[i]);
            ys.push(b.desk_per_image[j]);
        }
    }
    if xs.is_empty() {
        return Err(invalid!("reports share no evaluated images"));
    }
    Ok((xs, ys))
}

/// Train and evaluate every variant on the same data; the first variant
/// is the reference for significance tests.
pub fn run_ablation(variants: &[Variant], splits: &Splits, seed: u64) -> Result<AblationReport> {
    let first = variants.first().ok_or_else(|| invalid!("no ablation variants"))?;
    let mut reports = Vec::with_capacity(variants.len());
    for v in variants {
        reports.push(run(&v.config, splits)?.evaluation.report);
    }
    let reference = &reports[0];
    let mut rows = Vec::with_capacity(variants.len());
    for (i, (v, r)) in variants.iter().zip(&reports).enumerate() {
        let p_value = if i == 0 {
            None
        } else {
            let (a, b) = paired_values(reference, r)?;
            Some(paired_perm_test(&a, &b, PERMUTATIONS, seed)?)
        };
        rows.push(AblationRow {
            name: v.name.clone(),
            taps: taps_label(&v.config.hypercolumn.entries),
            k: v.config.grid.k,
            config_hash: v.config.hash()?,
            metrics: r.scalars(),
            p_value,
            report: r.clone(),
        });
    }
    Ok(AblationReport {
        version: FORMAT_VERSION,
        library: LIBRARY_VERSION.into(),
        dataset_hash: splits.dataset_hash.clone(),
        reference: first.name.clone(),
        desk_metric: reference.desk_metric.clone(),
        permutations: PERMUTATIONS,
        rows,
    })
}
