//! Evaluation and Gestalt reports.
//!
//! Each report is written twice: a JSON document for machines and an
//! aligned text table for people. Both are deterministic functions of their
//! input so that repeated runs produce identical bytes.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use ifaseg_core::episodes::Dataset;
use ifaseg_core::gestalt::{CrossPairs, GestaltStats};
use ifaseg_core::metrics::EvalReport;
use serde::{Deserialize, Serialize};

use crate::error::{io, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryIou {
    pub id: u32,
    pub name: String,
    pub iou: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalDocument {
    pub stage: String,
    pub config_digest: String,
    pub mean_iou: f64,
    pub episodes: usize,
    pub per_category: Vec<CategoryIou>,
    pub excluded: Vec<u32>,
}

impl EvalDocument {
    pub fn new(report: &EvalReport, ds: &dyn Dataset) -> Self {
        let name_of = |id: u32| {
            (0..ds.category_count())
                .find(|&c| ds.category_id(c) == id)
                .map(|c| ds.category_name(c))
                .unwrap_or_default()
        };
        EvalDocument {
            stage: report.stage.clone(),
            config_digest: report.config_digest.clone(),
            mean_iou: report.mean_iou,
            episodes: report.episodes,
            per_category: report
                .per_category
                .iter()
                .map(|(&id, &iou)| CategoryIou {
                    id,
                    name: name_of(id),
                    iou,
                })
                .collect(),
            excluded: report.excluded.clone(),
        }
    }

    pub fn table(&self) -> String {
        let width = self
            .per_category
            .iter()
            .map(|c| c.name.len())
            .chain([8])
            .max()
            .unwrap_or(8);
        let mut out = String::new();
        let _ = writeln!(out, "stage   {}", self.stage);
        let _ = writeln!(out, "digest  {}", self.config_digest);
        let _ = writeln!(out, "queries {}", self.episodes);
        let _ = writeln!(out);
        let _ = writeln!(out, "{:>6}  {:<width$}  {:>8}", "id", "category", "IoU");
        for c in &self.per_category {
            let _ = writeln!(out, "{:>6}  {:<width$}  {:>8.4}", c.id, c.name, c.iou);
        }
        let _ = writeln!(out, "{:>6}  {:<width$}  {:>8.4}", "", "mean", self.mean_iou);
        if !self.excluded.is_empty() {
            let ids: Vec<String> = self.excluded.iter().map(u32::to_string).collect();
            let _ = writeln!(out, "\nexcluded (no queries): {}", ids.join(", "));
        }
        out
    }

    /// Writes `eval_report.json` and `eval_report.txt` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        write_pair(dir, "eval_report", &serde_json::to_string_pretty(self)?, &self.table())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GestaltDocument {
    pub space: String,
    pub cross_pairs_from: String,
    pub intra: f64,
    pub cross: f64,
    pub intra_pairs: usize,
    pub cross_pairs: usize,
    pub skipped_categories: usize,
}

impl GestaltDocument {
    pub fn new(stats: &GestaltStats, feature_space: bool, cross: CrossPairs) -> Self {
        GestaltDocument {
            space: String::from(if feature_space { "feature" } else { "pixel" }),
            cross_pairs_from: String::from(match cross {
                CrossPairs::SameCategory => "same-category",
                CrossPairs::DifferentCategory => "different-category",
            }),
            intra: stats.intra,
            cross: stats.cross,
            intra_pairs: stats.intra_pairs,
            cross_pairs: stats.cross_pairs,
            skipped_categories: stats.skipped_categories,
        }
    }

    pub fn table(&self) -> String {
        format!(
            "space {} (cross pairs: {})\n\n{:<6} {:>10} {:>8}\n{:<6} {:>10.4} {:>8}\n{:<6} {:>10.4} {:>8}\nskipped categories: {}\n",
            self.space,
            self.cross_pairs_from,
            "",
            "mean cos",
            "pairs",
            "intra",
            self.intra,
            self.intra_pairs,
            "cross",
            self.cross,
            self.cross_pairs,
            self.skipped_categories
        )
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        write_pair(dir, "gestalt_report", &serde_json::to_string_pretty(self)?, &self.table())
    }
}

fn write_pair(dir: &Path, stem: &str, json: &str, table: &str) -> Result<()> {
    fs::create_dir_all(dir).map_err(io(dir))?;
    let jp = dir.join(format!("{stem}.json"));
    fs::write(&jp, format!("{json}\n")).map_err(io(&jp))?;
    let tp = dir.join(format!("{stem}.txt"));
    fs::write(&tp, table).map_err(io(&tp))
}
