//! Per-step training logs.
//!
//! Every optimization step becomes one JSON object on its own line. The
//! object carries the step position, the pseudo-query augmentation (if
//! any), every weighted loss term and, per adaptor iteration, both
//! prototype pairs, both losses and the predicted foreground fraction.
//! Loss curves are written separately as plain text, one number per line.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use ifaseg_core::augment::AugRecord;
use ifaseg_core::harness::StepRecord;
use ifaseg_core::ifa::IterationRecord;
use serde::{Deserialize, Serialize};

use crate::error::{io, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugEntry {
    pub horizontal_flip: bool,
    pub vertical_flip: bool,
    pub rotate90: bool,
    pub brightness: Option<f32>,
    pub hue_shift_deg: Option<f32>,
}

impl From<&AugRecord> for AugEntry {
    fn from(r: &AugRecord) -> Self {
        AugEntry {
            horizontal_flip: r.horizontal_flip,
            vertical_flip: r.vertical_flip,
            rotate90: r.rotate90,
            brightness: r.brightness,
            hue_shift_deg: r.hue_shift_deg,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TermEntry {
    pub name: String,
    pub weight: f64,
    pub value: f32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationEntry {
    pub query_loss: f32,
    pub support_loss: f32,
    pub query_fg_fraction: f32,
    pub query_proto_fg: Vec<f32>,
    pub query_proto_bg: Vec<f32>,
    pub support_proto_fg: Vec<f32>,
    pub support_proto_bg: Vec<f32>,
}

fn mean(v: &[f32]) -> f32 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f32>() / v.len() as f32
    }
}

impl From<&IterationRecord<f32>> for IterationEntry {
    fn from(r: &IterationRecord<f32>) -> Self {
        IterationEntry {
            query_loss: r.query_loss,
            support_loss: r.support_loss,
            query_fg_fraction: mean(&r.query_pred),
            query_proto_fg: r.query_proto.fg.clone(),
            query_proto_bg: r.query_proto.bg.clone(),
            support_proto_fg: r.support_proto.fg.clone(),
            support_proto_bg: r.support_proto.bg.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepEntry {
    pub stage: String,
    pub epoch: usize,
    pub step: usize,
    pub category: u32,
    pub augmentation: Option<AugEntry>,
    pub support_base_loss: f32,
    pub terms: Vec<TermEntry>,
    pub iterations: Vec<IterationEntry>,
    pub total: f32,
}

impl From<&StepRecord> for StepEntry {
    fn from(r: &StepRecord) -> Self {
        StepEntry {
            stage: r.stage.name().to_string(),
            epoch: r.epoch,
            step: r.step,
            category: r.category,
            augmentation: r.augmentation.as_ref().map(AugEntry::from),
            support_base_loss: r.trace.support_base_loss,
            terms: r
                .trace
                .loss_terms()
                .into_iter()
                .map(|t| TermEntry {
                    name: t.name,
                    weight: t.weight,
                    value: t.value,
                })
                .collect(),
            iterations: r.trace.iterations.iter().map(IterationEntry::from).collect(),
            total: r.trace.total,
        }
    }
}

/// Streams step records to a JSON lines file.
pub struct StepLog {
    path: PathBuf,
    out: BufWriter<File>,
    losses: Vec<f32>,
}

impl StepLog {
    pub fn create(path: &Path) -> Result<Self> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(io(dir))?;
        }
        let file = File::create(path).map_err(io(path))?;
        Ok(StepLog {
            path: path.to_path_buf(),
            out: BufWriter::new(file),
            losses: Vec::new(),
        })
    }

    pub fn record(&mut self, r: &StepRecord) -> Result<()> {
        let line = serde_json::to_string(&StepEntry::from(r))?;
        writeln!(self.out, "{line}").map_err(io(&self.path))?;
        self.losses.push(r.trace.total);
        Ok(())
    }

    /// Total loss of every recorded step, in order.
    pub fn losses(&self) -> &[f32] {
        &self.losses
    }

    pub fn finish(mut self) -> Result<Vec<f32>> {
        self.out.flush().map_err(io(&self.path))?;
        Ok(self.losses)
    }
}

pub fn read_steps(path: &Path) -> Result<Vec<StepEntry>> {
    let text = fs::read_to_string(path).map_err(io(path))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Into::into))
        .collect()
}

pub fn write_series<T: std::fmt::Display>(path: &Path, values: &[T]) -> Result<()> {
    let mut text = String::with_capacity(values.len() * 12);
    for v in values {
        text.push_str(&v.to_string());
        text.push('\n');
    }
    fs::write(path, text).map_err(io(path))
}

pub fn read_series(path: &Path) -> Result<Vec<f64>> {
    let text = fs::read_to_string(path).map_err(io(path))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            l.trim().parse().map_err(|_| crate::Error::Parse {
                path: path.to_path_buf(),
                message: format!("not a number: {l:?}"),
            })
        })
        .collect()
}
