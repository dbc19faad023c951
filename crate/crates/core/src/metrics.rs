//! Foreground IoU accumulated per category.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::image::BinaryMask;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Confusion {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
}

impl Confusion {
    pub fn of(pred: &BinaryMask, truth: &BinaryMask) -> Result<Self> {
        if pred.height() != truth.height() || pred.width() != truth.width() {
            return Err(Error::Shape(format!(
                "prediction {}x{} vs ground truth {}x{}",
                pred.height(),
                pred.width(),
                truth.height(),
                truth.width()
            )));
        }
        let mut c = Confusion::default();
        for (&p, &t) in pred.data().iter().zip(truth.data()) {
            match (p, t) {
                (1, 1) => c.tp += 1,
                (1, 0) => c.fp += 1,
                (0, 1) => c.fn_ += 1,
                _ => {}
            }
        }
        Ok(c)
    }

    pub fn add(&mut self, other: Confusion) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.fn_ += other.fn_;
    }

    /// `TP / (TP + FP + FN)`; an empty union counts as a perfect match.
    pub fn iou(&self) -> f64 {
        let union = self.tp + self.fp + self.fn_;
        if union == 0 {
            1.0
        } else {
            self.tp as f64 / union as f64
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct IouAccumulator {
    per_category: BTreeMap<u32, (Confusion, usize)>,
}

impl IouAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a category so that it shows up as excluded if it never
    /// receives an episode.
    pub fn expect(&mut self, category: u32) {
        self.per_category.entry(category).or_default();
    }

    pub fn add(&mut self, category: u32, pred: &BinaryMask, truth: &BinaryMask) -> Result<()> {
        let c = Confusion::of(pred, truth)?;
        let e = self.per_category.entry(category).or_default();
        e.0.add(c);
        e.1 += 1;
        Ok(())
    }

    pub fn finish(&self, config_digest: &str, stage: &str) -> EvalReport {
        let mut per_category = BTreeMap::new();
        let mut excluded = Vec::new();
        let mut episodes = 0;
        for (&cat, &(conf, n)) in &self.per_category {
            if n == 0 {
                excluded.push(cat);
            } else {
                per_category.insert(cat, conf.iou());
                episodes += n;
            }
        }
        let mean_iou = if per_category.is_empty() {
            0.0
        } else {
            per_category.values().sum::<f64>() / per_category.len() as f64
        };
        EvalReport {
            per_category,
            mean_iou,
            episodes,
            excluded,
            config_digest: String::from(config_digest),
            stage: String::from(stage),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub per_category: BTreeMap<u32, f64>,
    pub mean_iou: f64,
    pub episodes: usize,
    /// Categories that had no evaluation episode.
    pub excluded: Vec<u32>,
    pub config_digest: String,
    /// Which checkpoint stage produced the predictions.
    pub stage: String,
}
