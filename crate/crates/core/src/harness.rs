//! Source training, target fine-tuning and evaluation loops.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::augment::{derive_query, AugRecord, AugSpec};
use crate::encoder::{gradient_of, Encoder, EncoderConfig};
use crate::episodes::{sample_episode, Dataset, Episode, Sample, SupportSplit};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::ifa::{ifa_step_on, test_predict, IfaConfig, IfaTrace};
use crate::image::{BinaryMask, Image};
use crate::metrics::{EvalReport, IouAccumulator};
use crate::optim::Sgd;

#[derive(Debug, Clone, PartialEq)]
pub struct OptimConfig {
    pub lr: f64,
    pub momentum: f64,
    pub epochs: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HarnessConfig {
    pub encoder: EncoderConfig,
    /// Fine-tuning adaptor settings. Source training uses the same weights
    /// and matching settings with a single round.
    pub ifa: IfaConfig,
    pub aug: AugSpec,
    pub shots: usize,
    pub source: OptimConfig,
    pub source_episodes_per_epoch: usize,
    pub finetune: OptimConfig,
    /// Fine-tuning steps per category and epoch, in multiples of `shots`.
    pub finetune_repeats: usize,
    /// Leading encoder stages held fixed during fine-tuning.
    pub frozen_stages: usize,
    pub input_size: usize,
    pub seed: u64,
}

impl Default for HarnessConfig {
    fn default() -> Self {
        HarnessConfig {
            encoder: EncoderConfig::default(),
            ifa: IfaConfig::default(),
            aug: AugSpec::default(),
            shots: 1,
            source: OptimConfig {
                lr: 1e-3,
                momentum: 0.9,
                epochs: 20,
            },
            source_episodes_per_epoch: 200,
            finetune: OptimConfig {
                lr: 5e-4,
                momentum: 0.9,
                epochs: 20,
            },
            finetune_repeats: 10,
            frozen_stages: 0,
            input_size: 64,
            seed: 0,
        }
    }
}

impl HarnessConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.ifa.validate()?;
        self.aug.validate()?;
        self.encoder.output_dims(self.input_size, self.input_size)?;
        if self.shots == 0 {
            return Err(Error::Config(String::from("shots must be at least 1")));
        }
        if self.frozen_stages > self.encoder.stage_count() {
            return Err(Error::Config(format!(
                "cannot freeze {} of {} stages",
                self.frozen_stages,
                self.encoder.stage_count()
            )));
        }
        Ok(())
    }
}

/// Which loop produced a step record.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Source,
    Finetune,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Source => "source",
            Stage::Finetune => "finetune",
        }
    }
}

/// One optimization step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub stage: Stage,
    pub epoch: usize,
    /// Global step index within the stage.
    pub step: usize,
    pub category: u32,
    /// Pseudo-query augmentation; `None` for source steps with a real query.
    pub augmentation: Option<AugRecord>,
    pub trace: IfaTrace<f32>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    /// Mean total loss per epoch.
    pub epoch_losses: Vec<f64>,
    pub steps: usize,
}

fn fit(image: &Image, mask: &BinaryMask, size: usize) -> (Image, BinaryMask) {
    (image.resize(size, size), mask.resize_nearest(size, size))
}

fn fit_sample(s: &Sample, size: usize) -> (Image, BinaryMask) {
    fit(&s.image, &s.mask, size)
}

fn tag_step(e: Error, stage: Stage, step: usize) -> Error {
    match e {
        Error::NonFinite { context, iteration } => Error::NonFinite {
            context: format!("{} step {step}: {context}", stage.name()),
            iteration,
        },
        other => other,
    }
}

/// Runs one adaptor step on the given tensors and applies the update.
#[allow(clippy::too_many_arguments)]
fn optimize(
    encoder: &mut Encoder<f32>,
    opt: &mut Sgd<f32>,
    frozen_stages: usize,
    supports: &[(Image, BinaryMask)],
    query: &Image,
    query_mask: &BinaryMask,
    cfg: &IfaConfig,
) -> Result<IfaTrace<f32>> {
    let mut g = Graph::new();
    let bound = encoder.bind(&mut g, frozen_stages)?;
    let mut fs: Vec<Var> = Vec::with_capacity(supports.len());
    for (img, _) in supports {
        fs.push(encoder.forward(&mut g, &bound, img)?);
    }
    let masks: Vec<BinaryMask> = supports.iter().map(|(_, m)| m.clone()).collect();
    let fq = encoder.forward(&mut g, &bound, query)?;
    let (loss, trace) = ifa_step_on(&mut g, &fs, &masks, fq, query_mask, cfg)?;
    let grads = gradient_of(&g, loss, &bound)?;
    opt.step(encoder.params_mut(), &grads)?;
    Ok(trace)
}

/// Episodic training on the source domain with the single-round
/// bi-directional objective and real query masks.
pub fn train_source(
    encoder: &mut Encoder<f32>,
    ds: &dyn Dataset,
    cfg: &HarnessConfig,
    mut on_step: impl FnMut(&StepRecord),
) -> Result<TrainLog> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let mut opt = Sgd::new(cfg.source.lr, cfg.source.momentum)?;
    let ifa = cfg.ifa.bfp();
    let downsample = cfg.encoder.downsample();
    let mut log = TrainLog::default();
    for epoch in 0..cfg.source.epochs {
        let mut sum = 0.0;
        for _ in 0..cfg.source_episodes_per_epoch {
            let ep = sample_episode(ds, cfg.shots, downsample, &mut rng)?;
            let supports: Vec<_> = ep
                .support
                .iter()
                .map(|s| fit_sample(s, cfg.input_size))
                .collect();
            let (query, qmask) = match (&ep.query, &ep.query_mask) {
                (Some(q), Some(m)) => fit(q, m, cfg.input_size),
                _ => {
                    return Err(Error::Sampling(String::from(
                        "source episode without a labelled query",
                    )))
                }
            };
            let trace = optimize(encoder, &mut opt, 0, &supports, &query, &qmask, &ifa)
                .map_err(|e| tag_step(e, Stage::Source, log.steps))?;
            sum += trace.total as f64;
            on_step(&StepRecord {
                stage: Stage::Source,
                epoch,
                step: log.steps,
                category: ep.category,
                augmentation: None,
                trace,
            });
            log.steps += 1;
        }
        log.epoch_losses
            .push(sum / cfg.source_episodes_per_epoch.max(1) as f64);
    }
    Ok(log)
}

/// Fine-tunes on the annotated target supports only. Every step picks one
/// support of a category at random, derives a pseudo-query from it by
/// augmentation and runs the full iterative adaptor.
pub fn finetune_target(
    encoder: &mut Encoder<f32>,
    ds: &dyn Dataset,
    split: &SupportSplit,
    cfg: &HarnessConfig,
    mut on_step: impl FnMut(&StepRecord),
) -> Result<TrainLog> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(2);
    let mut aug_rng = ChaCha8Rng::seed_from_u64(cfg.aug.seed);
    let mut opt = Sgd::new(cfg.finetune.lr, cfg.finetune.momentum)?;
    let episodes: Vec<Episode> = (0..ds.category_count())
        .map(|c| split.finetune_episode(ds, c))
        .collect::<Result<_>>()?;
    let per_category = split.shots * cfg.finetune_repeats;
    let mut log = TrainLog::default();
    for epoch in 0..cfg.finetune.epochs {
        let mut order: Vec<usize> = (0..episodes.len())
            .flat_map(|c| core::iter::repeat_n(c, per_category))
            .collect();
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        for &c in &order {
            let ep = &episodes[c];
            let supports: Vec<_> = ep
                .support
                .iter()
                .map(|s| fit_sample(s, cfg.input_size))
                .collect();
            let pick = rng.random_range(0..supports.len());
            let (img, mask) = &supports[pick];
            let pseudo = derive_query(img, mask, &cfg.aug, &mut aug_rng)?;
            let trace = optimize(
                encoder,
                &mut opt,
                cfg.frozen_stages,
                &supports,
                &pseudo.image,
                &pseudo.mask,
                &cfg.ifa,
            )
            .map_err(|e| tag_step(e, Stage::Finetune, log.steps))?;
            sum += trace.total as f64;
            on_step(&StepRecord {
                stage: Stage::Finetune,
                epoch,
                step: log.steps,
                category: ep.category,
                augmentation: Some(pseudo.record),
                trace,
            });
            log.steps += 1;
        }
        log.epoch_losses.push(if order.is_empty() {
            0.0
        } else {
            sum / order.len() as f64
        });
    }
    Ok(log)
}

/// Predicts every held-out query from its category's support pool and
/// accumulates foreground IoU per category. Predictions are upsampled to
/// the query's resolution before the 0.5 threshold.
pub fn evaluate(
    encoder: &Encoder<f32>,
    ds: &dyn Dataset,
    split: &SupportSplit,
    cfg: &HarnessConfig,
    config_digest: &str,
    stage: &str,
) -> Result<EvalReport> {
    cfg.validate()?;
    let mut acc = IouAccumulator::new();
    for c in 0..ds.category_count() {
        let id = ds.category_id(c);
        acc.expect(id);
        let mut feats = Vec::with_capacity(split.pools[c].len());
        let mut masks = Vec::with_capacity(split.pools[c].len());
        for &i in &split.pools[c] {
            let (img, mask) = fit_sample(&ds.load(c, i)?, cfg.input_size);
            feats.push(encoder.encode(&img)?);
            masks.push(mask);
        }
        for &q in &split.queries[c] {
            let s = ds.load(c, q)?;
            let (img, _) = fit_sample(&s, cfg.input_size);
            let fq = encoder.encode(&img)?;
            let pred = test_predict(&feats, &masks, &fq, &cfg.ifa.ssp)?;
            let binary = pred.resize(s.mask.height(), s.mask.width()).binarize(0.5);
            acc.add(id, &binary, &s.mask)?;
        }
    }
    Ok(acc.finish(config_digest, stage))
}
