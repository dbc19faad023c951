//! The subcommands behind the `ifaseg` binary.
//!
//! Each command reads its inputs, runs the core, and writes its outputs
//! under the configured output directory:
//!
//! | command    | outputs                                                          |
//! |------------|------------------------------------------------------------------|
//! | `train`    | `source.safetensors`, `train_steps.jsonl`, `train_loss.txt`, `train_epoch_loss.txt` |
//! | `finetune` | `finetuned.safetensors`, `finetune_steps.jsonl`, `finetune_loss.txt`, `finetune_epoch_loss.txt` |
//! | `eval`     | `eval_report.json`, `eval_report.txt`                            |

use std::cell::RefCell;
use std::path::{Path, PathBuf};

use ifaseg_core::encoder::Encoder;
use ifaseg_core::episodes::{Dataset, SupportSplit};
use ifaseg_core::gestalt::{analyze_gestalt, CrossPairs, GestaltConfig};
use ifaseg_core::harness::{evaluate, finetune_target, train_source, HarnessConfig, StepRecord, TrainLog};
use ifaseg_core::synth::generate_synthetic;

use crate::checkpoint::Checkpoint;
use crate::config::{DataSource, RunConfig, SynthSpecFile};
use crate::dataset::{write_dataset, DirectoryDataset};
use crate::error::{Error, Result};
use crate::report::{EvalDocument, GestaltDocument};
use crate::steplog::{write_series, StepLog};

pub const SOURCE_CHECKPOINT: &str = "source.safetensors";
pub const FINETUNED_CHECKPOINT: &str = "finetuned.safetensors";

pub fn open_dataset(source: &DataSource) -> Result<Box<dyn Dataset>> {
    Ok(match source {
        DataSource::Directory(root) => Box::new(DirectoryDataset::open(root)?),
        DataSource::Synthetic(spec) => Box::new(generate_synthetic(spec)?),
    })
}

/// Generates the domain described by `spec` and writes it to `out`.
pub fn gen_synth(spec: &Path, out: &Path) -> Result<usize> {
    let spec = SynthSpecFile::load(spec)?;
    let ds = generate_synthetic(&spec)?;
    write_dataset(&ds, out)?;
    log::info!(
        "wrote {} images in {} categories to {}",
        ds.len(),
        ds.category_count(),
        out.display()
    );
    Ok(ds.len())
}

fn load_config(path: &Path) -> Result<(RunConfig, HarnessConfig)> {
    let cfg = RunConfig::load(path)?;
    let h = cfg.harness()?;
    Ok((cfg, h))
}

fn load_matching(path: &Path, h: &HarnessConfig) -> Result<Checkpoint> {
    let ck = Checkpoint::load(path)?;
    if ck.encoder.config() != &h.encoder {
        return Err(Error::Checkpoint {
            path: path.to_path_buf(),
            message: String::from("encoder configuration differs from the run configuration"),
        });
    }
    Ok(ck)
}

/// Runs a training loop with a step log attached. The first log write
/// error is reported after the loop finishes.
fn logged<F>(log_path: &Path, run: F) -> Result<(TrainLog, Vec<f32>)>
where
    F: FnOnce(&mut dyn FnMut(&StepRecord)) -> ifaseg_core::Result<TrainLog>,
{
    let log = RefCell::new(StepLog::create(log_path)?);
    let mut failure: Option<Error> = None;
    let mut on_step = |r: &StepRecord| {
        if failure.is_none() {
            if let Err(e) = log.borrow_mut().record(r) {
                failure = Some(e);
            }
        }
        if r.step.is_multiple_of(100) {
            log::debug!("{} epoch {} step {}: loss {:.4}", r.stage.name(), r.epoch, r.step, r.trace.total);
        }
    };
    let result = run(&mut on_step);
    if let Some(e) = failure {
        return Err(e);
    }
    let losses = log.into_inner().finish()?;
    Ok((result?, losses))
}

fn write_curves(dir: &Path, prefix: &str, steps: &[f32], epochs: &[f64]) -> Result<()> {
    write_series(&dir.join(format!("{prefix}_loss.txt")), steps)?;
    write_series(&dir.join(format!("{prefix}_epoch_loss.txt")), epochs)
}

/// Trains from a fresh encoder on the source domain.
pub fn train(config: &Path) -> Result<PathBuf> {
    let (cfg, h) = load_config(config)?;
    let out = cfg.output_dir();
    let ds = open_dataset(&cfg.source()?)?;
    let mut encoder = Encoder::init(h.encoder.clone(), h.seed)?;
    log::info!(
        "training on {} ({} categories, {} images), {} parameters",
        ds.domain(),
        ds.category_count(),
        ds.len(),
        encoder.param_count()
    );
    let (log, losses) = logged(&out.join("train_steps.jsonl"), |f| {
        train_source(&mut encoder, ds.as_ref(), &h, f)
    })?;
    write_curves(&out, "train", &losses, &log.epoch_losses)?;
    let path = out.join(SOURCE_CHECKPOINT);
    Checkpoint {
        encoder,
        seed: h.seed,
        stage: String::from("source"),
        config_digest: cfg.digest(),
    }
    .save(&path)?;
    log::info!("{} steps, checkpoint {}", log.steps, path.display());
    Ok(path)
}

/// Fine-tunes a checkpoint on the annotated supports of the target domain.
pub fn finetune(config: &Path, checkpoint: &Path) -> Result<PathBuf> {
    let (cfg, h) = load_config(config)?;
    let out = cfg.output_dir();
    let mut encoder = load_matching(checkpoint, &h)?.encoder;
    let ds = open_dataset(&cfg.target()?)?;
    let split = SupportSplit::new(ds.as_ref(), h.shots)?;
    let (log, losses) = logged(&out.join("finetune_steps.jsonl"), |f| {
        finetune_target(&mut encoder, ds.as_ref(), &split, &h, f)
    })?;
    write_curves(&out, "finetune", &losses, &log.epoch_losses)?;
    let path = out.join(FINETUNED_CHECKPOINT);
    Checkpoint {
        encoder,
        seed: h.seed,
        stage: String::from("finetune"),
        config_digest: cfg.digest(),
    }
    .save(&path)?;
    log::info!("{} steps, checkpoint {}", log.steps, path.display());
    Ok(path)
}

/// Evaluates a checkpoint on the held-out queries of the evaluation domain.
pub fn eval(config: &Path, checkpoint: &Path) -> Result<EvalDocument> {
    let (cfg, h) = load_config(config)?;
    let ck = load_matching(checkpoint, &h)?;
    let ds = open_dataset(&cfg.eval()?)?;
    let split = SupportSplit::new(ds.as_ref(), h.shots)?;
    let report = evaluate(&ck.encoder, ds.as_ref(), &split, &h, &cfg.digest(), &ck.stage)?;
    let doc = EvalDocument::new(&report, ds.as_ref());
    doc.write(&cfg.output_dir())?;
    Ok(doc)
}

#[derive(Debug, Clone)]
pub struct GestaltArgs {
    pub data: PathBuf,
    pub feature_space: bool,
    /// Encoder for feature space; a fresh default encoder when absent.
    pub checkpoint: Option<PathBuf>,
    pub cross: CrossPairs,
    pub pairs_per_image: usize,
    pub seed: u64,
    pub out: Option<PathBuf>,
}

pub fn gestalt(args: &GestaltArgs) -> Result<GestaltDocument> {
    let ds = DirectoryDataset::open(&args.data)?;
    let encoder = match (args.feature_space, &args.checkpoint) {
        (false, _) => None,
        (true, Some(p)) => Some(Checkpoint::load(p)?.encoder),
        (true, None) => {
            log::warn!("no checkpoint given; using an untrained encoder seeded with {}", args.seed);
            Some(Encoder::init(HarnessConfig::default().encoder, args.seed)?)
        }
    };
    let cfg = GestaltConfig {
        pairs_per_image: args.pairs_per_image,
        cross: args.cross,
        seed: args.seed,
    };
    let stats = analyze_gestalt(&ds, encoder.as_ref(), &cfg)?;
    let doc = GestaltDocument::new(&stats, args.feature_space, args.cross);
    if let Some(dir) = &args.out {
        doc.write(dir)?;
    }
    Ok(doc)
}
