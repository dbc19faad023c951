//! Flat key-value configuration.
//!
//! Both the run configuration and the synthetic domain spec are TOML
//! documents holding only top-level `key = value` pairs. Unknown keys are
//! rejected. Every key is optional; missing keys take the defaults listed
//! in the README. Relative paths are resolved against the directory of the
//! file that names them.

use std::fs;
use std::path::{Path, PathBuf};

use ifaseg_core::augment::AugSpec;
use ifaseg_core::encoder::EncoderConfig;
use ifaseg_core::harness::{HarnessConfig, OptimConfig};
use ifaseg_core::ifa::{IfaConfig, LossWeights};
use ifaseg_core::protonet::SspConfig;
use ifaseg_core::synth::{ShapeFamily, SyntheticDomainSpec};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{io, Error, Result};

fn parse_toml<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(io(path))?;
    toml::from_str(&text).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        message: e.message().to_string(),
    })
}

fn base_dir(path: &Path) -> PathBuf {
    path.parent().map(Path::to_path_buf).unwrap_or_default()
}

/// Where a dataset comes from.
#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    Directory(PathBuf),
    Synthetic(SyntheticDomainSpec),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub input_size: usize,
    pub shots: usize,
    pub output_dir: PathBuf,

    pub source_data: Option<PathBuf>,
    pub source_spec: Option<PathBuf>,
    pub target_data: Option<PathBuf>,
    pub target_spec: Option<PathBuf>,
    /// Evaluation set; the target set when neither key is given.
    pub eval_data: Option<PathBuf>,
    pub eval_spec: Option<PathBuf>,

    pub encoder_widths: Vec<usize>,
    pub encoder_strides: Vec<usize>,
    pub encoder_kernel: usize,
    pub encoder_final_activation: bool,
    pub encoder_input_mean: f64,
    pub encoder_input_std: f64,

    pub ifa_iterations: usize,
    pub loss_support_base: f64,
    pub loss_query_base: f64,
    pub loss_support_back: f64,
    pub loss_iteration: f64,

    pub ssp_fg_threshold: f64,
    pub ssp_bg_threshold: f64,
    pub ssp_blend: f64,
    pub ssp_refinement_passes: usize,
    pub ssp_temperature: f64,
    pub ssp_adaptive_bg: bool,
    pub ssp_adaptive_bg_scale: f64,

    pub aug_horizontal_flip: bool,
    pub aug_vertical_flip: bool,
    pub aug_rotate90: bool,
    pub aug_brightness: bool,
    pub aug_hue: bool,
    pub aug_probability: f64,
    pub aug_brightness_min: f32,
    pub aug_brightness_max: f32,
    pub aug_hue_shift_deg: f32,
    pub aug_seed: u64,

    pub source_lr: f64,
    pub source_momentum: f64,
    pub source_epochs: usize,
    pub source_episodes_per_epoch: usize,

    pub finetune_lr: f64,
    pub finetune_momentum: f64,
    pub finetune_epochs: usize,
    pub finetune_repeats: usize,
    pub frozen_stages: usize,

    #[serde(skip)]
    base: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig::from_harness(&HarnessConfig::default())
    }
}

impl RunConfig {
    pub fn from_harness(h: &HarnessConfig) -> Self {
        let (e, i, s, a) = (&h.encoder, &h.ifa, &h.ifa.ssp, &h.aug);
        RunConfig {
            seed: h.seed,
            input_size: h.input_size,
            shots: h.shots,
            output_dir: PathBuf::from("out"),
            source_data: None,
            source_spec: None,
            target_data: None,
            target_spec: None,
            eval_data: None,
            eval_spec: None,
            encoder_widths: e.widths.clone(),
            encoder_strides: e.strides.clone(),
            encoder_kernel: e.kernel,
            encoder_final_activation: e.final_activation,
            encoder_input_mean: e.input_mean,
            encoder_input_std: e.input_std,
            ifa_iterations: i.iterations,
            loss_support_base: i.weights.support_base,
            loss_query_base: i.weights.query_base,
            loss_support_back: i.weights.support_back,
            loss_iteration: i.weights.iteration,
            ssp_fg_threshold: s.fg_threshold,
            ssp_bg_threshold: s.bg_threshold,
            ssp_blend: s.blend,
            ssp_refinement_passes: s.refinement_passes,
            ssp_temperature: s.temperature,
            ssp_adaptive_bg: s.adaptive_bg,
            ssp_adaptive_bg_scale: s.adaptive_bg_scale,
            aug_horizontal_flip: a.horizontal_flip,
            aug_vertical_flip: a.vertical_flip,
            aug_rotate90: a.rotate90,
            aug_brightness: a.brightness,
            aug_hue: a.hue,
            aug_probability: a.probability,
            aug_brightness_min: a.brightness_range.0,
            aug_brightness_max: a.brightness_range.1,
            aug_hue_shift_deg: a.hue_shift_deg,
            aug_seed: a.seed,
            source_lr: h.source.lr,
            source_momentum: h.source.momentum,
            source_epochs: h.source.epochs,
            source_episodes_per_epoch: h.source_episodes_per_epoch,
            finetune_lr: h.finetune.lr,
            finetune_momentum: h.finetune.momentum,
            finetune_epochs: h.finetune.epochs,
            finetune_repeats: h.finetune_repeats,
            frozen_stages: h.frozen_stages,
            base: PathBuf::new(),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut cfg: RunConfig = parse_toml(path)?;
        cfg.base = base_dir(path);
        cfg.harness().map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        Ok(cfg)
    }

    pub fn encoder(&self) -> EncoderConfig {
        EncoderConfig {
            widths: self.encoder_widths.clone(),
            strides: self.encoder_strides.clone(),
            kernel: self.encoder_kernel,
            final_activation: self.encoder_final_activation,
            input_mean: self.encoder_input_mean,
            input_std: self.encoder_input_std,
            ..EncoderConfig::default()
        }
    }

    /// The validated core configuration.
    pub fn harness(&self) -> ifaseg_core::Result<HarnessConfig> {
        let h = HarnessConfig {
            encoder: self.encoder(),
            ifa: IfaConfig {
                iterations: self.ifa_iterations,
                weights: LossWeights {
                    support_base: self.loss_support_base,
                    query_base: self.loss_query_base,
                    support_back: self.loss_support_back,
                    iteration: self.loss_iteration,
                },
                ssp: SspConfig {
                    fg_threshold: self.ssp_fg_threshold,
                    bg_threshold: self.ssp_bg_threshold,
                    blend: self.ssp_blend,
                    refinement_passes: self.ssp_refinement_passes,
                    temperature: self.ssp_temperature,
                    adaptive_bg: self.ssp_adaptive_bg,
                    adaptive_bg_scale: self.ssp_adaptive_bg_scale,
                },
            },
            aug: AugSpec {
                horizontal_flip: self.aug_horizontal_flip,
                vertical_flip: self.aug_vertical_flip,
                rotate90: self.aug_rotate90,
                brightness: self.aug_brightness,
                hue: self.aug_hue,
                probability: self.aug_probability,
                brightness_range: (self.aug_brightness_min, self.aug_brightness_max),
                hue_shift_deg: self.aug_hue_shift_deg,
                seed: self.aug_seed,
            },
            shots: self.shots,
            source: OptimConfig {
                lr: self.source_lr,
                momentum: self.source_momentum,
                epochs: self.source_epochs,
            },
            source_episodes_per_epoch: self.source_episodes_per_epoch,
            finetune: OptimConfig {
                lr: self.finetune_lr,
                momentum: self.finetune_momentum,
                epochs: self.finetune_epochs,
            },
            finetune_repeats: self.finetune_repeats,
            frozen_stages: self.frozen_stages,
            input_size: self.input_size,
            seed: self.seed,
        };
        h.validate()?;
        Ok(h)
    }

    fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base.join(p)
        }
    }

    pub fn output_dir(&self) -> PathBuf {
        self.resolve(&self.output_dir)
    }

    fn source_of(
        &self,
        key: &str,
        data: &Option<PathBuf>,
        spec: &Option<PathBuf>,
        fallback: impl FnOnce() -> SyntheticDomainSpec,
    ) -> Result<DataSource> {
        match (data, spec) {
            (Some(_), Some(_)) => Err(Error::Parse {
                path: self.base.clone(),
                message: format!("both {key}_data and {key}_spec are set"),
            }),
            (Some(d), None) => Ok(DataSource::Directory(self.resolve(d))),
            (None, Some(s)) => Ok(DataSource::Synthetic(SynthSpecFile::load(&self.resolve(s))?)),
            (None, None) => Ok(DataSource::Synthetic(fallback())),
        }
    }

    pub fn source(&self) -> Result<DataSource> {
        self.source_of("source", &self.source_data, &self.source_spec, SyntheticDomainSpec::default_source)
    }

    pub fn target(&self) -> Result<DataSource> {
        self.source_of("target", &self.target_data, &self.target_spec, SyntheticDomainSpec::default_target)
    }

    pub fn eval(&self) -> Result<DataSource> {
        if self.eval_data.is_none() && self.eval_spec.is_none() {
            return self.target();
        }
        self.source_of("eval", &self.eval_data, &self.eval_spec, SyntheticDomainSpec::default_target)
    }

    /// SHA-256 over the configuration as written, output directory
    /// excluded, so that runs differing only in where they write agree.
    pub fn digest(&self) -> String {
        let mut canonical = self.clone();
        canonical.output_dir = PathBuf::new();
        let bytes = serde_json::to_vec(&canonical).expect("config serializes");
        Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Synthetic domain spec file. `preset` picks the base spec (`source`,
/// `source-heldout` or `target`); every other key overrides one field.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpecFile {
    pub preset: Option<String>,
    pub domain: Option<String>,
    pub shape: Option<String>,
    pub palette: Option<Vec<[f32; 3]>>,
    pub background_palette: Option<Vec<[f32; 3]>>,
    pub noise_sigma: Option<f32>,
    pub scale_min: Option<f32>,
    pub scale_max: Option<f32>,
    pub categories: Option<usize>,
    pub images_per_category: Option<usize>,
    pub first_category_id: Option<u32>,
    pub color_jitter: Option<f32>,
    pub image_size: Option<usize>,
    pub seed: Option<u64>,
}

impl SynthSpecFile {
    pub fn load(path: &Path) -> Result<SyntheticDomainSpec> {
        let file: SynthSpecFile = parse_toml(path)?;
        file.resolve().map_err(|message| Error::Parse {
            path: path.to_path_buf(),
            message,
        })
    }

    pub fn resolve(&self) -> std::result::Result<SyntheticDomainSpec, String> {
        let mut s = match self.preset.as_deref().unwrap_or("source") {
            "source" => SyntheticDomainSpec::default_source(),
            "source-heldout" => SyntheticDomainSpec::default_in_domain_eval(),
            "target" => SyntheticDomainSpec::default_target(),
            other => return Err(format!("unknown preset {other:?}")),
        };
        if let Some(v) = &self.domain {
            s.domain = v.clone();
        }
        if let Some(v) = &self.shape {
            s.shape = ShapeFamily::parse(v).map_err(|e| e.to_string())?;
        }
        if let Some(v) = &self.palette {
            s.palette = v.clone();
        }
        if let Some(v) = &self.background_palette {
            s.background_palette = v.clone();
        }
        s.noise_sigma = self.noise_sigma.unwrap_or(s.noise_sigma);
        s.scale_range = (
            self.scale_min.unwrap_or(s.scale_range.0),
            self.scale_max.unwrap_or(s.scale_range.1),
        );
        s.categories = self.categories.unwrap_or(s.categories);
        s.images_per_category = self.images_per_category.unwrap_or(s.images_per_category);
        s.first_category_id = self.first_category_id.unwrap_or(s.first_category_id);
        s.color_jitter = self.color_jitter.unwrap_or(s.color_jitter);
        s.image_size = self.image_size.unwrap_or(s.image_size);
        s.seed = self.seed.unwrap_or(s.seed);
        s.validate().map_err(|e| e.to_string())?;
        Ok(s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_to_the_core_defaults() {
        assert_eq!(RunConfig::default().harness().unwrap(), HarnessConfig::default());
    }

    #[test]
    fn keys_override_and_unknown_keys_fail() {
        let cfg: RunConfig = toml::from_str("seed = 4\nifa_iterations = 5\nencoder_widths = [8, 8]\nencoder_strides = [2, 2]").unwrap();
        let h = cfg.harness().unwrap();
        assert_eq!((h.seed, h.ifa.iterations), (4, 5));
        assert_eq!(h.encoder.widths, vec![8, 8]);
        assert!(toml::from_str::<RunConfig>("sed = 4").is_err());
    }

    #[test]
    fn invalid_values_are_config_errors() {
        let cfg: RunConfig = toml::from_str("ifa_iterations = 0").unwrap();
        assert!(cfg.harness().is_err());
    }

    #[test]
    fn digest_ignores_output_dir_only() {
        let a = RunConfig::default();
        let b = RunConfig { output_dir: "elsewhere".into(), ..a.clone() };
        let c = RunConfig { seed: 1, ..a.clone() };
        assert_eq!(a.digest(), b.digest());
        assert_ne!(a.digest(), c.digest());
        assert_eq!(a.digest().len(), 64);
    }

    #[test]
    fn synth_spec_presets_and_overrides() {
        let f: SynthSpecFile = toml::from_str("preset = \"target\"\ncategories = 2\nshape = \"stripes\"").unwrap();
        let s = f.resolve().unwrap();
        assert_eq!(s.categories, 2);
        assert_eq!(s.shape, ShapeFamily::Stripes);
        assert_eq!(s.first_category_id, SyntheticDomainSpec::default_target().first_category_id);
        let bad: SynthSpecFile = toml::from_str("preset = \"nowhere\"").unwrap();
        assert!(bad.resolve().is_err());
    }
}
