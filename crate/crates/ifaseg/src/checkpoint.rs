//! Encoder checkpoints.
//!
//! A checkpoint is a safetensors file. Each encoder parameter is stored
//! under its own name (`stage{i}.weight` with shape `[out, in, k, k]`,
//! `stage{i}.bias` with shape `[out]`) as little-endian `F32`. The header's
//! string metadata holds:
//!
//! | key             | value                                              |
//! |-----------------|----------------------------------------------------|
//! | `format`        | `ifaseg-checkpoint/1`                              |
//! | `stage`         | `init`, `source` or `finetune`                     |
//! | `seed`          | decimal run seed                                   |
//! | `encoder`       | JSON object with the encoder configuration         |
//! | `config_digest` | SHA-256 of the run configuration that produced it  |

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use ifaseg_core::encoder::{Encoder, EncoderConfig, ParamTensor};
use safetensors::tensor::{Dtype, SafeTensors, TensorView};
use serde::{Deserialize, Serialize};

use crate::error::{io, Error, Result};

pub const FORMAT: &str = "ifaseg-checkpoint/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EncoderMeta {
    in_channels: usize,
    widths: Vec<usize>,
    strides: Vec<usize>,
    kernel: usize,
    final_activation: bool,
    input_mean: f64,
    input_std: f64,
}

impl From<&EncoderConfig> for EncoderMeta {
    fn from(c: &EncoderConfig) -> Self {
        EncoderMeta {
            in_channels: c.in_channels,
            widths: c.widths.clone(),
            strides: c.strides.clone(),
            kernel: c.kernel,
            final_activation: c.final_activation,
            input_mean: c.input_mean,
            input_std: c.input_std,
        }
    }
}

impl From<EncoderMeta> for EncoderConfig {
    fn from(m: EncoderMeta) -> Self {
        EncoderConfig {
            in_channels: m.in_channels,
            widths: m.widths,
            strides: m.strides,
            kernel: m.kernel,
            final_activation: m.final_activation,
            input_mean: m.input_mean,
            input_std: m.input_std,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub encoder: Encoder<f32>,
    pub seed: u64,
    pub stage: String,
    pub config_digest: String,
}

fn fail(path: &Path, message: impl Into<String>) -> Error {
    Error::Checkpoint {
        path: path.to_path_buf(),
        message: message.into(),
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let bytes: Vec<(String, Vec<usize>, Vec<u8>)> = self
            .encoder
            .params()
            .iter()
            .map(|p| {
                let raw = p.values.iter().flat_map(|v| v.to_le_bytes()).collect();
                (p.name.clone(), p.shape.clone(), raw)
            })
            .collect();
        let views = bytes
            .iter()
            .map(|(name, shape, raw)| {
                TensorView::new(Dtype::F32, shape.clone(), raw).map(|v| (name.as_str(), v))
            })
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| fail(Path::new(""), e.to_string()))?;
        let meta = HashMap::from([
            (String::from("format"), String::from(FORMAT)),
            (String::from("stage"), self.stage.clone()),
            (String::from("seed"), self.seed.to_string()),
            (
                String::from("encoder"),
                serde_json::to_string(&EncoderMeta::from(self.encoder.config()))?,
            ),
            (String::from("config_digest"), self.config_digest.clone()),
        ]);
        safetensors::tensor::serialize(views, Some(meta)).map_err(|e| fail(Path::new(""), e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes().map_err(|e| match e {
            Error::Checkpoint { message, .. } => fail(path, message),
            other => other,
        })?;
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(io(dir))?;
        }
        fs::write(path, bytes).map_err(io(path))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(io(path))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Checkpoint { message, .. } => fail(path, message),
            other => other,
        })
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let here = Path::new("");
        let (_, header) = SafeTensors::read_metadata(bytes).map_err(|e| fail(here, e.to_string()))?;
        let meta = header.metadata().clone().unwrap_or_default();
        let get = |key: &str| meta.get(key).ok_or_else(|| fail(here, format!("missing metadata key {key:?}")));
        if get("format")? != FORMAT {
            return Err(fail(here, format!("unsupported format {:?}", get("format")?)));
        }
        let seed = get("seed")?
            .parse()
            .map_err(|_| fail(here, format!("bad seed {:?}", get("seed").unwrap_or(&String::new()))))?;
        let config: EncoderConfig = serde_json::from_str::<EncoderMeta>(get("encoder")?)
            .map_err(|e| fail(here, format!("bad encoder record: {e}")))?
            .into();
        let tensors = SafeTensors::deserialize(bytes).map_err(|e| fail(here, e.to_string()))?;

        // Expected names and shapes come from a freshly laid out encoder.
        let layout = Encoder::<f32>::init(config.clone(), 0)?;
        if tensors.len() != layout.params().len() {
            return Err(fail(
                here,
                format!("{} tensors, the encoder has {} parameters", tensors.len(), layout.params().len()),
            ));
        }
        let mut params = Vec::with_capacity(layout.params().len());
        for want in layout.params() {
            let t = tensors
                .tensor(&want.name)
                .map_err(|_| fail(here, format!("missing tensor {:?}", want.name)))?;
            if t.dtype() != Dtype::F32 || t.shape() != want.shape.as_slice() {
                return Err(fail(
                    here,
                    format!("tensor {:?} is {:?} {:?}, expected F32 {:?}", want.name, t.dtype(), t.shape(), want.shape),
                ));
            }
            let values = t
                .data()
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect();
            params.push(ParamTensor {
                name: want.name.clone(),
                shape: want.shape.clone(),
                values,
            });
        }
        Ok(Checkpoint {
            encoder: Encoder::from_parts(config, params)?,
            seed,
            stage: get("stage")?.clone(),
            config_digest: get("config_digest")?.clone(),
        })
    }
}
