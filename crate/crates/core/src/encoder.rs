//! Weight-shared convolutional encoder.
//!
//! A stack of `3x3` strided convolutions. Every stage but the last is
//! followed by a ReLU; the last stage keeps its ReLU only when
//! [`EncoderConfig::final_activation`] is set.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{Gradients, Graph, Var};
use crate::image::{FeatureMap, Image};
use crate::real::Real;

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderConfig {
    pub in_channels: usize,
    /// Output channels of each stage.
    pub widths: Vec<usize>,
    /// Downsample factor of each stage.
    pub strides: Vec<usize>,
    pub kernel: usize,
    pub final_activation: bool,
    /// Pixels enter the network as `(x - input_mean) / input_std`.
    pub input_mean: f64,
    pub input_std: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            in_channels: 3,
            widths: alloc::vec![16, 32, 64],
            strides: alloc::vec![2, 2, 2],
            kernel: 3,
            final_activation: false,
            input_mean: 0.5,
            input_std: 0.25,
        }
    }
}

impl EncoderConfig {
    pub fn stage_count(&self) -> usize {
        self.widths.len()
    }

    /// Product of the stage strides.
    pub fn downsample(&self) -> usize {
        self.strides.iter().product()
    }

    pub fn out_channels(&self) -> usize {
        self.widths.last().copied().unwrap_or(0)
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.is_empty() {
            return Err(Error::Config(String::from(
                "encoder needs at least one stage",
            )));
        }
        if self.widths.len() != self.strides.len() {
            return Err(Error::Config(format!(
                "{} stage widths but {} strides",
                self.widths.len(),
                self.strides.len()
            )));
        }
        if self.widths.iter().chain(&self.strides).any(|&v| v == 0) || self.in_channels == 0 {
            return Err(Error::Config(String::from(
                "encoder widths and strides must be positive",
            )));
        }
        if !(self.input_std > 0.0 && self.input_std.is_finite() && self.input_mean.is_finite()) {
            return Err(Error::Config(format!(
                "invalid input normalization mean={} std={}",
                self.input_mean, self.input_std
            )));
        }
        if self.kernel == 0 || self.kernel.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "kernel size must be odd, got {}",
                self.kernel
            )));
        }
        Ok(())
    }

    /// Feature-map spatial size for an input of `height x width`.
    pub fn output_dims(&self, height: usize, width: usize) -> Result<(usize, usize)> {
        self.validate()?;
        let d = self.downsample();
        if !height.is_multiple_of(d) || !width.is_multiple_of(d) {
            return Err(Error::Config(format!(
                "input {height}x{width} is not divisible by the encoder downsample factor {d}"
            )));
        }
        Ok((height / d, width / d))
    }
}

/// A named parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamTensor<F> {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<F>,
}

/// Encoder parameters bound onto a [`Graph`].
#[derive(Debug, Clone)]
pub struct BoundParams {
    vars: Vec<Var>,
    trainable: Vec<bool>,
}

impl BoundParams {
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Encoder<F> {
    config: EncoderConfig,
    params: Vec<ParamTensor<F>>,
}

fn expected_shapes(cfg: &EncoderConfig) -> Vec<(String, Vec<usize>)> {
    let mut out = Vec::new();
    let mut cin = cfg.in_channels;
    for (i, &w) in cfg.widths.iter().enumerate() {
        out.push((
            format!("stage{i}.weight"),
            alloc::vec![w, cin, cfg.kernel, cfg.kernel],
        ));
        out.push((format!("stage{i}.bias"), alloc::vec![w]));
        cin = w;
    }
    out
}

impl<F: Real> Encoder<F> {
    /// Fan-in scaled uniform initialization, `U(-b, b)` with
    /// `b = sqrt(6 / fan_in)`; biases start at zero.
    pub fn init(config: EncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = expected_shapes(&config)
            .into_iter()
            .map(|(name, shape)| {
                let n: usize = shape.iter().product();
                let values = if shape.len() == 4 {
                    let fan_in = (shape[1] * shape[2] * shape[3]) as f64;
                    let bound = libm::sqrt(6.0 / fan_in);
                    (0..n)
                        .map(|_| F::of(rng.random_range(-bound..bound)))
                        .collect()
                } else {
                    alloc::vec![F::zero(); n]
                };
                ParamTensor {
                    name,
                    shape,
                    values,
                }
            })
            .collect();
        Ok(Encoder { config, params })
    }

    pub fn from_parts(config: EncoderConfig, params: Vec<ParamTensor<F>>) -> Result<Self> {
        config.validate()?;
        let expected = expected_shapes(&config);
        if expected.len() != params.len() {
            return Err(Error::Config(format!(
                "encoder expects {} parameter tensors, got {}",
                expected.len(),
                params.len()
            )));
        }
        for ((name, shape), p) in expected.iter().zip(&params) {
            if *name != p.name
                || *shape != p.shape
                || p.values.len() != shape.iter().product::<usize>()
            {
                return Err(Error::Config(format!(
                    "parameter {} {:?} does not match expected {} {:?}",
                    p.name, p.shape, name, shape
                )));
            }
        }
        Ok(Encoder { config, params })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn params(&self) -> &[ParamTensor<F>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [ParamTensor<F>] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.values.len()).sum()
    }

    /// Converts every parameter to another scalar type.
    pub fn cast<G: Real>(&self) -> Encoder<G> {
        Encoder {
            config: self.config.clone(),
            params: self
                .params
                .iter()
                .map(|p| ParamTensor {
                    name: p.name.clone(),
                    shape: p.shape.clone(),
                    values: p.values.iter().map(|v| G::of(v.as_f64())).collect(),
                })
                .collect(),
        }
    }

    /// Puts the parameters on `g`. The first `frozen_stages` stages are
    /// bound as constants and receive no gradient.
    pub fn bind(&self, g: &mut Graph<F>, frozen_stages: usize) -> Result<BoundParams> {
        let mut vars = Vec::with_capacity(self.params.len());
        let mut trainable = Vec::with_capacity(self.params.len());
        for (i, p) in self.params.iter().enumerate() {
            if let Some(bad) = p.values.iter().find(|v| !v.is_finite()) {
                return Err(Error::NonFinite {
                    context: format!("parameter {} ({bad})", p.name),
                    iteration: None,
                });
            }
            let train = i / 2 >= frozen_stages;
            let v = if train {
                g.param(p.values.clone(), &p.shape)?
            } else {
                g.constant(p.values.clone(), &p.shape)?
            };
            vars.push(v);
            trainable.push(train);
        }
        Ok(BoundParams { vars, trainable })
    }

    /// Records the forward pass of `image` on `g` and returns the
    /// `[C, H', W']` feature node.
    pub fn forward(&self, g: &mut Graph<F>, bound: &BoundParams, image: &Image) -> Result<Var> {
        self.config.output_dims(image.height(), image.width())?;
        let (mean, inv_std) = (
            F::of(self.config.input_mean),
            F::of(1.0 / self.config.input_std),
        );
        let chw = image
            .to_chw::<F>()
            .into_iter()
            .map(|v| (v - mean) * inv_std)
            .collect();
        let x = g.constant(chw, &[3, image.height(), image.width()])?;
        if self.config.in_channels != 3 {
            return Err(Error::Config(format!(
                "encoder expects {} input channels, images have 3",
                self.config.in_channels
            )));
        }
        self.forward_tensor(g, bound, x)
    }

    /// Forward pass over an arbitrary `[C, H, W]` node.
    pub fn forward_tensor(&self, g: &mut Graph<F>, bound: &BoundParams, input: Var) -> Result<Var> {
        let pad = self.config.kernel / 2;
        let stages = self.config.stage_count();
        let mut x = input;
        for s in 0..stages {
            x = g.conv2d(
                x,
                bound.vars[2 * s],
                bound.vars[2 * s + 1],
                self.config.strides[s],
                pad,
            )?;
            if s + 1 < stages || self.config.final_activation {
                x = g.relu(x);
            }
        }
        Ok(x)
    }

    /// Encodes one image outside of any training context.
    pub fn encode(&self, image: &Image) -> Result<FeatureMap<F>> {
        let mut g = Graph::new();
        let bound = self.bind(&mut g, 0)?;
        let f = self.forward(&mut g, &bound, image)?;
        let s = g.shape(f);
        let fm = FeatureMap::new(s[0], s[1], s[2], g.value(f).to_vec())?;
        if !fm.is_finite() {
            return Err(Error::NonFinite {
                context: String::from("encoder output"),
                iteration: None,
            });
        }
        Ok(fm)
    }
}

/// Gradient of a scalar `loss` with respect to every bound parameter, in
/// parameter order. Frozen parameters get zeros.
pub fn gradient_of<F: Real>(g: &Graph<F>, loss: Var, bound: &BoundParams) -> Result<Vec<Vec<F>>> {
    let grads: Gradients<F> = g.backward(loss)?;
    Ok(bound
        .vars
        .iter()
        .zip(&bound.trainable)
        .map(|(&v, &train)| {
            let n = g.value(v).len();
            if train {
                grads.get_or_zeros(v, n)
            } else {
                alloc::vec![F::zero(); n]
            }
        })
        .collect())
}
