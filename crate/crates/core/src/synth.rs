//! Synthetic segmentation domains.
//!
//! Every image holds one foreground object on a flat background. A category
//! is an object colour; the background takes one colour of a separate
//! background palette. Each instance gets its own colour jitter on top of per-pixel
//! Gaussian noise, so pixels of one object agree more closely with each
//! other than with pixels of another instance of the same category.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::augment::hsv_to_rgb;
use crate::episodes::{survives_downsampling, Category, InMemoryDataset, Sample};
use crate::error::{Error, Result};
use crate::image::{BinaryMask, Image};

/// Objects are redrawn until their mask survives this much downsampling.
pub const MIN_OBJECT_STRIDE: usize = 8;

const MAX_REDRAWS: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShapeFamily {
    /// Union of three overlapping discs.
    Blobs,
    /// A thick rotated bar.
    Stripes,
    /// An annulus.
    Rings,
}

impl ShapeFamily {
    pub fn name(self) -> &'static str {
        match self {
            ShapeFamily::Blobs => "blobs",
            ShapeFamily::Stripes => "stripes",
            ShapeFamily::Rings => "rings",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "blobs" => Ok(ShapeFamily::Blobs),
            "stripes" => Ok(ShapeFamily::Stripes),
            "rings" => Ok(ShapeFamily::Rings),
            other => Err(Error::Config(format!("unknown shape family {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticDomainSpec {
    pub domain: String,
    pub shape: ShapeFamily,
    /// Category with id `i` draws its objects in `palette[i % len]`.
    pub palette: Vec<[f32; 3]>,
    /// Each image draws its background from this list.
    pub background_palette: Vec<[f32; 3]>,
    /// Per-pixel Gaussian noise standard deviation.
    pub noise_sigma: f32,
    /// Object extent as a fraction of the image side.
    pub scale_range: (f32, f32),
    pub categories: usize,
    pub images_per_category: usize,
    pub first_category_id: u32,
    /// Per-instance multiplicative colour jitter, per channel.
    pub color_jitter: f32,
    pub image_size: usize,
    pub seed: u64,
}

fn hue_ring(count: usize, offset_deg: f32, saturation: f32, value: f32) -> Vec<[f32; 3]> {
    (0..count)
        .map(|i| {
            hsv_to_rgb(
                offset_deg / 360.0 + i as f32 / count as f32,
                saturation,
                value,
            )
        })
        .collect()
}

impl SyntheticDomainSpec {
    /// Saturated colours, blob objects, light noise.
    pub fn default_source() -> Self {
        SyntheticDomainSpec {
            domain: String::from("synthetic-source"),
            shape: ShapeFamily::Blobs,
            palette: hue_ring(12, 0.0, 0.85, 0.9),
            background_palette: alloc::vec![
                [0.25, 0.25, 0.25],
                [0.35, 0.3, 0.27],
                [0.2, 0.24, 0.3],
                [0.42, 0.42, 0.4]
            ],
            noise_sigma: 0.03,
            scale_range: (0.3, 0.5),
            categories: 8,
            images_per_category: 40,
            first_category_id: 0,
            color_jitter: 0.05,
            image_size: 64,
            seed: 1,
        }
    }

    /// Source-style categories the source model never trained on.
    pub fn default_in_domain_eval() -> Self {
        SyntheticDomainSpec {
            domain: String::from("synthetic-source-heldout"),
            categories: 4,
            images_per_category: 12,
            first_category_id: 8,
            seed: 2,
            ..Self::default_source()
        }
    }

    /// Washed-out tints on near-grey backgrounds, ring objects, heavier
    /// noise.
    pub fn default_target() -> Self {
        SyntheticDomainSpec {
            domain: String::from("synthetic-target"),
            shape: ShapeFamily::Rings,
            palette: alloc::vec![
                [0.65, 0.48, 0.42],
                [0.48, 0.65, 0.45],
                [0.42, 0.48, 0.65],
                [0.65, 0.44, 0.62],
            ],
            background_palette: alloc::vec![
                [0.5, 0.5, 0.5],
                [0.56, 0.56, 0.55],
                [0.47, 0.47, 0.49]
            ],
            noise_sigma: 0.06,
            scale_range: (0.35, 0.55),
            categories: 4,
            images_per_category: 12,
            first_category_id: 100,
            color_jitter: 0.1,
            image_size: 64,
            seed: 3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.scale_range;
        if self.palette.is_empty() || self.background_palette.is_empty() {
            return Err(Error::Config(String::from(
                "object and background palettes must be non-empty",
            )));
        }
        let colours = self.palette.iter().chain(&self.background_palette);
        if colours.flatten().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Config(String::from(
                "palette colours must lie in [0, 1]",
            )));
        }
        if !(0.0 < lo && lo <= hi && hi <= 1.0) {
            return Err(Error::Config(format!("invalid scale range [{lo}, {hi}]")));
        }
        if !(self.noise_sigma >= 0.0 && self.color_jitter >= 0.0) {
            return Err(Error::Config(String::from(
                "noise and jitter must be non-negative",
            )));
        }
        if self.image_size < 2 * MIN_OBJECT_STRIDE {
            return Err(Error::Config(format!(
                "image size {} is too small",
                self.image_size
            )));
        }
        Ok(())
    }

    pub fn category_ids(&self) -> Vec<u32> {
        (0..self.categories as u32)
            .map(|c| self.first_category_id + c)
            .collect()
    }
}

fn gaussian(rng: &mut ChaCha8Rng) -> f32 {
    let u1: f64 = rng.random_range(f64::EPSILON..1.0);
    let u2: f64 = rng.random();
    (libm::sqrt(-2.0 * libm::log(u1)) * libm::cos(core::f64::consts::TAU * u2)) as f32
}

fn draw_mask(shape: ShapeFamily, size: usize, scale: f32, rng: &mut ChaCha8Rng) -> BinaryMask {
    let s = size as f32;
    let extent = scale * s;
    let margin = extent / 2.0;
    let cx: f32 = rng.random_range(margin..=s - margin);
    let cy: f32 = rng.random_range(margin..=s - margin);
    let mut mask = BinaryMask::zeros(size, size);
    match shape {
        ShapeFamily::Blobs => {
            let discs: Vec<(f32, f32, f32)> = (0..3)
                .map(|_| {
                    let r = extent / 2.0 * rng.random_range(0.55..1.0f32);
                    let ox = rng.random_range(-0.4..0.4f32) * extent / 2.0;
                    let oy = rng.random_range(-0.4..0.4f32) * extent / 2.0;
                    (cx + ox, cy + oy, r)
                })
                .collect();
            for y in 0..size {
                for x in 0..size {
                    let (px, py) = (x as f32 + 0.5, y as f32 + 0.5);
                    let inside = discs
                        .iter()
                        .any(|&(dx, dy, r)| (px - dx) * (px - dx) + (py - dy) * (py - dy) <= r * r);
                    mask.set(y, x, inside);
                }
            }
        }
        ShapeFamily::Stripes => {
            let theta: f32 = rng.random_range(0.0..core::f32::consts::PI);
            let (sin, cos) = (libm::sinf(theta), libm::cosf(theta));
            let half_len = extent * 0.75;
            let half_width = extent * 0.25;
            for y in 0..size {
                for x in 0..size {
                    let (px, py) = (x as f32 + 0.5 - cx, y as f32 + 0.5 - cy);
                    let along = px * cos + py * sin;
                    let across = -px * sin + py * cos;
                    mask.set(y, x, along.abs() <= half_len && across.abs() <= half_width);
                }
            }
        }
        ShapeFamily::Rings => {
            let outer = extent / 2.0;
            let inner = outer * 0.45;
            for y in 0..size {
                for x in 0..size {
                    let (dx, dy) = (x as f32 + 0.5 - cx, y as f32 + 0.5 - cy);
                    let d2 = dx * dx + dy * dy;
                    mask.set(y, x, d2 <= outer * outer && d2 >= inner * inner);
                }
            }
        }
    }
    mask
}

fn jittered(base: [f32; 3], jitter: f32, rng: &mut ChaCha8Rng) -> [f32; 3] {
    let mut out = base;
    if jitter > 0.0 {
        for v in &mut out {
            *v *= 1.0 + rng.random_range(-jitter..=jitter);
        }
    }
    out
}

fn render(spec: &SyntheticDomainSpec, category_id: u32, rng: &mut ChaCha8Rng) -> Result<Sample> {
    let n = spec.palette.len();
    let fg_index = category_id as usize % n;
    let size = spec.image_size;
    let (lo, hi) = spec.scale_range;
    let mut mask = None;
    for _ in 0..MAX_REDRAWS {
        let scale = if lo < hi {
            rng.random_range(lo..=hi)
        } else {
            lo
        };
        let m = draw_mask(spec.shape, size, scale, rng);
        if survives_downsampling(&m, MIN_OBJECT_STRIDE) && m.count() < size * size {
            mask = Some(m);
            break;
        }
    }
    let mask = mask.ok_or_else(|| {
        Error::Config(format!(
            "could not place an object in a {size}x{size} image"
        ))
    })?;
    let bg_index = rng.random_range(0..spec.background_palette.len());
    let fg = jittered(spec.palette[fg_index], spec.color_jitter, rng);
    let bg = jittered(spec.background_palette[bg_index], spec.color_jitter, rng);
    let mut image = Image::filled(size, size, [0.0; 3]);
    for y in 0..size {
        for x in 0..size {
            let base = if mask.get(y, x) == 1 { fg } else { bg };
            let mut px = [0.0; 3];
            for c in 0..3 {
                px[c] = base[c] + spec.noise_sigma * gaussian(rng);
            }
            image.set_pixel(y, x, px);
        }
    }
    Sample::new(image, mask)
}

/// Renders the dataset described by `spec`. Deterministic in the seed.
pub fn generate_synthetic(spec: &SyntheticDomainSpec) -> Result<InMemoryDataset> {
    spec.validate()?;
    let mut categories = Vec::with_capacity(spec.categories);
    for id in spec.category_ids() {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        rng.set_stream(id as u64);
        let samples = (0..spec.images_per_category)
            .map(|_| render(spec, id, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        categories.push(Category {
            id,
            name: format!("{}-{id:03}", spec.shape.name()),
            samples,
        });
    }
    Ok(InMemoryDataset::new(&spec.domain, categories))
}
