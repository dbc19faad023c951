//! Paired image / mask augmentation used to derive a pseudo-query from an
//! annotated support.
//!
//! Geometric operations (flips, quarter turn) move image and mask pixels
//! together. Photometric operations (brightness, hue) touch the image only.

use alloc::format;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{Error, Result};
use crate::image::{BinaryMask, Image};

#[derive(Debug, Clone, PartialEq)]
pub struct AugSpec {
    pub horizontal_flip: bool,
    pub vertical_flip: bool,
    pub rotate90: bool,
    pub brightness: bool,
    pub hue: bool,
    /// Chance that each enabled op is applied on a given call.
    pub probability: f64,
    /// Multiplicative brightness factor range.
    pub brightness_range: (f32, f32),
    /// Maximum absolute hue shift in degrees.
    pub hue_shift_deg: f32,
    pub seed: u64,
}

impl Default for AugSpec {
    fn default() -> Self {
        AugSpec {
            horizontal_flip: true,
            vertical_flip: true,
            rotate90: true,
            brightness: true,
            hue: true,
            probability: 0.5,
            brightness_range: (0.7, 1.3),
            hue_shift_deg: 18.0,
            seed: 0,
        }
    }
}

impl AugSpec {
    /// No op enabled: augmentation is the identity.
    pub fn identity() -> Self {
        AugSpec {
            horizontal_flip: false,
            vertical_flip: false,
            rotate90: false,
            brightness: false,
            hue: false,
            ..AugSpec::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.probability) {
            return Err(Error::Config(format!(
                "augmentation probability {} outside [0, 1]",
                self.probability
            )));
        }
        let (lo, hi) = self.brightness_range;
        if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
            return Err(Error::Config(format!(
                "invalid brightness range [{lo}, {hi}]"
            )));
        }
        if !(self.hue_shift_deg >= 0.0 && self.hue_shift_deg <= 180.0) {
            return Err(Error::Config(format!(
                "hue shift {} outside [0, 180]",
                self.hue_shift_deg
            )));
        }
        Ok(())
    }
}

/// Which operations a call applied, in application order: horizontal flip,
/// vertical flip, quarter turn, brightness, hue.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct AugRecord {
    pub horizontal_flip: bool,
    pub vertical_flip: bool,
    pub rotate90: bool,
    pub brightness: Option<f32>,
    pub hue_shift_deg: Option<f32>,
}

impl AugRecord {
    pub fn is_geometric_identity(&self) -> bool {
        !self.horizontal_flip && !self.vertical_flip && !self.rotate90
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedPair {
    pub image: Image,
    pub mask: BinaryMask,
    pub record: AugRecord,
}

/// Samples an op set from `spec` and applies it to the pair.
pub fn derive_query<R: Rng + ?Sized>(
    image: &Image,
    mask: &BinaryMask,
    spec: &AugSpec,
    rng: &mut R,
) -> Result<AugmentedPair> {
    spec.validate()?;
    if image.height() != mask.height() || image.width() != mask.width() {
        return Err(Error::Shape(format!(
            "image {}x{} and mask {}x{} differ",
            image.height(),
            image.width(),
            mask.height(),
            mask.width()
        )));
    }
    let mut coin = |enabled: bool| enabled && rng.random_bool(spec.probability);
    let mut record = AugRecord {
        horizontal_flip: coin(spec.horizontal_flip),
        vertical_flip: coin(spec.vertical_flip),
        rotate90: coin(spec.rotate90),
        ..AugRecord::default()
    };
    let do_brightness = coin(spec.brightness);
    let do_hue = coin(spec.hue);
    if do_brightness {
        let (lo, hi) = spec.brightness_range;
        record.brightness = Some(if lo < hi {
            rng.random_range(lo..=hi)
        } else {
            lo
        });
    }
    if do_hue && spec.hue_shift_deg > 0.0 {
        record.hue_shift_deg = Some(rng.random_range(-spec.hue_shift_deg..=spec.hue_shift_deg));
    }
    Ok(apply(image, mask, &record))
}

/// Applies a recorded op set.
pub fn apply(image: &Image, mask: &BinaryMask, record: &AugRecord) -> AugmentedPair {
    let mut img = image.clone();
    let mut m = mask.clone();
    if record.horizontal_flip {
        img = map_image(&img, Geo::HFlip);
        m = map_mask(&m, Geo::HFlip);
    }
    if record.vertical_flip {
        img = map_image(&img, Geo::VFlip);
        m = map_mask(&m, Geo::VFlip);
    }
    if record.rotate90 {
        img = map_image(&img, Geo::RotCcw);
        m = map_mask(&m, Geo::RotCcw);
    }
    if let Some(f) = record.brightness {
        img = adjust_brightness(&img, f);
    }
    if let Some(h) = record.hue_shift_deg {
        img = shift_hue(&img, h);
    }
    AugmentedPair {
        image: img,
        mask: m,
        record: *record,
    }
}

/// Undoes the geometric part of `record` on a mask.
pub fn invert_mask(mask: &BinaryMask, record: &AugRecord) -> BinaryMask {
    let mut m = mask.clone();
    if record.rotate90 {
        m = map_mask(&m, Geo::RotCw);
    }
    if record.vertical_flip {
        m = map_mask(&m, Geo::VFlip);
    }
    if record.horizontal_flip {
        m = map_mask(&m, Geo::HFlip);
    }
    m
}

#[derive(Debug, Clone, Copy)]
enum Geo {
    HFlip,
    VFlip,
    /// Quarter turn counter-clockwise.
    RotCcw,
    RotCw,
}

impl Geo {
    /// Output dims and the source pixel for each output pixel.
    fn out_dims(self, h: usize, w: usize) -> (usize, usize) {
        match self {
            Geo::HFlip | Geo::VFlip => (h, w),
            Geo::RotCcw | Geo::RotCw => (w, h),
        }
    }

    fn source(self, h: usize, w: usize, y: usize, x: usize) -> (usize, usize) {
        match self {
            Geo::HFlip => (y, w - 1 - x),
            Geo::VFlip => (h - 1 - y, x),
            Geo::RotCcw => (x, w - 1 - y),
            Geo::RotCw => (h - 1 - x, y),
        }
    }
}

fn map_mask(mask: &BinaryMask, op: Geo) -> BinaryMask {
    let (h, w) = (mask.height(), mask.width());
    let (oh, ow) = op.out_dims(h, w);
    let mut data = Vec::with_capacity(oh * ow);
    for y in 0..oh {
        for x in 0..ow {
            let (sy, sx) = op.source(h, w, y, x);
            data.push(mask.get(sy, sx));
        }
    }
    BinaryMask::new(oh, ow, data).expect("permuted mask stays binary")
}

fn map_image(image: &Image, op: Geo) -> Image {
    let (h, w) = (image.height(), image.width());
    let (oh, ow) = op.out_dims(h, w);
    let mut pixels = Vec::with_capacity(oh * ow * 3);
    for y in 0..oh {
        for x in 0..ow {
            let (sy, sx) = op.source(h, w, y, x);
            pixels.extend_from_slice(&image.pixel(sy, sx));
        }
    }
    Image::new(oh, ow, pixels).expect("permuted image keeps its range")
}

fn adjust_brightness(image: &Image, factor: f32) -> Image {
    let pixels = image
        .pixels()
        .iter()
        .map(|&v| (v * factor).clamp(0.0, 1.0))
        .collect();
    Image::new(image.height(), image.width(), pixels).expect("clipped to [0, 1]")
}

fn shift_hue(image: &Image, degrees: f32) -> Image {
    let mut pixels = Vec::with_capacity(image.pixels().len());
    for rgb in image.pixels().chunks_exact(3) {
        let (h, s, v) = rgb_to_hsv([rgb[0], rgb[1], rgb[2]]);
        let h = wrap(h + degrees / 360.0, 1.0);
        let out = hsv_to_rgb(h, s, v);
        pixels.extend(out.iter().map(|c| c.clamp(0.0, 1.0)));
    }
    Image::new(image.height(), image.width(), pixels).expect("hsv round trip stays in range")
}

/// Hue in `[0, 1)`, saturation and value in `[0, 1]`.
/// `x` reduced into `[0, m)`.
fn wrap(x: f32, m: f32) -> f32 {
    let r = x - m * libm::floorf(x / m);
    if r >= m {
        0.0
    } else {
        r
    }
}

pub fn rgb_to_hsv([r, g, b]: [f32; 3]) -> (f32, f32, f32) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let d = max - min;
    let h = if d == 0.0 {
        0.0
    } else if max == r {
        wrap((g - b) / d, 6.0) / 6.0
    } else if max == g {
        ((b - r) / d + 2.0) / 6.0
    } else {
        ((r - g) / d + 4.0) / 6.0
    };
    let s = if max == 0.0 { 0.0 } else { d / max };
    (h, s, max)
}

pub fn hsv_to_rgb(h: f32, s: f32, v: f32) -> [f32; 3] {
    let h6 = wrap(h, 1.0) * 6.0;
    let i = (h6 as usize).min(5);
    let f = h6 - i as f32;
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match i {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}
