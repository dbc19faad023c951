//! Images, binary masks and feature maps.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::real::Real;

/// RGB image with interleaved `H x W x 3` pixels in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    pixels: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize, pixels: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Shape(format!(
                "image must be non-empty, got {height}x{width}"
            )));
        }
        if pixels.len() != height * width * 3 {
            return Err(Error::Shape(format!(
                "{height}x{width} RGB image needs {} values, got {}",
                height * width * 3,
                pixels.len()
            )));
        }
        if let Some(v) = pixels.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Config(format!("pixel value {v} outside [0, 1]")));
        }
        Ok(Image {
            height,
            width,
            pixels,
        })
    }

    pub fn filled(height: usize, width: usize, rgb: [f32; 3]) -> Self {
        let mut pixels = Vec::with_capacity(height * width * 3);
        for _ in 0..height * width {
            pixels.extend_from_slice(&rgb);
        }
        Image {
            height,
            width,
            pixels,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f32; 3] {
        let i = (y * self.width + x) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    pub fn set_pixel(&mut self, y: usize, x: usize, rgb: [f32; 3]) {
        let i = (y * self.width + x) * 3;
        for (c, v) in rgb.iter().enumerate() {
            self.pixels[i + c] = v.clamp(0.0, 1.0);
        }
    }

    /// Planar `[3, H, W]` copy in the engine's scalar type.
    pub fn to_chw<F: Real>(&self) -> Vec<F> {
        let n = self.height * self.width;
        let mut out = vec![F::zero(); 3 * n];
        for p in 0..n {
            for c in 0..3 {
                out[c * n + p] = F::of(self.pixels[p * 3 + c] as f64);
            }
        }
        out
    }

    /// Bilinear resize with half-pixel centres.
    pub fn resize(&self, height: usize, width: usize) -> Image {
        if height == self.height && width == self.width {
            return self.clone();
        }
        let mut pixels = vec![0.0f32; height * width * 3];
        for c in 0..3 {
            let plane: Vec<f32> = (0..self.height * self.width)
                .map(|p| self.pixels[p * 3 + c])
                .collect();
            let out = bilinear(&plane, self.height, self.width, height, width);
            for (p, v) in out.into_iter().enumerate() {
                pixels[p * 3 + c] = v.clamp(0.0, 1.0);
            }
        }
        Image {
            height,
            width,
            pixels,
        }
    }
}

/// `H x W` mask with values in `{0, 1}`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width || height == 0 || width == 0 {
            return Err(Error::Shape(format!(
                "{height}x{width} mask needs {} values, got {}",
                height * width,
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|&&v| v > 1) {
            return Err(Error::Config(format!("mask value {v} is not binary")));
        }
        Ok(BinaryMask {
            height,
            width,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        BinaryMask {
            height,
            width,
            data: vec![0; height * width],
        }
    }

    pub fn ones(height: usize, width: usize) -> Self {
        BinaryMask {
            height,
            width,
            data: vec![1; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, v: bool) {
        self.data[y * self.width + x] = v as u8;
    }

    pub fn count(&self) -> usize {
        self.data.iter().map(|&v| v as usize).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.data.iter().all(|&v| v == 0)
    }

    pub fn complement(&self) -> BinaryMask {
        BinaryMask {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| 1 - v).collect(),
        }
    }

    pub fn to_weights<F: Real>(&self) -> Vec<F> {
        self.data
            .iter()
            .map(|&v| if v == 1 { F::one() } else { F::zero() })
            .collect()
    }

    /// Bilinear resize followed by a `>= 0.5` threshold. Used to bring
    /// annotation masks to feature resolution.
    pub fn resize_bilinear(&self, height: usize, width: usize) -> BinaryMask {
        if height == self.height && width == self.width {
            return self.clone();
        }
        let plane: Vec<f32> = self.data.iter().map(|&v| v as f32).collect();
        let out = bilinear(&plane, self.height, self.width, height, width);
        BinaryMask {
            height,
            width,
            data: out.into_iter().map(|v| (v >= 0.5) as u8).collect(),
        }
    }

    /// Nearest-neighbour resize, used when loading masks at input size.
    pub fn resize_nearest(&self, height: usize, width: usize) -> BinaryMask {
        if height == self.height && width == self.width {
            return self.clone();
        }
        let mut data = vec![0u8; height * width];
        for y in 0..height {
            let sy = ((2 * y + 1) * self.height / (2 * height)).min(self.height - 1);
            for x in 0..width {
                let sx = ((2 * x + 1) * self.width / (2 * width)).min(self.width - 1);
                data[y * width + x] = self.data[sy * self.width + sx];
            }
        }
        BinaryMask {
            height,
            width,
            data,
        }
    }
}

/// `C x H x W` feature tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap<F> {
    channels: usize,
    height: usize,
    width: usize,
    values: Vec<F>,
}

impl<F: Real> FeatureMap<F> {
    pub fn new(channels: usize, height: usize, width: usize, values: Vec<F>) -> Result<Self> {
        if values.len() != channels * height * width || channels == 0 || height == 0 || width == 0 {
            return Err(Error::Shape(format!(
                "{channels}x{height}x{width} feature map needs {} values, got {}",
                channels * height * width,
                values.len()
            )));
        }
        Ok(FeatureMap {
            channels,
            height,
            width,
            values,
        })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[F] {
        &self.values
    }

    pub fn shape(&self) -> [usize; 3] {
        [self.channels, self.height, self.width]
    }

    /// Feature vector of one pixel.
    pub fn column(&self, y: usize, x: usize) -> Vec<F> {
        let n = self.height * self.width;
        let p = y * self.width + x;
        (0..self.channels).map(|c| self.values[c * n + p]).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

/// Bilinear interpolation of a single plane, half-pixel centre convention
/// with edge clamping.
pub fn bilinear(src: &[f32], sh: usize, sw: usize, dh: usize, dw: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; dh * dw];
    let sy_scale = sh as f64 / dh as f64;
    let sx_scale = sw as f64 / dw as f64;
    for y in 0..dh {
        let fy = ((y as f64 + 0.5) * sy_scale - 0.5).max(0.0);
        let y0 = (fy as usize).min(sh - 1);
        let y1 = (y0 + 1).min(sh - 1);
        let wy = (fy - y0 as f64).clamp(0.0, 1.0);
        for x in 0..dw {
            let fx = ((x as f64 + 0.5) * sx_scale - 0.5).max(0.0);
            let x0 = (fx as usize).min(sw - 1);
            let x1 = (x0 + 1).min(sw - 1);
            let wx = (fx - x0 as f64).clamp(0.0, 1.0);
            let a = src[y0 * sw + x0] as f64;
            let b = src[y0 * sw + x1] as f64;
            let c = src[y1 * sw + x0] as f64;
            let d = src[y1 * sw + x1] as f64;
            let top = a + (b - a) * wx;
            let bot = c + (d - c) * wx;
            out[y * dw + x] = (top + (bot - top) * wy) as f32;
        }
    }
    out
}
