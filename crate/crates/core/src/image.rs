//! Row-major interleaved float images and boolean masks.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};

/// `height x width x channels`, row-major, channels interleaved.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<f64>) -> Self {
        assert_eq!(
            data.len(),
            width * height * channels,
            "image data length mismatch"
        );
        Self {
            width,
            height,
            channels,
            data,
        }
    }

    pub fn filled(width: usize, height: usize, value: &[f64]) -> Self {
        let mut data = Vec::with_capacity(width * height * value.len());
        for _ in 0..width * height {
            data.extend_from_slice(value);
        }
        Self::new(width, height, value.len(), data)
    }

    pub fn is_empty(&self) -> bool {
        self.width == 0 || self.height == 0
    }

    pub fn pixel(&self, x: usize, y: usize) -> &[f64] {
        let i = (y * self.width + x) * self.channels;
        &self.data[i..i + self.channels]
    }

    pub fn pixel_mut(&mut self, x: usize, y: usize) -> &mut [f64] {
        let i = (y * self.width + x) * self.channels;
        &mut self.data[i..i + self.channels]
    }

    pub fn same_shape(&self, other: &Image) -> bool {
        self.width == other.width && self.height == other.height && self.channels == other.channels
    }

    pub fn clamp01(&mut self) {
        for v in &mut self.data {
            *v = v.clamp(0.0, 1.0);
        }
    }

    /// Largest centered square crop.
    pub fn center_crop_square(&self) -> Image {
        let side = self.width.min(self.height);
        let x0 = (self.width - side) / 2;
        let y0 = (self.height - side) / 2;
        self.crop(x0, y0, side, side)
    }

    pub fn crop(&self, x0: usize, y0: usize, width: usize, height: usize) -> Image {
        let c = self.channels;
        let mut data = Vec::with_capacity(width * height * c);
        for y in y0..y0 + height {
            let start = (y * self.width + x0) * c;
            data.extend_from_slice(&self.data[start..start + width * c]);
        }
        Image::new(width, height, c, data)
    }

    /// Bilinear resampling with pixel centers at half-integers and edge clamping.
    pub fn resize_bilinear(&self, width: usize, height: usize) -> Image {
        if width == self.width && height == self.height {
            return self.clone();
        }
        let c = self.channels;
        let mut out = vec![0.0; width * height * c];
        let sx = self.width as f64 / width as f64;
        let sy = self.height as f64 / height as f64;
        for y in 0..height {
            let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, (self.height - 1) as f64);
            let y0 = libm::floor(fy) as usize;
            let y1 = (y0 + 1).min(self.height - 1);
            let ty = fy - y0 as f64;
            for x in 0..width {
                let fx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, (self.width - 1) as f64);
                let x0 = libm::floor(fx) as usize;
                let x1 = (x0 + 1).min(self.width - 1);
                let tx = fx - x0 as f64;
                for k in 0..c {
                    let a = self.pixel(x0, y0)[k] * (1.0 - tx) + self.pixel(x1, y0)[k] * tx;
                    let b = self.pixel(x0, y1)[k] * (1.0 - tx) + self.pixel(x1, y1)[k] * tx;
                    out[(y * width + x) * c + k] = a * (1.0 - ty) + b * ty;
                }
            }
        }
        Image::new(width, height, c, out)
    }
}

/// Boolean per-pixel mask, `true` = foreground.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mask {
    pub width: usize,
    pub height: usize,
    pub data: Vec<bool>,
}

impl Mask {
    pub fn new(width: usize, height: usize, data: Vec<bool>) -> Self {
        assert_eq!(data.len(), width * height, "mask data length mismatch");
        Self {
            width,
            height,
            data,
        }
    }

    pub fn filled(width: usize, height: usize, value: bool) -> Self {
        Self::new(width, height, vec![value; width * height])
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, v: bool) {
        self.data[y * self.width + x] = v;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn crop(&self, x0: usize, y0: usize, width: usize, height: usize) -> Mask {
        let mut data = Vec::with_capacity(width * height);
        for y in y0..y0 + height {
            let s = y * self.width + x0;
            data.extend_from_slice(&self.data[s..s + width]);
        }
        Mask::new(width, height, data)
    }

    /// Nearest-neighbour resampling.
    pub fn resize_nearest(&self, width: usize, height: usize) -> Mask {
        if width == self.width && height == self.height {
            return self.clone();
        }
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            let sy = ((y * 2 + 1) * self.height / (2 * height)).min(self.height - 1);
            for x in 0..width {
                let sx = ((x * 2 + 1) * self.width / (2 * width)).min(self.width - 1);
                data.push(self.get(sx, sy));
            }
        }
        Mask::new(width, height, data)
    }

    /// Mask from an alpha map: foreground where alpha > threshold.
    pub fn from_alpha(width: usize, height: usize, alpha: &[f64], threshold: f64) -> Mask {
        Mask::new(
            width,
            height,
            alpha.iter().map(|&a| a > threshold).collect(),
        )
    }
}

pub(crate) fn check_same_shape(a: &Image, b: &Image) -> Result<()> {
    if !a.same_shape(b) {
        bail!(
            InvalidArgument,
            "image shape mismatch: {}x{}x{} vs {}x{}x{}",
            a.width,
            a.height,
            a.channels,
            b.width,
            b.height,
            b.channels
        );
    }
    Ok(())
}
