//! Front end: square alignment, background removal and foreground patch
//! selection.

use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
use crate::image::{Image, Mask};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PreprocessConfig {
    /// Output side length `S`.
    pub size: usize,
    /// Color written to background pixels.
    pub background: [f64; 3],
    /// Chroma key used when no mask is given.
    pub key: [f64; 3],
    /// Pixels within this Euclidean RGB distance of `key` are background.
    pub key_threshold: f64,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            size: 256,
            background: [1.0, 1.0, 1.0],
            key: [0.0, 1.0, 0.0],
            key_threshold: 0.25,
        }
    }
}

/// Square, background-free model input.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignedImage {
    pub pixels: Image,
    pub mask: Mask,
    pub source_id: String,
}

impl AlignedImage {
    pub fn size(&self) -> usize {
        self.pixels.width
    }
}

/// True where `pixel` matches the chroma key.
pub fn is_keyed(pixel: &[f64], key: [f64; 3], threshold: f64) -> bool {
    let d2: f64 = (0..3)
        .map(|k| (pixel[k] - key[k]) * (pixel[k] - key[k]))
        .sum();
    d2 <= threshold * threshold
}

pub fn chroma_key_mask(image: &Image, key: [f64; 3], threshold: f64) -> Mask {
    let data = image
        .data
        .chunks(image.channels)
        .map(|p| !is_keyed(p, key, threshold))
        .collect();
    Mask::new(image.width, image.height, data)
}

/// Center-crop to a square, resize to `S x S` and blank the background.
///
/// Without a mask the foreground is found by chroma keying the cropped
/// source before resizing; masks are resampled nearest-neighbour.
pub fn prepare(
    image: &Image,
    mask: Option<&Mask>,
    source_id: &str,
    cfg: &PreprocessConfig,
) -> Result<AlignedImage> {
    if image.is_empty() {
        bail!(InvalidArgument, "image is empty");
    }
    if image.channels != 3 {
        bail!(
            InvalidArgument,
            "image must have 3 channels, got {}",
            image.channels
        );
    }
    if cfg.size == 0 {
        bail!(InvalidArgument, "output size must be positive");
    }
    if let Some(m) = mask {
        if m.width != image.width || m.height != image.height {
            bail!(
                InvalidArgument,
                "mask is {}x{} but image is {}x{}",
                m.width,
                m.height,
                image.width,
                image.height
            );
        }
    }
    let side = image.width.min(image.height);
    let (x0, y0) = ((image.width - side) / 2, (image.height - side) / 2);
    let cropped = image.crop(x0, y0, side, side);
    let cropped_mask = match mask {
        Some(m) => m.crop(x0, y0, side, side),
        None => chroma_key_mask(&cropped, cfg.key, cfg.key_threshold),
    };
    let mut pixels = cropped.resize_bilinear(cfg.size, cfg.size);
    pixels.clamp01();
    let mask = cropped_mask.resize_nearest(cfg.size, cfg.size);
    for (p, &fg) in pixels.data.chunks_mut(3).zip(&mask.data) {
        if !fg {
            p.copy_from_slice(&cfg.background);
        }
    }
    Ok(AlignedImage {
        pixels,
        mask,
        source_id: source_id.into(),
    })
}

/// Foreground-only 2D patches of an aligned image.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchSet {
    pub patch_size: usize,
    /// Patches per side.
    pub grid: usize,
    /// Row-major sorted `(row, col)` of kept patches.
    pub kept: Vec<(u32, u32)>,
    pub total: usize,
}

impl PatchSet {
    /// Every patch of a `grid x grid` layout.
    pub fn full(grid: usize, patch_size: usize) -> Self {
        let kept = (0..grid as u32)
            .flat_map(|r| (0..grid as u32).map(move |c| (r, c)))
            .collect();
        Self {
            patch_size,
            grid,
            kept,
            total: grid * grid,
        }
    }

    pub fn len(&self) -> usize {
        self.kept.len()
    }

    pub fn is_empty(&self) -> bool {
        self.kept.is_empty()
    }

    /// Row-major linear index of each kept patch.
    pub fn linear_indices(&self) -> Vec<usize> {
        self.kept
            .iter()
            .map(|&(r, c)| r as usize * self.grid + c as usize)
            .collect()
    }
}

pub fn select_foreground_patches(aligned: &AlignedImage, patch_size: usize) -> Result<PatchSet> {
    let s = aligned.size();
    if patch_size == 0 || !s.is_multiple_of(patch_size) {
        bail!(
            InvalidArgument,
            "image size {s} is not divisible by patch size {patch_size}"
        );
    }
    let grid = s / patch_size;
    let mut kept = Vec::new();
    for r in 0..grid {
        for c in 0..grid {
            let any = (0..patch_size).any(|dy| {
                let row = (r * patch_size + dy) * s + c * patch_size;
                aligned.mask.data[row..row + patch_size].iter().any(|&b| b)
            });
            if any {
                kept.push((r as u32, c as u32));
            }
        }
    }
    Ok(PatchSet {
        patch_size,
        grid,
        kept,
        total: grid * grid,
    })
}

/// Flatten the listed patches of an image into rows of `p*p*channels`
/// values, pixels row-major within a patch.
pub fn patch_rows(image: &Image, patch_size: usize, kept: &[(u32, u32)]) -> Tensor {
    let c = image.channels;
    let width = patch_size * patch_size * c;
    let mut data = Vec::with_capacity(kept.len() * width);
    for &(r, col) in kept {
        for dy in 0..patch_size {
            let y = r as usize * patch_size + dy;
            let start = (y * image.width + col as usize * patch_size) * c;
            data.extend_from_slice(&image.data[start..start + patch_size * c]);
        }
    }
    Tensor::from_vec(kept.len(), width, data)
}

/// Gather indices that turn an `(h*w) x c` image node into patch rows
/// matching [`patch_rows`].
pub fn patch_gather_index(
    width: usize,
    channels: usize,
    patch_size: usize,
    kept: &[(u32, u32)],
) -> Vec<usize> {
    let mut index = Vec::with_capacity(kept.len() * patch_size * patch_size * channels);
    for &(r, col) in kept {
        for dy in 0..patch_size {
            let y = r as usize * patch_size + dy;
            let start = (y * width + col as usize * patch_size) * channels;
            index.extend(start..start + patch_size * channels);
        }
    }
    index
}
