//! PNG images and masks, class-index maps, float dumps, cameras and
//! template exports.

use std::fs;
use std::io::Cursor;
use std::path::Path;

use headlift_core::edit_encoder::{SegmentationMap, NUM_CLASSES, PALETTE};
use headlift_core::gaussian::{Camera, TemplatePointSet};
use headlift_core::image::{Image, Mask};
use image::{DynamicImage, GrayImage, ImageFormat, RgbImage};
use serde::{Deserialize, Serialize};

use crate::error::{format_err, Error, Result};

pub fn to_u8(v: f64) -> u8 {
    (255.0 * v.clamp(0.0, 1.0)).round() as u8
}

fn image_from_dynamic(img: &DynamicImage) -> (Image, Option<Mask>) {
    let rgba = img.to_rgba8();
    let (w, h) = (rgba.width() as usize, rgba.height() as usize);
    let mut data = Vec::with_capacity(w * h * 3);
    let mut alpha = Vec::with_capacity(w * h);
    for p in rgba.pixels() {
        data.extend(p.0[..3].iter().map(|&v| v as f64 / 255.0));
        alpha.push(p.0[3] as f64 / 255.0);
    }
    let mask = (img.color().has_alpha() && alpha.iter().any(|&a| a < 1.0))
        .then(|| Mask::from_alpha(w, h, &alpha, 0.5));
    (Image::new(w, h, 3, data), mask)
}

/// Decode an encoded image (any format the `image` crate reads with the
/// enabled features). A non-opaque alpha channel is returned as a mask.
pub fn decode_image(bytes: &[u8]) -> Result<(Image, Option<Mask>)> {
    let img =
        image::load_from_memory(bytes).map_err(|e| format_err!("cannot decode image: {e}"))?;
    Ok(image_from_dynamic(&img))
}

pub fn read_image(path: &Path) -> Result<(Image, Option<Mask>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let img = image::load_from_memory(&bytes).map_err(|source| Error::Image {
        path: path.into(),
        source,
    })?;
    Ok(image_from_dynamic(&img))
}

fn rgb_of(img: &Image) -> Result<RgbImage> {
    if img.channels != 3 {
        return Err(format_err!(
            "expected a 3-channel image, got {}",
            img.channels
        ));
    }
    let bytes = img.data.iter().map(|&v| to_u8(v)).collect();
    RgbImage::from_raw(img.width as u32, img.height as u32, bytes)
        .ok_or_else(|| format_err!("image buffer size mismatch"))
}

fn encode(img: DynamicImage) -> Result<Vec<u8>> {
    let mut out = Cursor::new(Vec::new());
    img.write_to(&mut out, ImageFormat::Png)
        .map_err(|e| format_err!("png encoding failed: {e}"))?;
    Ok(out.into_inner())
}

/// 8-bit RGB PNG, each channel `round(255 v)`.
pub fn encode_png(img: &Image) -> Result<Vec<u8>> {
    encode(DynamicImage::ImageRgb8(rgb_of(img)?))
}

pub fn write_png(path: &Path, img: &Image) -> Result<()> {
    write_bytes(path, &encode_png(img)?)
}

/// Single-channel PNG of per-pixel values in `[0, 1]` (alpha maps).
pub fn encode_gray_png(width: usize, height: usize, values: &[f64]) -> Result<Vec<u8>> {
    let bytes = values.iter().map(|&v| to_u8(v)).collect();
    let g = GrayImage::from_raw(width as u32, height as u32, bytes)
        .ok_or_else(|| format_err!("buffer size mismatch"))?;
    encode(DynamicImage::ImageLuma8(g))
}

fn gray_of(bytes: &[u8]) -> Result<GrayImage> {
    let img =
        image::load_from_memory(bytes).map_err(|e| format_err!("cannot decode image: {e}"))?;
    match img {
        DynamicImage::ImageLuma8(g) => Ok(g),
        other => Err(format_err!(
            "expected a single-channel 8-bit PNG, got {:?}",
            other.color()
        )),
    }
}

/// Mask PNG: 0 background, 255 foreground (any value >= 128 counts as foreground).
pub fn decode_mask(bytes: &[u8]) -> Result<Mask> {
    let g = gray_of(bytes)?;
    let data = g.pixels().map(|p| p.0[0] >= 128).collect();
    Ok(Mask::new(g.width() as usize, g.height() as usize, data))
}

pub fn read_mask(path: &Path) -> Result<Mask> {
    decode_mask(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

pub fn encode_mask(mask: &Mask) -> Result<Vec<u8>> {
    let values: Vec<f64> = mask
        .data
        .iter()
        .map(|&m| if m { 1.0 } else { 0.0 })
        .collect();
    encode_gray_png(mask.width, mask.height, &values)
}

/// Class-index PNG: one 8-bit channel holding the class of each pixel.
pub fn encode_seg_png(seg: &SegmentationMap) -> Result<Vec<u8>> {
    let g = GrayImage::from_raw(seg.size as u32, seg.size as u32, seg.classes.clone())
        .ok_or_else(|| format_err!("segmentation buffer size mismatch"))?;
    encode(DynamicImage::ImageLuma8(g))
}

pub fn decode_seg_png(bytes: &[u8]) -> Result<SegmentationMap> {
    let g = gray_of(bytes)?;
    if g.width() != g.height() {
        return Err(format_err!(
            "segmentation map must be square, got {}x{}",
            g.width(),
            g.height()
        ));
    }
    Ok(SegmentationMap::new(g.width() as usize, g.into_raw())?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PaletteEntry {
    pub index: u8,
    pub name: String,
    pub color: [u8; 3],
}

pub fn palette() -> Vec<PaletteEntry> {
    PALETTE
        .iter()
        .enumerate()
        .map(|(i, (name, color))| PaletteEntry {
            index: i as u8,
            name: (*name).into(),
            color: *color,
        })
        .collect()
}

const _: () = assert!(NUM_CLASSES <= 256);

/// `H x W x 3` little-endian `f32`, row-major, no header.
pub fn encode_f32_dump(img: &Image) -> Vec<u8> {
    img.data
        .iter()
        .flat_map(|&v| (v as f32).to_le_bytes())
        .collect()
}

pub fn decode_f32_dump(
    bytes: &[u8],
    width: usize,
    height: usize,
    channels: usize,
) -> Result<Image> {
    let n = width * height * channels;
    if bytes.len() != 4 * n {
        return Err(format_err!(
            "float dump has {} bytes, expected {}",
            bytes.len(),
            4 * n
        ));
    }
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    Ok(Image::new(width, height, channels, data))
}

/// Camera wire format.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraJson {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    /// World-to-camera rotation, row-major.
    #[serde(rename = "R")]
    pub r: [f64; 9],
    pub t: [f64; 3],
    pub near: f64,
    pub far: f64,
}

impl From<&Camera> for CameraJson {
    fn from(c: &Camera) -> Self {
        Self {
            fx: c.fx,
            fy: c.fy,
            cx: c.cx,
            cy: c.cy,
            width: c.width,
            height: c.height,
            r: c.rotation,
            t: c.translation,
            near: c.near,
            far: c.far,
        }
    }
}

impl CameraJson {
    pub fn to_camera(&self) -> Result<Camera> {
        let c = Camera {
            fx: self.fx,
            fy: self.fy,
            cx: self.cx,
            cy: self.cy,
            width: self.width,
            height: self.height,
            rotation: self.r,
            translation: self.t,
            near: self.near,
            far: self.far,
        };
        c.validate()?;
        Ok(c)
    }
}

/// Template as JSON: `vertices` flattened row-major, then `patch_index`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TemplateJson {
    pub num_vertices: usize,
    pub vertices: Vec<f64>,
    pub patch_index: Vec<u32>,
}

impl From<&TemplatePointSet> for TemplateJson {
    fn from(t: &TemplatePointSet) -> Self {
        Self {
            num_vertices: t.num_vertices(),
            vertices: t.vertices.iter().flatten().copied().collect(),
            patch_index: t.patch_index.clone(),
        }
    }
}

impl TemplateJson {
    pub fn to_template(&self) -> Result<TemplatePointSet> {
        let v = self.num_vertices;
        if self.vertices.len() != 3 * v || self.patch_index.len() != v {
            return Err(format_err!("template arrays do not match num_vertices {v}"));
        }
        let verts = self
            .vertices
            .chunks_exact(3)
            .map(|c| [c[0], c[1], c[2]])
            .collect();
        Ok(TemplatePointSet::from_parts(
            verts,
            self.patch_index.clone(),
        )?)
    }
}

/// Flat binary template: `V x 3` little-endian `f64` vertices row-major,
/// then `V` little-endian `u32` patch indices. `V` follows from the length.
pub fn encode_template_bin(t: &TemplatePointSet) -> Vec<u8> {
    let mut out = Vec::with_capacity(t.num_vertices() * 28);
    for v in &t.vertices {
        for c in v {
            out.extend_from_slice(&c.to_le_bytes());
        }
    }
    for p in &t.patch_index {
        out.extend_from_slice(&p.to_le_bytes());
    }
    out
}

pub fn decode_template_bin(bytes: &[u8]) -> Result<TemplatePointSet> {
    if !bytes.len().is_multiple_of(28) {
        return Err(format_err!(
            "template binary length {} is not a multiple of 28",
            bytes.len()
        ));
    }
    let v = bytes.len() / 28;
    let (vb, pb) = bytes.split_at(v * 24);
    let f = |c: &[u8]| f64::from_le_bytes(c.try_into().expect("8 bytes"));
    let verts = vb
        .chunks_exact(24)
        .map(|c| [f(&c[..8]), f(&c[8..16]), f(&c[16..])])
        .collect();
    let idx = pb
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    Ok(TemplatePointSet::from_parts(verts, idx)?)
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let s = serde_json::to_string_pretty(value)
        .map_err(|e| Error::json(path.display().to_string(), e))?;
    write_bytes(path, s.as_bytes())
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let s = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&s).map_err(|e| Error::json(path.display().to_string(), e))
}
