//! Editing encoder: a patch transformer over one-hot segmentation maps with a
//! global style vector appended as one extra token.

use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{bail, Result};
use crate::image::Image;
use crate::lift_encoder::{TaskEncoder, TaskEncoderConfig};
use crate::nn::{init_tensor, Init, Linear, ParamId, ParamStore};
use crate::preprocess::AlignedImage;
use crate::rng::{fnv1a, Rng};
use crate::tensor::Tensor;

pub const NUM_CLASSES: usize = 19;
pub const STYLE_DIM: usize = 128;

/// Face-parsing classes: `(name, display RGB)`, indexed by class id.
pub const PALETTE: [(&str, [u8; 3]); NUM_CLASSES] = [
    ("background", [0, 0, 0]),
    ("skin", [204, 0, 0]),
    ("l_brow", [76, 153, 0]),
    ("r_brow", [204, 204, 0]),
    ("l_eye", [51, 51, 255]),
    ("r_eye", [204, 0, 204]),
    ("eye_g", [0, 255, 255]),
    ("l_ear", [255, 204, 204]),
    ("r_ear", [102, 51, 0]),
    ("ear_r", [255, 0, 0]),
    ("nose", [102, 204, 0]),
    ("mouth", [255, 255, 0]),
    ("u_lip", [0, 0, 153]),
    ("l_lip", [0, 0, 204]),
    ("neck", [255, 51, 153]),
    ("neck_l", [0, 204, 204]),
    ("cloth", [0, 51, 0]),
    ("hair", [255, 153, 51]),
    ("hat", [0, 204, 0]),
];

pub mod class {
    pub const BACKGROUND: u8 = 0;
    pub const SKIN: u8 = 1;
    pub const L_BROW: u8 = 2;
    pub const R_BROW: u8 = 3;
    pub const L_EYE: u8 = 4;
    pub const R_EYE: u8 = 5;
    pub const NOSE: u8 = 10;
    pub const MOUTH: u8 = 11;
    pub const U_LIP: u8 = 12;
    pub const L_LIP: u8 = 13;
    pub const NECK: u8 = 14;
    pub const HAIR: u8 = 17;
}

/// Square map of class indices, row-major.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentationMap {
    pub size: usize,
    pub classes: Vec<u8>,
}

impl SegmentationMap {
    pub fn new(size: usize, classes: Vec<u8>) -> Result<Self> {
        let m = Self { size, classes };
        m.validate()?;
        Ok(m)
    }

    pub fn filled(size: usize, class: u8) -> Self {
        Self {
            size,
            classes: alloc::vec![class; size * size],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes.len() != self.size * self.size {
            bail!(
                InvalidArgument,
                "segmentation map has {} entries for size {}",
                self.classes.len(),
                self.size
            );
        }
        if let Some(&c) = self.classes.iter().find(|&&c| c as usize >= NUM_CLASSES) {
            bail!(InvalidArgument, "class index {c} out of range");
        }
        Ok(())
    }

    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.classes[y * self.size + x]
    }

    /// One-hot patch rows of width `p*p*19`, every patch in row-major order.
    pub fn one_hot_patches(&self, patch_size: usize) -> Tensor {
        let grid = self.size / patch_size;
        let width = patch_size * patch_size * NUM_CLASSES;
        let mut t = Tensor::zeros(grid * grid, width);
        for r in 0..grid {
            for c in 0..grid {
                let row = t.row_mut(r * grid + c);
                for dy in 0..patch_size {
                    for dx in 0..patch_size {
                        let class = self.get(c * patch_size + dx, r * patch_size + dy) as usize;
                        row[(dy * patch_size + dx) * NUM_CLASSES + class] = 1.0;
                    }
                }
            }
        }
        t
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StyleSource {
    Image,
    Text,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StyleEmbedding {
    pub vector: Vec<f64>,
    pub source: StyleSource,
    pub descriptor: String,
}

pub enum StyleInput<'a> {
    Image { image: &'a Image, id: &'a str },
    Text(&'a str),
}

/// Frozen joint image/text embedder.
pub trait StyleEmbedder: Send + Sync {
    fn dim(&self) -> usize;
    fn embed_image(&self, image: &Image) -> Result<Vec<f64>>;
    fn embed_text(&self, _text: &str) -> Result<Vec<f64>> {
        bail!(Config, "style embedder has no text tower")
    }
}

pub fn embed_style(input: StyleInput<'_>, embedder: &dyn StyleEmbedder) -> Result<StyleEmbedding> {
    let (raw, source, descriptor) = match input {
        StyleInput::Image { image, id } => {
            (embedder.embed_image(image)?, StyleSource::Image, id.into())
        }
        StyleInput::Text(t) => (embedder.embed_text(t)?, StyleSource::Text, t.into()),
    };
    let norm = libm::sqrt(raw.iter().map(|v| v * v).sum::<f64>());
    if !(norm > 0.0) || !norm.is_finite() {
        bail!(
            InvariantViolation,
            "style embedder returned a zero or non-finite vector"
        );
    }
    Ok(StyleEmbedding {
        vector: raw.iter().map(|v| v / norm).collect(),
        source,
        descriptor,
    })
}

/// Dependency-free embedder: image statistics and hashed text tokens, each
/// mapped through fixed random projections into a shared space.
pub struct BuiltinStyleEmbedder {
    projection: Tensor,
    seed: u64,
}

const IMAGE_STATS: usize = 3 + 3 + 48 + 1;

impl BuiltinStyleEmbedder {
    pub fn new(seed: u64) -> Self {
        let mut rng = Rng::derived(seed, "style.image");
        let projection = init_tensor(IMAGE_STATS, STYLE_DIM, Init::Normal(1.0), &mut rng);
        Self { projection, seed }
    }

    fn image_stats(image: &Image) -> Vec<f64> {
        let c = image.channels.min(3);
        let n = (image.width * image.height) as f64;
        let mut mean = [0.0; 3];
        let mut sq = [0.0; 3];
        let mut grid = [[0.0; 3]; 16];
        let mut counts = [0.0; 16];
        for y in 0..image.height {
            for x in 0..image.width {
                let p = image.pixel(x, y);
                let cell = (y * 4 / image.height) * 4 + x * 4 / image.width;
                counts[cell] += 1.0;
                for k in 0..c {
                    mean[k] += p[k];
                    sq[k] += p[k] * p[k];
                    grid[cell][k] += p[k];
                }
            }
        }
        let mut out = Vec::with_capacity(IMAGE_STATS);
        for k in 0..3 {
            let m = mean[k] / n;
            out.push(m - 0.5);
            out.push(libm::sqrt((sq[k] / n - m * m).max(0.0)));
        }
        for (cell, count) in grid.iter().zip(counts) {
            for v in cell {
                out.push(if count > 0.0 { v / count - 0.5 } else { 0.0 });
            }
        }
        out.push(1.0);
        out
    }
}

impl StyleEmbedder for BuiltinStyleEmbedder {
    fn dim(&self) -> usize {
        STYLE_DIM
    }

    fn embed_image(&self, image: &Image) -> Result<Vec<f64>> {
        if image.is_empty() || image.channels < 3 {
            bail!(InvalidArgument, "style image must be a nonempty RGB image");
        }
        let stats = Tensor::from_vec(1, IMAGE_STATS, Self::image_stats(image));
        Ok(stats.matmul(&self.projection).data)
    }

    fn embed_text(&self, text: &str) -> Result<Vec<f64>> {
        let mut acc = alloc::vec![0.0; STYLE_DIM];
        let lowered = text.to_lowercase();
        let mut tokens: Vec<&str> = lowered
            .split(|c: char| !c.is_alphanumeric())
            .filter(|t| !t.is_empty())
            .collect();
        if tokens.is_empty() {
            tokens.push("");
        }
        for tok in tokens {
            let mut rng = Rng::derived(self.seed ^ fnv1a(tok.as_bytes()), "style.text");
            for v in &mut acc {
                *v += rng.normal();
            }
        }
        Ok(acc)
    }
}

/// Produces segmentation maps from aligned images.
pub trait Segmenter: Send + Sync {
    fn segment(&self, aligned: &AlignedImage) -> Result<SegmentationMap>;
    /// True for heuristic stand-ins that do not parse faces.
    fn is_stub(&self) -> bool;
}

/// Heuristic segmenter: foreground is skin, its top 30% is hair.
pub struct StubSegmenter;

impl Segmenter for StubSegmenter {
    fn segment(&self, aligned: &AlignedImage) -> Result<SegmentationMap> {
        let s = aligned.size();
        let rows: Vec<usize> = (0..s)
            .filter(|&y| (0..s).any(|x| aligned.mask.get(x, y)))
            .collect();
        let mut classes = alloc::vec![class::BACKGROUND; s * s];
        if let (Some(&top), Some(&bottom)) = (rows.first(), rows.last()) {
            let hair_end = top + (bottom - top + 1) * 3 / 10;
            for y in 0..s {
                for x in 0..s {
                    if aligned.mask.get(x, y) {
                        classes[y * s + x] = if y < hair_end {
                            class::HAIR
                        } else {
                            class::SKIN
                        };
                    }
                }
            }
        }
        SegmentationMap::new(s, classes)
    }

    fn is_stub(&self) -> bool {
        true
    }
}

pub const EDIT_PREFIX: &str = "edit";

/// Segmentation + style encoder producing decoder-width tokens directly.
#[derive(Clone, Debug)]
pub struct EditEncoder {
    pub seg: TaskEncoder,
    style_proj: Linear,
    style_position: ParamId,
    pub width: usize,
}

impl EditEncoder {
    /// `cfg.width` is ignored; the encoder runs at the decoder width.
    pub fn new(
        store: &mut ParamStore,
        cfg: &TaskEncoderConfig,
        patch_size: usize,
        grid: usize,
        width: usize,
        rng: &mut Rng,
    ) -> Self {
        let cfg = TaskEncoderConfig {
            width,
            ..cfg.clone()
        };
        let seg = TaskEncoder::new(store, "edit.seg", &cfg, NUM_CLASSES, patch_size, grid, rng);
        let style_proj = Linear::new(store, "edit.style", STYLE_DIM, width, Init::FanIn(1.0), rng);
        let style_position = store.add(
            "edit.style_position",
            init_tensor(1, width, Init::Normal(0.02), rng),
        );
        Self {
            seg,
            style_proj,
            style_position,
            width,
        }
    }

    fn check(&self, seg: &SegmentationMap, style: &StyleEmbedding) -> Result<()> {
        seg.validate()?;
        if seg.size != self.seg.grid * self.seg.patch_size {
            bail!(
                InvalidArgument,
                "segmentation map is {} pixels, expected {}",
                seg.size,
                self.seg.grid * self.seg.patch_size
            );
        }
        if style.vector.len() != STYLE_DIM {
            bail!(
                InvalidArgument,
                "style vector has {} entries, expected {STYLE_DIM}",
                style.vector.len()
            );
        }
        Ok(())
    }

    /// Token sequence entering the first block: segmentation tokens then
    /// the style token.
    pub fn input_tokens(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        seg: &SegmentationMap,
        style: &StyleEmbedding,
    ) -> Result<Var> {
        self.check(seg, style)?;
        let (rows, coords) = self.seg_rows(g, seg);
        let x = self.seg_embed(g, store, rows, &coords);
        let s = self.style_token(g, store, style);
        Ok(g.concat_rows(&[x, s]))
    }

    fn seg_rows(&self, g: &mut Graph, seg: &SegmentationMap) -> (Var, Vec<(u32, u32)>) {
        let rows = g.constant(seg.one_hot_patches(self.seg.patch_size));
        let grid = self.seg.grid as u32;
        let coords = (0..grid)
            .flat_map(|r| (0..grid).map(move |c| (r, c)))
            .collect();
        (rows, coords)
    }

    fn seg_embed(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        rows: Var,
        coords: &[(u32, u32)],
    ) -> Var {
        self.seg.embed_rows(g, store, rows, coords)
    }

    fn style_token(&self, g: &mut Graph, store: &ParamStore, style: &StyleEmbedding) -> Var {
        let v = g.constant(Tensor::from_vec(1, STYLE_DIM, style.vector.clone()));
        let t = self.style_proj.forward(g, store, v);
        let pos = g.param(store, self.style_position);
        g.add(t, pos)
    }

    /// `(grid² + 1) x width` tokens; the style token is last.
    pub fn encode(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        seg: &SegmentationMap,
        style: &StyleEmbedding,
    ) -> Result<Var> {
        self.check(seg, style)?;
        let (rows, coords) = self.seg_rows(g, seg);
        let s = self.style_token(g, store, style);
        Ok(self.seg.forward_rows(g, store, rows, &coords, Some(s)))
    }
}
