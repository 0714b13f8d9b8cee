//! Dual-branch 2D encoder: frozen multi-layer backbone features and a
//! trainable patch transformer, fused per patch into decoder-width tokens.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::backbone::FeatureBackbone;
use crate::error::{bail, Result};
use crate::nn::{EncoderBlock, Init, LayerNorm, Linear, Mlp, ParamStore};
use crate::preprocess::{patch_rows, AlignedImage, PatchSet};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Lift,
    Edit,
}

/// Token sequence the decoder cross-attends to.
///
/// For edit provenance the final token is the style token and has no entry in
/// `patch_coords`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureTokens {
    pub tokens: Tensor,
    pub patch_coords: Vec<(u32, u32)>,
    pub provenance: Provenance,
}

impl FeatureTokens {
    pub fn validate(&self) -> Result<()> {
        let extra = match self.provenance {
            Provenance::Lift => 0,
            Provenance::Edit => 1,
        };
        if self.tokens.rows != self.patch_coords.len() + extra {
            bail!(
                InvariantViolation,
                "{} tokens for {} patch coordinates",
                self.tokens.rows,
                self.patch_coords.len()
            );
        }
        if !self.tokens.is_finite() {
            bail!(
                InvariantViolation,
                "feature tokens contain non-finite values"
            );
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskEncoderConfig {
    pub width: usize,
    pub blocks: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
}

impl Default for TaskEncoderConfig {
    fn default() -> Self {
        Self {
            width: 256,
            blocks: 4,
            heads: 4,
            mlp_ratio: 4,
        }
    }
}

/// Trainable ViT over kept patches with coordinate-keyed positions.
#[derive(Clone, Debug)]
pub struct TaskEncoder {
    pub patch_size: usize,
    pub grid: usize,
    embed: Linear,
    positions: crate::nn::ParamId,
    blocks: Vec<EncoderBlock>,
    norm: LayerNorm,
}

impl TaskEncoder {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        cfg: &TaskEncoderConfig,
        in_channels: usize,
        patch_size: usize,
        grid: usize,
        rng: &mut Rng,
    ) -> Self {
        let p = |s: &str| alloc::format!("{prefix}.{s}");
        let embed = Linear::new(
            store,
            &p("embed"),
            patch_size * patch_size * in_channels,
            cfg.width,
            Init::FanIn(1.0),
            rng,
        );
        let positions = store.add(
            &p("positions"),
            crate::nn::init_tensor(grid * grid, cfg.width, Init::Normal(0.02), rng),
        );
        let blocks = (0..cfg.blocks)
            .map(|i| {
                EncoderBlock::new(
                    store,
                    &p(&alloc::format!("block{i}")),
                    cfg.width,
                    cfg.heads,
                    cfg.mlp_ratio,
                    Init::FanIn(0.5),
                    rng,
                )
            })
            .collect();
        let norm = LayerNorm::new(store, &p("norm"), cfg.width);
        Self {
            patch_size,
            grid,
            embed,
            positions,
            blocks,
            norm,
        }
    }

    /// Patch embedding plus coordinate-keyed position embedding.
    pub fn embed_rows(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        rows: Var,
        coords: &[(u32, u32)],
    ) -> Var {
        let x = self.embed.forward(g, store, rows);
        let pos = g.param(store, self.positions);
        let lin: Vec<usize> = coords
            .iter()
            .map(|&(r, c)| r as usize * self.grid + c as usize)
            .collect();
        let pos = g.select_rows(pos, &lin);
        g.add(x, pos)
    }

    /// Embed pre-flattened patch rows at the given grid coordinates, then
    /// append `extra` tokens (already at width) before the transformer blocks.
    pub fn forward_rows(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        rows: Var,
        coords: &[(u32, u32)],
        extra: Option<Var>,
    ) -> Var {
        let mut x = self.embed_rows(g, store, rows, coords);
        if let Some(e) = extra {
            x = g.concat_rows(&[x, e]);
        }
        for b in &self.blocks {
            x = b.forward(g, store, x);
        }
        self.norm.forward(g, store, x)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LiftEncoderConfig {
    pub task: TaskEncoderConfig,
    /// Hidden width of the fusion MLP.
    pub fuse_hidden: usize,
}

impl Default for LiftEncoderConfig {
    fn default() -> Self {
        Self {
            task: TaskEncoderConfig::default(),
            fuse_hidden: 256,
        }
    }
}

#[derive(Clone, Debug)]
pub struct LiftEncoder {
    pub task: TaskEncoder,
    pub fuse: Mlp,
    pub frozen_width: usize,
    pub width: usize,
}

pub const LIFT_PREFIX: &str = "lift";

impl LiftEncoder {
    /// `frozen_width` is `taps * feature_dim` of the frozen branch; `width`
    /// the decoder width `D`.
    pub fn new(
        store: &mut ParamStore,
        cfg: &LiftEncoderConfig,
        patch_size: usize,
        grid: usize,
        frozen_width: usize,
        width: usize,
        rng: &mut Rng,
    ) -> Self {
        let task = TaskEncoder::new(store, "lift.task", &cfg.task, 3, patch_size, grid, rng);
        let fuse = Mlp::new(
            store,
            "lift.fuse",
            (cfg.task.width + frozen_width, cfg.fuse_hidden, width),
            Init::FanIn(1.0),
            rng,
        );
        Self {
            task,
            fuse,
            frozen_width,
            width,
        }
    }

    /// Task-branch tokens for the kept patches only.
    pub fn encode_task(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        aligned: &AlignedImage,
        patches: &PatchSet,
    ) -> Result<Var> {
        if patches.is_empty() {
            bail!(EmptyInput, "no foreground patches in {}", aligned.source_id);
        }
        if patches.patch_size != self.task.patch_size || patches.grid != self.task.grid {
            bail!(
                InvalidArgument,
                "patch layout {}x{} (size {}) does not match the encoder's {}x{} (size {})",
                patches.grid,
                patches.grid,
                patches.patch_size,
                self.task.grid,
                self.task.grid,
                self.task.patch_size
            );
        }
        let rows = patch_rows(&aligned.pixels, patches.patch_size, &patches.kept);
        let rows = normalize_pixels(rows);
        let rows = g.constant(rows);
        Ok(self.task.forward_rows(g, store, rows, &patches.kept, None))
    }

    /// Concatenate both branches per patch and project to decoder width.
    pub fn fuse(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        f_enc: Var,
        enc_coords: &[(u32, u32)],
        f_frozen: Var,
        frozen_coords: &[(u32, u32)],
    ) -> Result<Var> {
        if enc_coords != frozen_coords {
            bail!(
                InvariantViolation,
                "task and frozen branch patch coordinates differ"
            );
        }
        if g.shape(f_enc).0 != enc_coords.len() || g.shape(f_frozen).0 != frozen_coords.len() {
            bail!(
                InvariantViolation,
                "token count does not match patch coordinates"
            );
        }
        let x = g.concat_cols(&[f_enc, f_frozen]);
        Ok(self.fuse.forward(g, store, x))
    }

    /// Full lift encoding given precomputed frozen features.
    pub fn encode(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        aligned: &AlignedImage,
        patches: &PatchSet,
        frozen: &Tensor,
    ) -> Result<Var> {
        let enc = self.encode_task(g, store, aligned, patches)?;
        let frozen = g.constant(frozen.clone());
        self.fuse(g, store, enc, &patches.kept, frozen, &patches.kept)
    }
}

/// Map `[0, 1]` pixels to roughly unit scale.
pub fn normalize_pixels(mut rows: Tensor) -> Tensor {
    for v in &mut rows.data {
        *v = (*v - 0.5) * 4.0;
    }
    rows
}

/// Frozen-branch features of the kept patches, taps concatenated per patch.
/// Runs outside any training graph, so no gradient can reach the backbone.
pub fn encode_frozen(
    backbone: &dyn FeatureBackbone,
    aligned: &AlignedImage,
    patches: &PatchSet,
    taps: &[usize],
) -> Result<Tensor> {
    if backbone.token_stride() != patches.patch_size {
        bail!(
            Config,
            "backbone {} emits {}-pixel tokens but patches are {} pixels",
            backbone.name(),
            backbone.token_stride(),
            patches.patch_size
        );
    }
    let layers = crate::backbone::features_of(backbone, &aligned.pixels, taps)?;
    let rows = patches.linear_indices();
    let per_layer: Vec<Tensor> = layers.iter().map(|t| t.select_rows(&rows)).collect();
    let width: usize = per_layer.iter().map(|t| t.cols).sum();
    let mut out = Tensor::zeros(rows.len(), width);
    for r in 0..rows.len() {
        let mut off = 0;
        for t in &per_layer {
            out.row_mut(r)[off..off + t.cols].copy_from_slice(t.row(r));
            off += t.cols;
        }
    }
    Ok(out)
}
