//! Template-anchored 3D decoder and Gaussian head.
//!
//! Each 3D patch of the template owns one latent token. Tokens are refined by
//! layers of the form `F + MLP(F + ATTN(F, F_2D))` where ATTN is cross-attention
//! into the 2D feature tokens. Tokens never attend to each other, so every
//! 3D patch is computed independently of the others.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{bail, Result};
use crate::gaussian::{GaussianCloud, TemplatePointSet, PATCH_MEMBERS};
use crate::nn::{
    init_tensor, Init, LayerNorm, Linear, Mlp, MultiHeadAttention, ParamId, ParamStore,
};
use crate::raster::GaussianVars;
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecoderConfig {
    pub layers: usize,
    pub heads: usize,
    pub width: usize,
    pub mlp_ratio: usize,
    /// Fourier frequencies per axis for the query positions.
    pub fourier_freqs: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            layers: 6,
            heads: 8,
            width: 256,
            mlp_ratio: 4,
            fourier_freqs: 6,
        }
    }
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.heads == 0 || !self.width.is_multiple_of(self.heads) {
            bail!(
                Config,
                "decoder width {} must be a positive multiple of heads {}",
                self.width,
                self.heads
            );
        }
        if !self.width.is_multiple_of(PATCH_MEMBERS) {
            bail!(
                Config,
                "decoder width {} must be divisible by {PATCH_MEMBERS}",
                self.width
            );
        }
        if self.mlp_ratio == 0 || self.fourier_freqs == 0 {
            bail!(
                Config,
                "decoder mlp_ratio and fourier_freqs must be positive"
            );
        }
        Ok(())
    }
}

/// Per-3D-patch latents after `layer_index` layers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecoderState {
    pub tokens: Tensor,
    pub layer_index: usize,
}

#[derive(Clone, Debug)]
struct DecoderLayer {
    norm_query: LayerNorm,
    norm_context: LayerNorm,
    attn: MultiHeadAttention,
    norm_mlp: LayerNorm,
    mlp: Mlp,
}

pub const DECODER_PREFIX: &str = "decoder";
pub const HEAD_PREFIX: &str = "head";

#[derive(Clone, Debug)]
pub struct LiftDecoder {
    pub config: DecoderConfig,
    seed: ParamId,
    query_mlp: Mlp,
    layers: Vec<DecoderLayer>,
}

/// `sin(2^k π x)` and `cos(2^k π x)` for each axis and frequency.
pub fn fourier_features(points: &[[f64; 3]], freqs: usize) -> Tensor {
    let mut t = Tensor::zeros(points.len(), 6 * freqs);
    for (i, p) in points.iter().enumerate() {
        let row = t.row_mut(i);
        let mut j = 0;
        for axis in p {
            for k in 0..freqs {
                let a = libm::ldexp(core::f64::consts::PI, k as i32) * axis;
                row[j] = libm::sin(a);
                row[j + 1] = libm::cos(a);
                j += 2;
            }
        }
    }
    t
}

impl LiftDecoder {
    pub fn new(store: &mut ParamStore, cfg: &DecoderConfig, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.width;
        let seed = store.add("decoder.seed", init_tensor(1, d, Init::Normal(0.02), rng));
        let query_mlp = Mlp::new(
            store,
            "decoder.query",
            (6 * cfg.fourier_freqs, d, d),
            Init::FanIn(1.0),
            rng,
        );
        let layers = (0..cfg.layers)
            .map(|i| {
                let p = |s: &str| alloc::format!("decoder.layer{i}.{s}");
                DecoderLayer {
                    norm_query: LayerNorm::new(store, &p("norm_query"), d),
                    norm_context: LayerNorm::new(store, &p("norm_context"), d),
                    attn: MultiHeadAttention::new(
                        store,
                        &p("attn"),
                        d,
                        cfg.heads,
                        Init::Zeros,
                        rng,
                    ),
                    norm_mlp: LayerNorm::new(store, &p("norm_mlp"), d),
                    mlp: Mlp::new(
                        store,
                        &p("mlp"),
                        (d, d * cfg.mlp_ratio, d),
                        Init::Zeros,
                        rng,
                    ),
                }
            })
            .collect();
        Ok(Self {
            config: cfg.clone(),
            seed,
            query_mlp,
            layers,
        })
    }

    /// Layer-0 state: shared seed plus an MLP of the patch centroid's
    /// Fourier features.
    pub fn init_queries(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        template: &TemplatePointSet,
    ) -> Var {
        let f = g.constant(fourier_features(
            &template.patch_centroids,
            self.config.fourier_freqs,
        ));
        let q = self.query_mlp.forward(g, store, f);
        let seed = g.param(store, self.seed);
        g.add_row(q, seed)
    }

    /// `MLP^i(x)` of layer `i` (1-based), including its input normalization.
    pub fn mlp_branch(&self, g: &mut Graph, store: &ParamStore, layer: usize, x: Var) -> Var {
        let l = &self.layers[layer - 1];
        let h = l.norm_mlp.forward(g, store, x);
        l.mlp.forward(g, store, h)
    }

    /// `ATTN^i(state, context)` of layer `i` (1-based).
    pub fn attention_branch(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        layer: usize,
        state: Var,
        context: Var,
    ) -> Var {
        let l = &self.layers[layer - 1];
        let q = l.norm_query.forward(g, store, state);
        let kv = l.norm_context.forward(g, store, context);
        l.attn.forward(g, store, q, kv)
    }

    /// One refinement step (layer `i`, 1-based). With `attention` off the
    /// cross-attention term is dropped and the layer reduces to `F + MLP(F)`.
    pub fn decode_layer(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        layer: usize,
        state: Var,
        context: Var,
        attention: bool,
    ) -> Result<Var> {
        if layer == 0 || layer > self.layers.len() {
            bail!(
                InvalidArgument,
                "layer {layer} out of range 1..={}",
                self.layers.len()
            );
        }
        let d = self.config.width;
        if g.shape(state).1 != d || g.shape(context).1 != d {
            bail!(
                InvariantViolation,
                "width mismatch: state {}, context {}, decoder {d}",
                g.shape(state).1,
                g.shape(context).1
            );
        }
        let inner = if attention {
            let a = self.attention_branch(g, store, layer, state, context);
            g.add(state, a)
        } else {
            state
        };
        let m = self.mlp_branch(g, store, layer, inner);
        Ok(g.add(state, m))
    }

    /// All states `F^0..=F^K`; cross-attention is active in layers
    /// `1..=attention_upto`.
    pub fn decode(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        template: &TemplatePointSet,
        context: Var,
        attention_upto: usize,
    ) -> Result<Vec<Var>> {
        let mut states = Vec::with_capacity(self.layers.len() + 1);
        let mut x = self.init_queries(g, store, template);
        states.push(x);
        for i in 1..=self.layers.len() {
            x = self.decode_layer(g, store, i, x, context, i <= attention_upto)?;
            states.push(x);
        }
        Ok(states)
    }
}

/// Token-to-Gaussians head: one linear expansion into 16 sub-tokens per
/// patch, then five independent attribute heads.
#[derive(Clone, Debug)]
pub struct GaussianHead {
    pub sub_width: usize,
    expand: Linear,
    offset: Linear,
    scale: Linear,
    rotation: Linear,
    opacity: Linear,
    color: Linear,
}

/// Offsets from the anchoring vertex are bounded by this many scene units.
pub const MAX_OFFSET: f64 = 0.25;
pub const LOG_SCALE_RANGE: (f64, f64) = (-8.0, 1.0);
const OPACITY_LOGIT_LIMIT: f64 = 30.0;
const INIT_LOG_SCALE: f64 = -3.2;

/// Raw and activated head outputs, all with one row per Gaussian.
pub struct HeadVars {
    /// offset, scale, rotation, opacity, color before activation.
    pub raw: [Var; 5],
    pub gaussians: GaussianVars,
}

impl GaussianHead {
    pub fn new(store: &mut ParamStore, width: usize, rng: &mut Rng) -> Self {
        let sub = width / PATCH_MEMBERS;
        let expand = Linear::new(
            store,
            "head.expand",
            width,
            PATCH_MEMBERS * sub,
            Init::FanIn(1.0),
            rng,
        );
        let mut lin =
            |name: &str, out: usize| Linear::new(store, name, sub, out, Init::FanIn(0.1), rng);
        let offset = lin("head.offset", 3);
        let scale = lin("head.scale", 3);
        let rotation = lin("head.rotation", 4);
        let opacity = lin("head.opacity", 1);
        let color = lin("head.color", 3);
        store.get_mut(scale.bias).data.fill(INIT_LOG_SCALE);
        store.get_mut(rotation.bias).data[0] = 1.0;
        Self {
            sub_width: sub,
            expand,
            offset,
            scale,
            rotation,
            opacity,
            color,
        }
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        state: Var,
        template: &TemplatePointSet,
    ) -> Result<HeadVars> {
        let (np, d) = g.shape(state);
        if np != template.num_patches() {
            bail!(
                InvariantViolation,
                "state has {np} tokens but the template has {} patches",
                template.num_patches()
            );
        }
        if d != self.expand.input {
            bail!(
                InvariantViolation,
                "state width {d} does not match head width {}",
                self.expand.input
            );
        }
        let x = self.expand.forward(g, store, state);
        let sub = g.reshape(x, np * PATCH_MEMBERS, self.sub_width);
        let raw = [
            self.offset.forward(g, store, sub),
            self.scale.forward(g, store, sub),
            self.rotation.forward(g, store, sub),
            self.opacity.forward(g, store, sub),
            self.color.forward(g, store, sub),
        ];
        let gaussians = activate(g, raw, template);
        Ok(HeadVars { raw, gaussians })
    }
}

/// Anchor vertex of each Gaussian: Gaussian `g` of patch `p` sits on the
/// `g`-th member of `p`.
pub fn anchor_vertices(template: &TemplatePointSet) -> Tensor {
    let mut data = Vec::with_capacity(template.num_vertices() * 3);
    for members in &template.members {
        for &v in members {
            data.extend_from_slice(&template.vertices[v as usize]);
        }
    }
    Tensor::from_vec(template.num_vertices(), 3, data)
}

/// Attribute activations. Rotations are left unnormalized here; the renderer
/// and [`head_cloud`] normalize them with an identity fallback.
pub fn activate(g: &mut Graph, raw: [Var; 5], template: &TemplatePointSet) -> GaussianVars {
    let anchors = g.constant(anchor_vertices(template));
    let t = g.tanh(raw[0]);
    let off = g.scale(t, MAX_OFFSET);
    let positions = g.add(anchors, off);
    let ls = g.clamp(raw[1], LOG_SCALE_RANGE.0, LOG_SCALE_RANGE.1);
    let scales = g.exp(ls);
    let ol = g.clamp(raw[3], -OPACITY_LOGIT_LIMIT, OPACITY_LOGIT_LIMIT);
    let opacities = g.sigmoid(ol);
    let colors = g.sigmoid(raw[4]);
    GaussianVars {
        positions,
        scales,
        rotations: raw[2],
        opacities,
        colors,
    }
}

/// Materialize activated head outputs as a cloud.
pub fn head_cloud(g: &Graph, vars: &GaussianVars) -> GaussianCloud {
    vars.to_cloud(g)
}
