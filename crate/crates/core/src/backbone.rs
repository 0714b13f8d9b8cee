//! Frozen feature extractors used by the lift encoder and the perceptual
//! losses.
//!
//! The builtin backbones draw their weights from a fixed-seed initializer and
//! are never trained. Their parameters live in a private store marked frozen,
//! so graphs built through them never differentiate the weights, only the
//! input image.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{bail, Result};
use crate::image::Image;
use crate::nn::{Conv2d, EncoderBlock, Init, Linear, ParamStore};
use crate::preprocess::patch_gather_index;
use crate::rng::Rng;
use crate::tensor::Tensor;

/// A frozen network mapping an image to per-token features at several depths.
pub trait FeatureBackbone: Send + Sync {
    fn name(&self) -> &str;
    /// Number of tappable layers.
    fn depth(&self) -> usize;
    fn feature_dim(&self) -> usize;
    /// Pixels per token side; tokens form a row-major grid.
    fn token_stride(&self) -> usize;
    /// Token features at each tap for an `(height*width) x 3` image node.
    fn features(
        &self,
        g: &mut Graph,
        image: Var,
        width: usize,
        height: usize,
        taps: &[usize],
    ) -> Result<Vec<Var>>;
}

/// Evaluate a backbone outside any training graph.
pub fn features_of(
    backbone: &dyn FeatureBackbone,
    image: &Image,
    taps: &[usize],
) -> Result<Vec<Tensor>> {
    let mut g = Graph::inference();
    let x = g.constant(Tensor::from_vec(
        image.width * image.height,
        image.channels,
        image.data.clone(),
    ));
    let vars = backbone.features(&mut g, x, image.width, image.height, taps)?;
    Ok(vars.into_iter().map(|v| g.take_value(v)).collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightsSource {
    BuiltinDeterministic,
    ExternalCheckpoint,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    /// Patch-token transformer.
    Vit,
    /// Strided convolutional encoder ending in a 1x1 projection.
    Conv,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub name: String,
    pub architecture: Architecture,
    pub tap_layers: Vec<usize>,
    pub feature_dim: usize,
    pub depth: usize,
    /// Patch size (ViT) or total stride (conv).
    pub patch_size: usize,
    pub heads: usize,
    pub weights_source: WeightsSource,
    pub seed: u64,
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 || self.feature_dim == 0 || self.patch_size == 0 {
            bail!(
                Config,
                "backbone {}: depth, feature_dim and patch_size must be positive",
                self.name
            );
        }
        validate_taps(&self.name, &self.tap_layers, self.depth)?;
        match self.architecture {
            Architecture::Vit
                if self.heads == 0 || !self.feature_dim.is_multiple_of(self.heads) =>
            {
                bail!(
                    Config,
                    "backbone {}: feature_dim must be divisible by heads",
                    self.name
                )
            }
            Architecture::Conv
                if !self.patch_size.is_power_of_two()
                    || self.patch_size.trailing_zeros() as usize + 1 != self.depth =>
            {
                bail!(
                    Config,
                    "backbone {}: conv depth must be log2(stride) + 1",
                    self.name
                )
            }
            _ => Ok(()),
        }
    }

    /// Frozen branch of the lift encoder: four evenly spaced taps.
    pub fn lift_default(patch_size: usize) -> Self {
        Self {
            name: "lift_frozen".into(),
            architecture: Architecture::Vit,
            tap_layers: alloc::vec![1, 3, 5, 7],
            feature_dim: 64,
            depth: 8,
            patch_size,
            heads: 4,
            weights_source: WeightsSource::BuiltinDeterministic,
            seed: 0x11f7,
        }
    }

    /// Semantic perceptual backbone, tapped at the last and third-from-last block.
    pub fn semantic_default() -> Self {
        Self {
            name: "semantic".into(),
            architecture: Architecture::Vit,
            tap_layers: alloc::vec![3, 5],
            feature_dim: 64,
            depth: 6,
            patch_size: 8,
            heads: 4,
            weights_source: WeightsSource::BuiltinDeterministic,
            seed: 0xd1,
        }
    }

    /// Segmentation-oriented convolutional backbone, tapped at its final encoding.
    pub fn segmentation_default() -> Self {
        Self {
            name: "segmentation".into(),
            architecture: Architecture::Conv,
            tap_layers: alloc::vec![3],
            feature_dim: 64,
            depth: 4,
            patch_size: 8,
            heads: 0,
            weights_source: WeightsSource::BuiltinDeterministic,
            seed: 0x5a,
        }
    }
}

pub(crate) fn validate_taps(name: &str, taps: &[usize], depth: usize) -> Result<()> {
    if taps.is_empty() {
        bail!(Config, "backbone {name}: no tap layers");
    }
    if taps.windows(2).any(|w| w[0] >= w[1]) {
        bail!(
            Config,
            "backbone {name}: tap layers must be strictly increasing"
        );
    }
    if taps[taps.len() - 1] >= depth {
        bail!(
            Config,
            "backbone {name}: tap layer {} exceeds depth {depth}",
            taps[taps.len() - 1]
        );
    }
    Ok(())
}

/// Build a backbone from its config. External weights are required exactly
/// when the config asks for them.
pub fn build_backbone(
    cfg: &BackboneConfig,
    external: Option<&BTreeMap<String, Tensor>>,
) -> Result<BuiltBackbone> {
    cfg.validate()?;
    let mut rng = Rng::derived(cfg.seed, &cfg.name);
    let mut store = ParamStore::new();
    let net = match cfg.architecture {
        Architecture::Vit => Net::Vit(VitNet::new(&mut store, cfg, &mut rng)),
        Architecture::Conv => Net::Conv(ConvNet::new(&mut store, cfg, &mut rng)),
    };
    match (cfg.weights_source, external) {
        (WeightsSource::BuiltinDeterministic, _) => {}
        (WeightsSource::ExternalCheckpoint, Some(tensors)) => store.load(tensors)?,
        (WeightsSource::ExternalCheckpoint, None) => {
            bail!(
                Config,
                "backbone {}: external checkpoint requested but not provided",
                cfg.name
            )
        }
    }
    store.set_all_trainable(false);
    Ok(BuiltBackbone {
        config: cfg.clone(),
        store,
        net,
    })
}

pub struct BuiltBackbone {
    config: BackboneConfig,
    store: ParamStore,
    net: Net,
}

impl BuiltBackbone {
    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    /// Features at the configured taps.
    pub fn default_features(
        &self,
        g: &mut Graph,
        image: Var,
        width: usize,
        height: usize,
    ) -> Result<Vec<Var>> {
        self.features(g, image, width, height, &self.config.tap_layers.clone())
    }
}

enum Net {
    Vit(VitNet),
    Conv(ConvNet),
}

impl FeatureBackbone for BuiltBackbone {
    fn name(&self) -> &str {
        &self.config.name
    }

    fn depth(&self) -> usize {
        self.config.depth
    }

    fn feature_dim(&self) -> usize {
        self.config.feature_dim
    }

    fn token_stride(&self) -> usize {
        self.config.patch_size
    }

    fn features(
        &self,
        g: &mut Graph,
        image: Var,
        width: usize,
        height: usize,
        taps: &[usize],
    ) -> Result<Vec<Var>> {
        validate_taps(&self.config.name, taps, self.config.depth)?;
        let p = self.config.patch_size;
        if !width.is_multiple_of(p) || !height.is_multiple_of(p) {
            bail!(
                InvalidArgument,
                "backbone {}: image {width}x{height} not divisible by {p}",
                self.config.name
            );
        }
        if g.shape(image) != (width * height, 3) {
            bail!(
                InvalidArgument,
                "backbone {}: image node must be (h*w) x 3",
                self.config.name
            );
        }
        Ok(match &self.net {
            Net::Vit(n) => n.forward(g, &self.store, image, width, height, taps),
            Net::Conv(n) => n.forward(g, &self.store, image, width, height, taps),
        })
    }
}

struct VitNet {
    patch: usize,
    dim: usize,
    embed: Linear,
    blocks: Vec<EncoderBlock>,
}

impl VitNet {
    fn new(store: &mut ParamStore, cfg: &BackboneConfig, rng: &mut Rng) -> Self {
        let p = cfg.patch_size;
        let embed = Linear::new(
            store,
            "embed",
            p * p * 3,
            cfg.feature_dim,
            Init::FanIn(1.0),
            rng,
        );
        let blocks = (0..cfg.depth)
            .map(|i| {
                EncoderBlock::new(
                    store,
                    &alloc::format!("block{i}"),
                    cfg.feature_dim,
                    cfg.heads,
                    2,
                    Init::FanIn(0.5),
                    rng,
                )
            })
            .collect();
        Self {
            patch: p,
            dim: cfg.feature_dim,
            embed,
            blocks,
        }
    }

    fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        image: Var,
        width: usize,
        height: usize,
        taps: &[usize],
    ) -> Vec<Var> {
        let (gw, gh) = (width / self.patch, height / self.patch);
        let kept: Vec<(u32, u32)> = (0..gh as u32)
            .flat_map(|r| (0..gw as u32).map(move |c| (r, c)))
            .collect();
        let idx = patch_gather_index(width, 3, self.patch, &kept);
        let rows = g.gather(image, idx, kept.len(), self.patch * self.patch * 3);
        let centered = g.add_scalar(rows, -0.5);
        let normalized = g.scale(centered, 4.0);
        let x = self.embed.forward(g, store, normalized);
        let pos = g.constant(sincos_positions(gh, gw, self.dim, 0.1));
        let mut x = g.add(x, pos);
        let mut out = Vec::with_capacity(taps.len());
        for (i, block) in self
            .blocks
            .iter()
            .enumerate()
            .take(taps[taps.len() - 1] + 1)
        {
            x = block.forward(g, store, x);
            if taps.contains(&i) {
                out.push(x);
            }
        }
        out
    }
}

/// Fixed 2D sine/cosine embeddings, half the width for rows and half for columns.
pub fn sincos_positions(rows: usize, cols: usize, dim: usize, amplitude: f64) -> Tensor {
    let mut t = Tensor::zeros(rows * cols, dim);
    let half = dim / 2;
    for r in 0..rows {
        for c in 0..cols {
            let row = t.row_mut(r * cols + c);
            for (k, slot) in row.iter_mut().enumerate() {
                let (pos, j) = if k < half {
                    (r as f64, k)
                } else {
                    (c as f64, k - half)
                };
                let freq = libm::pow(100.0, -((j / 2) as f64) / (half.max(2) / 2) as f64);
                let angle = pos * freq;
                *slot = amplitude
                    * if j % 2 == 0 {
                        libm::sin(angle)
                    } else {
                        libm::cos(angle)
                    };
            }
        }
    }
    t
}

struct ConvNet {
    stages: Vec<Conv2d>,
    neck: Conv2d,
}

impl ConvNet {
    fn new(store: &mut ParamStore, cfg: &BackboneConfig, rng: &mut Rng) -> Self {
        let strided = cfg.depth - 1;
        let mut stages = Vec::with_capacity(strided);
        let mut input = 3;
        for i in 0..strided {
            stages.push(Conv2d::new(
                store,
                &alloc::format!("stage{i}"),
                input,
                cfg.feature_dim,
                3,
                2,
                Init::FanIn(libm::sqrt(2.0)),
                rng,
            ));
            input = cfg.feature_dim;
        }
        let neck = Conv2d::new(
            store,
            "neck",
            input,
            cfg.feature_dim,
            1,
            1,
            Init::FanIn(1.0),
            rng,
        );
        Self { stages, neck }
    }

    fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        image: Var,
        width: usize,
        height: usize,
        taps: &[usize],
    ) -> Vec<Var> {
        let centered = g.add_scalar(image, -0.5);
        let mut x = g.scale(centered, 4.0);
        let (mut h, mut w) = (height, width);
        let mut out = Vec::with_capacity(taps.len());
        for (i, conv) in self.stages.iter().enumerate() {
            let (y, ho, wo) = conv.forward(g, store, x, h, w);
            x = g.gelu(y);
            h = ho;
            w = wo;
            if taps.contains(&i) {
                out.push(x);
            }
        }
        if taps.contains(&self.stages.len()) {
            let (y, _, _) = self.neck.forward(g, store, x, h, w);
            out.push(y);
        }
        out
    }
}
