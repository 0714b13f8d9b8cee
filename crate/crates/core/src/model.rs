//! The assembled reconstruction and editing model over one parameter store.

use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::backbone::{build_backbone, BackboneConfig, BuiltBackbone};
use crate::decoder::{
    DecoderConfig, GaussianHead, HeadVars, LiftDecoder, DECODER_PREFIX, HEAD_PREFIX,
};
use crate::edit_encoder::{EditEncoder, SegmentationMap, StyleEmbedding, EDIT_PREFIX};
use crate::error::{bail, Result};
use crate::gaussian::{
    build_template, Camera, GaussianCloud, TemplatePointSet, DEFAULT_CAMERA_DISTANCE,
};
use crate::image::{Image, Mask};
use crate::lift_encoder::{
    encode_frozen, LiftEncoder, LiftEncoderConfig, TaskEncoderConfig, LIFT_PREFIX,
};
use crate::loss::image_tensor;
use crate::nn::ParamStore;
use crate::preprocess::{
    prepare, select_foreground_patches, AlignedImage, PatchSet, PreprocessConfig,
};
use crate::raster::{rasterize, rasterize_graph, RenderOutput};
use crate::refiner::{Refiner, RefinerConfig, REFINER_PREFIX};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub preprocess: PreprocessConfig,
    pub patch_size: usize,
    pub num_patches: usize,
    pub template_seed: u64,
    pub seed: u64,
    pub backbone: BackboneConfig,
    pub lift: LiftEncoderConfig,
    pub decoder: DecoderConfig,
    pub refiner: RefinerConfig,
}

impl ModelConfig {
    /// 64-pixel inputs, 8-pixel patches, 256 template patches, `D = 256`, `K = 6`.
    pub fn desk() -> Self {
        Self {
            preprocess: PreprocessConfig {
                size: 64,
                ..Default::default()
            },
            patch_size: 8,
            num_patches: 256,
            template_seed: 0,
            seed: 0,
            backbone: BackboneConfig::lift_default(8),
            lift: LiftEncoderConfig::default(),
            decoder: DecoderConfig::default(),
            refiner: RefinerConfig::default(),
        }
    }

    /// Small enough for unit tests.
    pub fn tiny() -> Self {
        let mut backbone = BackboneConfig::lift_default(8);
        backbone.depth = 2;
        backbone.tap_layers = alloc::vec![0, 1];
        backbone.feature_dim = 16;
        Self {
            preprocess: PreprocessConfig {
                size: 32,
                ..Default::default()
            },
            patch_size: 8,
            num_patches: 8,
            template_seed: 0,
            seed: 0,
            backbone,
            lift: LiftEncoderConfig {
                task: TaskEncoderConfig {
                    width: 32,
                    blocks: 1,
                    heads: 4,
                    mlp_ratio: 2,
                },
                fuse_hidden: 32,
            },
            decoder: DecoderConfig {
                layers: 2,
                heads: 4,
                width: 32,
                mlp_ratio: 2,
                fourier_freqs: 6,
            },
            refiner: RefinerConfig {
                channels: 8,
                blocks: 1,
                residual: true,
            },
        }
    }

    /// Full-size counts: 4096 patches (65,536 Gaussians), `D = 1024`.
    pub fn paper_scale() -> Self {
        let mut c = Self::desk();
        c.preprocess.size = 256;
        c.patch_size = 16;
        c.num_patches = 4096;
        c.backbone = BackboneConfig::lift_default(16);
        c.lift.task.width = 1024;
        c.lift.task.heads = 16;
        c.lift.fuse_hidden = 1024;
        c.decoder.width = 1024;
        c.decoder.heads = 16;
        c
    }

    pub fn grid(&self) -> usize {
        self.preprocess.size / self.patch_size
    }

    pub fn num_gaussians(&self) -> usize {
        self.num_patches * crate::gaussian::PATCH_MEMBERS
    }

    pub fn validate(&self) -> Result<()> {
        let s = self.preprocess.size;
        if self.patch_size == 0 || s == 0 || !s.is_multiple_of(self.patch_size) {
            bail!(
                Config,
                "image size {s} must be a positive multiple of patch size {}",
                self.patch_size
            );
        }
        if self.num_patches == 0 {
            bail!(Config, "num_patches must be at least 1");
        }
        if self.backbone.patch_size != self.patch_size {
            bail!(
                Config,
                "frozen backbone patch size {} differs from patch size {}",
                self.backbone.patch_size,
                self.patch_size
            );
        }
        self.backbone.validate()?;
        self.decoder.validate()?;
        self.refiner.validate()?;
        let t = &self.lift.task;
        if t.width == 0 || t.heads == 0 || !t.width.is_multiple_of(t.heads) || t.blocks == 0 {
            bail!(
                Config,
                "task encoder width must be a positive multiple of its heads"
            );
        }
        if !self.decoder.width.is_multiple_of(self.lift.task.heads) {
            bail!(
                Config,
                "decoder width must be divisible by the encoder heads"
            );
        }
        Ok(())
    }
}

/// Which parameter groups a training phase updates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainPhase {
    Base,
    Refiner,
    Edit,
}

impl TrainPhase {
    pub fn trainable_prefixes(self) -> &'static [&'static str] {
        match self {
            TrainPhase::Base => &[LIFT_PREFIX, DECODER_PREFIX, HEAD_PREFIX],
            TrainPhase::Refiner => &[REFINER_PREFIX],
            TrainPhase::Edit => &[EDIT_PREFIX, DECODER_PREFIX, HEAD_PREFIX],
        }
    }
}

/// Name prefixes of everything except the refiner.
pub const BASE_PREFIXES: [&str; 4] = [LIFT_PREFIX, EDIT_PREFIX, DECODER_PREFIX, HEAD_PREFIX];

fn has_prefix(name: &str, prefix: &str) -> bool {
    name.strip_prefix(prefix)
        .is_some_and(|rest| rest.starts_with('.'))
}

/// A preprocessed input image with its kept patches and frozen features.
#[derive(Clone, Debug)]
pub struct LiftInput {
    pub aligned: AlignedImage,
    pub patches: PatchSet,
    pub frozen: Tensor,
}

/// Conditioning for one forward pass.
#[derive(Clone, Copy)]
pub enum ModelInput<'a> {
    Lift(&'a LiftInput),
    Edit {
        seg: &'a SegmentationMap,
        style: &'a StyleEmbedding,
    },
}

/// Decoder states and head outputs of one forward pass.
pub struct Forward {
    pub context: Var,
    pub states: Vec<Var>,
    pub head: HeadVars,
}

pub struct Model {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub template: TemplatePointSet,
    pub backbone: BuiltBackbone,
    pub lift: LiftEncoder,
    pub edit: EditEncoder,
    pub decoder: LiftDecoder,
    pub head: GaussianHead,
    pub refiner: Refiner,
}

impl Model {
    /// Fresh weights drawn from `config.seed`. Each component has its own
    /// random stream, so changing one component's size leaves the others'
    /// initialization unchanged.
    pub fn new(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let template = build_template(config.num_patches, config.template_seed)?;
        let backbone = build_backbone(&config.backbone, None)?;
        let frozen_width = config.backbone.tap_layers.len() * config.backbone.feature_dim;
        let d = config.decoder.width;
        let (p, grid) = (config.patch_size, config.grid());
        let mut store = ParamStore::new();
        let rng = |label: &str| Rng::derived(config.seed, label);
        let lift = LiftEncoder::new(
            &mut store,
            &config.lift,
            p,
            grid,
            frozen_width,
            d,
            &mut rng(LIFT_PREFIX),
        );
        let edit = EditEncoder::new(
            &mut store,
            &config.lift.task,
            p,
            grid,
            d,
            &mut rng(EDIT_PREFIX),
        );
        let decoder = LiftDecoder::new(&mut store, &config.decoder, &mut rng(DECODER_PREFIX))?;
        let head = GaussianHead::new(&mut store, d, &mut rng(HEAD_PREFIX));
        let refiner = Refiner::new(&mut store, &config.refiner, &mut rng(REFINER_PREFIX))?;
        let mut model = Self {
            config: config.clone(),
            store,
            template,
            backbone,
            lift,
            edit,
            decoder,
            head,
            refiner,
        };
        model.set_phase(TrainPhase::Base);
        Ok(model)
    }

    /// Make exactly the phase's parameter groups trainable.
    pub fn set_phase(&mut self, phase: TrainPhase) {
        self.store.set_all_trainable(false);
        for p in phase.trainable_prefixes() {
            self.store
                .set_trainable_prefix(&alloc::format!("{p}."), true);
        }
    }

    /// SHA-256 of every parameter outside the refiner.
    pub fn base_hash(&self) -> [u8; 32] {
        self.store
            .hash_where(|n| BASE_PREFIXES.iter().any(|p| has_prefix(n, p)))
    }

    pub fn group_hash(&self, prefix: &str) -> [u8; 32] {
        self.store.hash_where(|n| has_prefix(n, prefix))
    }

    pub fn background(&self) -> [f64; 3] {
        self.config.preprocess.background
    }

    /// Preprocess an image and run the frozen branch.
    pub fn lift_input(
        &self,
        image: &Image,
        mask: Option<&Mask>,
        source_id: &str,
    ) -> Result<LiftInput> {
        let aligned = prepare(image, mask, source_id, &self.config.preprocess)?;
        self.lift_input_aligned(aligned)
    }

    pub fn lift_input_aligned(&self, aligned: AlignedImage) -> Result<LiftInput> {
        let patches = select_foreground_patches(&aligned, self.config.patch_size)?;
        if patches.is_empty() {
            bail!(EmptyInput, "no foreground patches in {}", aligned.source_id);
        }
        let frozen = encode_frozen(
            &self.backbone,
            &aligned,
            &patches,
            &self.config.backbone.tap_layers,
        )?;
        Ok(LiftInput {
            aligned,
            patches,
            frozen,
        })
    }

    /// `F_2D` for either conditioning.
    pub fn context(&self, g: &mut Graph, input: ModelInput<'_>) -> Result<Var> {
        match input {
            ModelInput::Lift(l) => {
                self.lift
                    .encode(g, &self.store, &l.aligned, &l.patches, &l.frozen)
            }
            ModelInput::Edit { seg, style } => self.edit.encode(g, &self.store, seg, style),
        }
    }

    /// Encode, decode (cross-attention in layers `1..=attention_upto`) and
    /// run the Gaussian head.
    pub fn forward(
        &self,
        g: &mut Graph,
        input: ModelInput<'_>,
        attention_upto: usize,
    ) -> Result<Forward> {
        let context = self.context(g, input)?;
        let states =
            self.decoder
                .decode(g, &self.store, &self.template, context, attention_upto)?;
        let last = *states
            .last()
            .expect("decoder yields at least the initial state");
        let head = self.head.forward(g, &self.store, last, &self.template)?;
        Ok(Forward {
            context,
            states,
            head,
        })
    }

    /// Differentiable render of a forward pass, optionally refined.
    pub fn render_graph(
        &self,
        g: &mut Graph,
        forward: &Forward,
        camera: &Camera,
        refine: bool,
    ) -> Var {
        let r = rasterize_graph(g, forward.head.gaussians, camera, self.background());
        if refine {
            self.refiner
                .forward(g, &self.store, r.image, camera.width, camera.height)
        } else {
            r.image
        }
    }

    pub fn reconstruct_with(&self, input: ModelInput<'_>) -> Result<GaussianCloud> {
        let mut g = Graph::inference();
        let f = self.forward(&mut g, input, self.config.decoder.layers)?;
        Ok(f.head.gaussians.to_cloud(&g))
    }

    pub fn reconstruct(&self, input: &LiftInput) -> Result<GaussianCloud> {
        self.reconstruct_with(ModelInput::Lift(input))
    }

    pub fn reconstruct_edit(
        &self,
        seg: &SegmentationMap,
        style: &StyleEmbedding,
    ) -> Result<GaussianCloud> {
        self.reconstruct_with(ModelInput::Edit { seg, style })
    }

    /// Rasterize a cloud and optionally pass the image through the refiner.
    pub fn render(
        &self,
        cloud: &GaussianCloud,
        camera: &Camera,
        refine: bool,
    ) -> Result<RenderOutput> {
        let mut out = rasterize(cloud, camera, self.background())?;
        if refine {
            out.image = self.refiner.refine(&self.store, &out.image);
        }
        Ok(out)
    }

    /// Frontal camera at the input resolution.
    pub fn probe_camera(&self) -> Camera {
        let s = self.config.preprocess.size;
        Camera::orbit(0.0, 0.0, DEFAULT_CAMERA_DISTANCE, s, s)
    }

    /// Render with cross-attention active only in layers `1..=upto`; MLPs
    /// and skips run in every layer.
    pub fn visualize_decoder(
        &self,
        input: ModelInput<'_>,
        upto: usize,
        camera: &Camera,
    ) -> Result<RenderOutput> {
        let k = self.config.decoder.layers;
        if upto > k {
            bail!(
                InvalidArgument,
                "visualization layer {upto} out of range 0..={k}"
            );
        }
        let mut g = Graph::inference();
        let f = self.forward(&mut g, input, upto)?;
        let cloud = f.head.gaussians.to_cloud(&g);
        self.render(&cloud, camera, false)
    }

    /// One render per layer `0..=K`.
    pub fn visualize_all(
        &self,
        input: ModelInput<'_>,
        camera: &Camera,
    ) -> Result<Vec<RenderOutput>> {
        (0..=self.config.decoder.layers)
            .map(|i| self.visualize_decoder(input, i, camera))
            .collect()
    }

    /// Replace all weights from a name → tensor map (names and shapes must match).
    pub fn load_weights(
        &mut self,
        tensors: &alloc::collections::BTreeMap<String, Tensor>,
    ) -> Result<()> {
        self.store.load(tensors)
    }
}

/// Graph node holding an image as `(h*w) x c`.
pub fn image_constant(g: &mut Graph, image: &Image) -> Var {
    g.constant(image_tensor(image))
}
