//! Training loops for the base model, the refiner and the editing model.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::autograd::Graph;
use crate::dataset::{aligned_camera, Dataset, DatasetMix, Pair, Scene, SceneKind};
use crate::edit_encoder::{
    embed_style, SegmentationMap, Segmenter, StyleEmbedder, StyleEmbedding, StyleInput,
};
use crate::error::{bail, Error, Result};
use crate::eval::psnr;
use crate::gaussian::Camera;
use crate::image::Image;
use crate::loss::{image_tensor, LossConfig, LossModule, PreparedTarget, TermValue};
use crate::model::{LiftInput, Model, ModelInput, TrainPhase};
use crate::optim::{Adam, AdamConfig};
use crate::preprocess::prepare;
use crate::rng::Rng;
use crate::tensor::Tensor;

/// A loss given by preset name or spelled out.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum LossSpec {
    Preset(String),
    Custom(LossConfig),
}

impl LossSpec {
    pub fn resolve(&self) -> Result<LossConfig> {
        match self {
            LossSpec::Preset(name) => LossConfig::preset(name),
            LossSpec::Custom(c) => {
                c.validate()?;
                Ok(c.clone())
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub steps: u64,
    pub seed: u64,
    pub loss: LossSpec,
    pub mix: DatasetMix,
    pub optimizer: AdamConfig,
    /// Checkpoint every this many steps (0: only at the end).
    pub checkpoint_every: u64,
    /// Metrics record every this many steps.
    pub log_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            seed: 0,
            loss: LossSpec::Preset("base_full".into()),
            mix: DatasetMix::default(),
            optimizer: AdamConfig::default(),
            checkpoint_every: 0,
            log_every: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, phase: TrainPhase) -> Result<()> {
        self.mix.validate()?;
        self.optimizer.validate()?;
        let loss = self.loss.resolve()?;
        if self.log_every == 0 {
            bail!(Config, "log_every must be at least 1");
        }
        if phase == TrainPhase::Edit && self.mix.multiview_synthetic != 0.0 {
            bail!(
                Config,
                "edit fine-tuning excludes synthetic scenes; multiview_synthetic weight is {}",
                self.mix.multiview_synthetic
            );
        }
        let want = if phase == TrainPhase::Refiner {
            crate::loss::Phase::Refiner
        } else {
            crate::loss::Phase::Base
        };
        if loss.phase != want {
            bail!(
                Config,
                "loss is for the {:?} phase but training runs {phase:?}",
                loss.phase
            );
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: u64,
    pub phase: TrainPhase,
    pub scene: String,
    pub input: usize,
    pub target: usize,
    pub loss: f64,
    pub terms: Vec<TermValue>,
    pub lr: f64,
    pub grad_norm: f64,
    /// PSNR of this step's prediction against its target.
    pub psnr: f64,
}

/// Optimizer state and progress; the random stream is derived from
/// `(seed, step)` so nothing else needs saving.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub phase: TrainPhase,
    pub step: u64,
    pub seed: u64,
    pub optimizer: Adam,
    /// Base-weight hash recorded when the refiner phase started.
    pub base_hash: Option<[u8; 32]>,
}

/// Receives metrics and checkpoint requests during training.
pub trait TrainHooks {
    fn record(&mut self, _record: &MetricsRecord) -> Result<()> {
        Ok(())
    }
    /// Persist the model at `state.step`. A later divergence reports the
    /// step of the last successful call.
    fn checkpoint(&mut self, _model: &Model, _state: &TrainState) -> Result<()> {
        Ok(())
    }
}

/// Collects records in memory.
#[derive(Default)]
pub struct MemoryHooks {
    pub records: Vec<MetricsRecord>,
    pub checkpoints: Vec<u64>,
}

impl TrainHooks for MemoryHooks {
    fn record(&mut self, r: &MetricsRecord) -> Result<()> {
        self.records.push(r.clone());
        Ok(())
    }
    fn checkpoint(&mut self, _m: &Model, s: &TrainState) -> Result<()> {
        self.checkpoints.push(s.step);
        Ok(())
    }
}

/// Segmentation and style sources for the editing phase.
pub struct EditSources<'a> {
    /// Used for views without a ground-truth class map.
    pub segmenter: &'a dyn Segmenter,
    pub embedder: &'a dyn StyleEmbedder,
}

enum Conditioning {
    Lift(LiftInput),
    Edit(SegmentationMap, StyleEmbedding),
}

struct Trainer<'a, 'd> {
    phase: TrainPhase,
    cfg: &'a TrainConfig,
    data: Dataset<'d>,
    loss: LossModule,
    edit: Option<EditSources<'a>>,
    inputs: BTreeMap<(usize, usize), Conditioning>,
    targets: BTreeMap<(usize, usize), (PreparedTarget, Camera)>,
}

impl Trainer<'_, '_> {
    fn conditioning(&mut self, model: &Model, scene: usize, view: usize) -> Result<&Conditioning> {
        if !self.inputs.contains_key(&(scene, view)) {
            let v = &self.data.scenes[scene].views[view];
            let c = match &self.edit {
                None => Conditioning::Lift(model.lift_input(&v.image, Some(&v.mask), &v.id)?),
                Some(src) => {
                    let aligned =
                        prepare(&v.image, Some(&v.mask), &v.id, &model.config.preprocess)?;
                    let seg = match &v.seg {
                        Some(s) if s.size == aligned.size() => s.clone(),
                        _ => src.segmenter.segment(&aligned)?,
                    };
                    let style = embed_style(
                        StyleInput::Image {
                            image: &aligned.pixels,
                            id: &v.id,
                        },
                        src.embedder,
                    )?;
                    Conditioning::Edit(seg, style)
                }
            };
            self.inputs.insert((scene, view), c);
        }
        Ok(&self.inputs[&(scene, view)])
    }

    fn target(
        &mut self,
        model: &Model,
        scene: usize,
        view: usize,
    ) -> Result<&(PreparedTarget, Camera)> {
        if !self.targets.contains_key(&(scene, view)) {
            let v = &self.data.scenes[scene].views[view];
            let size = model.config.preprocess.size;
            let aligned = prepare(&v.image, Some(&v.mask), &v.id, &model.config.preprocess)?;
            let prepared = self.loss.prepare_target(&aligned.pixels)?;
            self.targets
                .insert((scene, view), (prepared, aligned_camera(&v.camera, size)));
        }
        Ok(&self.targets[&(scene, view)])
    }

    fn step(
        &mut self,
        model: &Model,
        pair: Pair,
    ) -> Result<(f64, Vec<TermValue>, Vec<Option<Tensor>>, f64)> {
        self.conditioning(model, pair.scene, pair.input)?;
        self.target(model, pair.scene, pair.target)?;
        let cond = &self.inputs[&(pair.scene, pair.input)];
        let (target, camera) = &self.targets[&(pair.scene, pair.target)];
        let input = match cond {
            Conditioning::Lift(l) => ModelInput::Lift(l),
            Conditioning::Edit(seg, style) => ModelInput::Edit { seg, style },
        };
        let mut g = Graph::new();
        let pred = if self.phase == TrainPhase::Refiner {
            // The base model is frozen: render it outside the graph.
            let cloud = model.reconstruct_with(input)?;
            let raw = model.render(&cloud, camera, false)?.image;
            let x = g.constant(image_tensor(&raw));
            model
                .refiner
                .forward(&mut g, &model.store, x, camera.width, camera.height)
        } else {
            let f = model.forward(&mut g, input, model.config.decoder.layers)?;
            model.render_graph(&mut g, &f, camera, false)
        };
        let (loss, terms) = self.loss.composite(&mut g, pred, target)?;
        let value = g.value(loss).data[0];
        let pred_img = Image::new(camera.width, camera.height, 3, g.value(pred).data.clone());
        let p = psnr(&pred_img, &target.image)?;
        if !value.is_finite() || !g.value(pred).is_finite() {
            return Ok((f64::NAN, terms, Vec::new(), p));
        }
        let grads = g.backward(loss).param_grads(&model.store);
        Ok((value, terms, grads, p))
    }
}

/// Shared loop for all phases. The model's trainable flags are set from
/// `phase`; only those groups change.
pub fn train(
    model: &mut Model,
    phase: TrainPhase,
    cfg: &TrainConfig,
    scenes: &[Scene],
    edit: Option<EditSources<'_>>,
    hooks: &mut dyn TrainHooks,
) -> Result<TrainState> {
    cfg.validate(phase)?;
    if phase == TrainPhase::Edit && edit.is_none() {
        bail!(Config, "edit phase needs a segmenter and a style embedder");
    }
    if phase == TrainPhase::Edit
        && scenes
            .iter()
            .any(|s| s.kind == SceneKind::MultiviewSynthetic)
    {
        bail!(Config, "edit fine-tuning excludes synthetic scenes");
    }
    let loss = LossModule::new(&cfg.loss.resolve()?)?;
    let data = Dataset::new(scenes, &cfg.mix)?;
    model.set_phase(phase);
    let mut state = TrainState {
        phase,
        step: 0,
        seed: cfg.seed,
        optimizer: Adam::new(cfg.optimizer.clone())?,
        base_hash: (phase == TrainPhase::Refiner).then(|| model.base_hash()),
    };
    let mut trainer = Trainer {
        phase,
        cfg,
        data,
        loss,
        edit: if phase == TrainPhase::Edit {
            edit
        } else {
            None
        },
        inputs: BTreeMap::new(),
        targets: BTreeMap::new(),
    };
    let mut last_good: Option<u64> = None;
    while state.step < cfg.steps {
        let step = state.step;
        let mut rng = Rng::derived(cfg.seed, &alloc::format!("step{step}"));
        let pair = trainer.data.sample_pair(&mut rng);
        let (value, terms, grads, p) = trainer.step(model, pair)?;
        if !value.is_finite() {
            return Err(Error::NonFinite {
                step,
                last_good_step: last_good,
            });
        }
        let lr = cfg.optimizer.lr_at(step, cfg.steps);
        let grad_norm = state.optimizer.update(&mut model.store, &grads, cfg.steps);
        state.step += 1;
        if step.is_multiple_of(trainer.cfg.log_every) {
            hooks.record(&MetricsRecord {
                step,
                phase,
                scene: trainer.data.scenes[pair.scene].id.clone(),
                input: pair.input,
                target: pair.target,
                loss: value,
                terms,
                lr,
                grad_norm,
                psnr: p,
            })?;
        }
        let due = cfg.checkpoint_every > 0
            && state.step.is_multiple_of(cfg.checkpoint_every)
            && state.step < cfg.steps;
        if due {
            verify_frozen_base(model, &state)?;
            hooks.checkpoint(model, &state)?;
            last_good = Some(state.step);
        }
    }
    verify_frozen_base(model, &state)?;
    hooks.checkpoint(model, &state)?;
    Ok(state)
}

fn verify_frozen_base(model: &Model, state: &TrainState) -> Result<()> {
    if let Some(h) = state.base_hash {
        if model.base_hash() != h {
            bail!(
                InvariantViolation,
                "base weights changed during refiner training"
            );
        }
    }
    Ok(())
}

pub fn train_base(
    model: &mut Model,
    cfg: &TrainConfig,
    scenes: &[Scene],
    hooks: &mut dyn TrainHooks,
) -> Result<TrainState> {
    train(model, TrainPhase::Base, cfg, scenes, None, hooks)
}

/// Train only the refiner on top of a frozen base model.
pub fn train_refiner(
    model: &mut Model,
    cfg: &TrainConfig,
    scenes: &[Scene],
    hooks: &mut dyn TrainHooks,
) -> Result<TrainState> {
    train(model, TrainPhase::Refiner, cfg, scenes, None, hooks)
}

/// Fine-tune the editing encoder together with the decoder and head, which
/// start from the base model's weights.
pub fn finetune_edit(
    model: &mut Model,
    cfg: &TrainConfig,
    scenes: &[Scene],
    sources: EditSources<'_>,
    hooks: &mut dyn TrainHooks,
) -> Result<TrainState> {
    train(model, TrainPhase::Edit, cfg, scenes, Some(sources), hooks)
}
