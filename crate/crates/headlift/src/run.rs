//! Training config files and the on-disk training driver.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use headlift_core::edit_encoder::{BuiltinStyleEmbedder, StubSegmenter};
use headlift_core::model::{Model, ModelConfig, TrainPhase};
use headlift_core::train::{
    train, EditSources, MetricsRecord, TrainConfig, TrainHooks, TrainState,
};
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::error::{format_err, Error, Result};
use crate::manifest::load_dataset;

/// Seed of the builtin style embedder shared by training and the service.
pub const STYLE_EMBEDDER_SEED: u64 = 0;

/// Model architecture by preset name or spelled out.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ModelSpec {
    Preset(String),
    Custom(Box<ModelConfig>),
}

impl Default for ModelSpec {
    fn default() -> Self {
        ModelSpec::Preset("desk".into())
    }
}

impl ModelSpec {
    pub fn resolve(&self) -> Result<ModelConfig> {
        let cfg = match self {
            ModelSpec::Preset(name) => match name.as_str() {
                "desk" => ModelConfig::desk(),
                "tiny" => ModelConfig::tiny(),
                "paper_scale" => ModelConfig::paper_scale(),
                other => {
                    return Err(format_err!(
                        "unknown model preset {other:?} (desk, tiny, paper_scale)"
                    ))
                }
            },
            ModelSpec::Custom(c) => (**c).clone(),
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// A training run as one JSON document. Relative paths resolve against the
/// config file's directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainFile {
    /// Dataset manifest.
    pub dataset: PathBuf,
    /// Receives `metrics.jsonl` and checkpoints.
    pub output_dir: PathBuf,
    /// Ignored in favour of the checkpoint's architecture when
    /// `init_checkpoint` is set.
    #[serde(default)]
    pub model: ModelSpec,
    /// Starting weights; required for the refiner and edit phases.
    #[serde(default)]
    pub init_checkpoint: Option<PathBuf>,
    #[serde(default)]
    pub train: TrainConfig,
}

impl TrainFile {
    pub fn read(path: &Path) -> Result<Self> {
        let mut f: TrainFile = crate::formats::read_json(path)?;
        let base = path.parent().unwrap_or(Path::new(""));
        f.dataset = base.join(&f.dataset);
        f.output_dir = base.join(&f.output_dir);
        f.init_checkpoint = f.init_checkpoint.map(|p| base.join(p));
        Ok(f)
    }

    /// Everything that can be checked without touching the dataset.
    pub fn validate(&self, phase: TrainPhase) -> Result<()> {
        self.train.validate(phase)?;
        if phase != TrainPhase::Base && self.init_checkpoint.is_none() {
            return Err(format_err!(
                "the {phase:?} phase starts from a base checkpoint; set init_checkpoint"
            ));
        }
        if self.init_checkpoint.is_none() {
            self.model.resolve()?;
        }
        Ok(())
    }
}

/// Writes one JSON object per metrics record and a checkpoint file per
/// checkpoint request.
pub struct DiskHooks {
    pub dir: PathBuf,
    metrics: BufWriter<File>,
    pub written: Vec<PathBuf>,
}

impl DiskHooks {
    pub fn create(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join("metrics.jsonl");
        let f = File::create(&path).map_err(|e| Error::io(&path, e))?;
        Ok(Self {
            dir: dir.into(),
            metrics: BufWriter::new(f),
            written: Vec::new(),
        })
    }

    pub fn checkpoint_path(&self, phase: TrainPhase, step: u64) -> PathBuf {
        self.dir
            .join(format!("{}_step{step:06}.hlta", phase_name(phase)))
    }
}

pub fn phase_name(phase: TrainPhase) -> &'static str {
    match phase {
        TrainPhase::Base => "base",
        TrainPhase::Refiner => "refiner",
        TrainPhase::Edit => "edit",
    }
}

fn to_core(e: Error) -> headlift_core::Error {
    headlift_core::Error::InvalidArgument(e.to_string())
}

impl TrainHooks for DiskHooks {
    fn record(&mut self, r: &MetricsRecord) -> headlift_core::Result<()> {
        let line =
            serde_json::to_string(r).map_err(|e| to_core(Error::json("metrics record", e)))?;
        writeln!(self.metrics, "{line}")
            .and_then(|_| self.metrics.flush())
            .map_err(|e| to_core(Error::io(self.dir.join("metrics.jsonl"), e)))
    }

    fn checkpoint(&mut self, model: &Model, state: &TrainState) -> headlift_core::Result<()> {
        let path = self.checkpoint_path(state.phase, state.step);
        Checkpoint::of(model, Some(state))
            .save(&path)
            .map_err(to_core)?;
        let latest = self
            .dir
            .join(format!("{}_final.hlta", phase_name(state.phase)));
        std::fs::copy(&path, &latest).map_err(|e| to_core(Error::io(&latest, e)))?;
        self.written.push(path);
        Ok(())
    }
}

pub struct RunOutcome {
    pub state: TrainState,
    pub checkpoints: Vec<PathBuf>,
    pub final_checkpoint: PathBuf,
}

/// Load the dataset and starting weights, train, and write outputs.
pub fn run_training(phase: TrainPhase, file: &TrainFile) -> Result<RunOutcome> {
    file.validate(phase)?;
    let mut model = match &file.init_checkpoint {
        Some(p) => Checkpoint::load(p)?.to_model()?,
        None => Model::new(&file.model.resolve()?)?,
    };
    let scenes = load_dataset(&file.dataset)?;
    let mut hooks = DiskHooks::create(&file.output_dir)?;
    let embedder = BuiltinStyleEmbedder::new(STYLE_EMBEDDER_SEED);
    let edit = EditSources {
        segmenter: &StubSegmenter,
        embedder: &embedder,
    };
    let result = train(
        &mut model,
        phase,
        &file.train,
        &scenes,
        Some(edit),
        &mut hooks,
    );
    let state = match result {
        Ok(s) => s,
        Err(headlift_core::Error::NonFinite {
            step,
            last_good_step,
        }) => {
            let last = match last_good_step {
                Some(s) => format!(
                    "last good checkpoint {}",
                    hooks.checkpoint_path(phase, s).display()
                ),
                None => "no checkpoint was written".into(),
            };
            return Err(format_err!(
                "training diverged (non-finite loss) at step {step}; {last}"
            ));
        }
        Err(e) => return Err(e.into()),
    };
    Ok(RunOutcome {
        state,
        final_checkpoint: hooks.dir.join(format!("{}_final.hlta", phase_name(phase))),
        checkpoints: hooks.written,
    })
}
