//! Single-scene overfit runs and the threshold they calibrate.
//!
//! One procedural multi-view scene is trained from scratch with the desk
//! model; quality is the mean PSNR of the held-out view predicted from each
//! training view. Several seeds at the same step budget give the reference
//! distribution and the threshold is its nearest-rank 10th percentile.

use headlift_core::dataset::{DatasetMix, SceneKind};
use headlift_core::eval::{EvalProtocol, Evaluator, ModelPredictor, ProtocolName};
use headlift_core::fixtures::{fixture_scene, FixtureConfig};
use headlift_core::model::{Model, ModelConfig};
use headlift_core::train::{train_base, LossSpec, MemoryHooks, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::error::Result;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OverfitSetup {
    pub steps: u64,
    pub scene_seed: u64,
    pub fixture: FixtureConfig,
    pub loss: String,
    pub lr: f64,
}

impl Default for OverfitSetup {
    fn default() -> Self {
        Self {
            steps: 300,
            scene_seed: 0,
            fixture: FixtureConfig::default(),
            loss: "base_full".into(),
            lr: 1e-3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OverfitResult {
    pub seed: u64,
    pub held_out_psnr: f64,
    pub held_out_ssim: f64,
    pub initial_psnr: f64,
    pub final_train_loss: f64,
}

/// Train seed `seed` on the fixture scene and score the held-out view.
pub fn overfit_run(setup: &OverfitSetup, seed: u64) -> Result<OverfitResult> {
    let scenes = vec![fixture_scene(
        "overfit",
        SceneKind::MultiviewReal,
        setup.scene_seed,
        &setup.fixture,
    )?];
    let mut mc = ModelConfig::desk();
    mc.preprocess.size = setup.fixture.size;
    mc.seed = seed;
    let mut model = Model::new(&mc)?;
    let protocol = EvalProtocol::build(ProtocolName::Novel, &scenes);
    let evaluator = Evaluator::builtin()?;
    let score = |m: &Model| {
        evaluator.run_protocol(
            &ModelPredictor {
                model: m,
                refine: false,
            },
            &scenes,
            &protocol,
        )
    };
    let initial = score(&model)?.aggregate.psnr;
    let mut cfg = TrainConfig {
        steps: setup.steps,
        seed,
        loss: LossSpec::Preset(setup.loss.clone()),
        mix: DatasetMix::only(SceneKind::MultiviewReal),
        ..Default::default()
    };
    cfg.optimizer.lr = setup.lr;
    let mut hooks = MemoryHooks::default();
    train_base(&mut model, &cfg, &scenes, &mut hooks)?;
    let table = score(&model)?;
    Ok(OverfitResult {
        seed,
        held_out_psnr: table.aggregate.psnr,
        held_out_ssim: table.aggregate.ssim,
        initial_psnr: initial,
        final_train_loss: hooks.records.last().map_or(f64::NAN, |r| r.loss),
    })
}

/// Nearest-rank percentile: the smallest value with at least `p` percent of
/// the sample at or below it.
pub fn nearest_rank(values: &[f64], p: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let rank = ((p / 100.0) * v.len() as f64).ceil().max(1.0) as usize;
    v[rank.min(v.len()) - 1]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub setup: OverfitSetup,
    pub runs: Vec<OverfitResult>,
    pub percentile: f64,
    /// Held-out PSNR in dB an acceptance run must reach.
    pub threshold: f64,
    /// Seed of the acceptance run; never one of the calibration seeds.
    pub acceptance_seed: u64,
}

pub fn calibrate(setup: &OverfitSetup, seeds: &[u64], acceptance_seed: u64) -> Result<Calibration> {
    let runs = seeds
        .iter()
        .map(|&s| overfit_run(setup, s))
        .collect::<Result<Vec<_>>>()?;
    let psnr: Vec<f64> = runs.iter().map(|r| r.held_out_psnr).collect();
    Ok(Calibration {
        setup: setup.clone(),
        runs,
        percentile: 10.0,
        threshold: nearest_rank(&psnr, 10.0),
        acceptance_seed,
    })
}
