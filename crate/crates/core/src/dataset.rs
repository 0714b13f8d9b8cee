//! In-memory scenes, dataset mixing and input/target pair sampling.

use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::edit_encoder::SegmentationMap;
use crate::error::{bail, Result};
use crate::gaussian::Camera;
use crate::image::{Image, Mask};
use crate::rng::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SceneKind {
    MultiviewReal,
    MultiviewSynthetic,
    Singleview,
}

impl SceneKind {
    pub const ALL: [SceneKind; 3] = [
        SceneKind::MultiviewReal,
        SceneKind::MultiviewSynthetic,
        SceneKind::Singleview,
    ];

    pub fn index(self) -> usize {
        self as usize
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct View {
    pub id: String,
    pub image: Image,
    pub mask: Mask,
    pub camera: Camera,
    /// Ground-truth class map, when the dataset ships one.
    pub seg: Option<SegmentationMap>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub id: String,
    pub kind: SceneKind,
    pub views: Vec<View>,
    /// Views never drawn for training.
    pub held_out: Vec<usize>,
}

impl Scene {
    pub fn validate(&self) -> Result<()> {
        if self.views.is_empty() {
            bail!(Config, "scene {} has no views", self.id);
        }
        if self.kind == SceneKind::Singleview && self.views.len() != 1 {
            bail!(
                Config,
                "single-view scene {} has {} views",
                self.id,
                self.views.len()
            );
        }
        for v in &self.views {
            v.camera.validate()?;
            if v.image.channels != 3
                || (v.mask.width, v.mask.height) != (v.image.width, v.image.height)
            {
                bail!(
                    Config,
                    "view {} of scene {}: image and mask disagree",
                    v.id,
                    self.id
                );
            }
        }
        if self.held_out.iter().any(|&i| i >= self.views.len()) {
            bail!(
                Config,
                "scene {} holds out a view that does not exist",
                self.id
            );
        }
        if self.training_views().is_empty() {
            bail!(Config, "scene {} has no training views", self.id);
        }
        Ok(())
    }

    pub fn training_views(&self) -> Vec<usize> {
        (0..self.views.len())
            .filter(|i| !self.held_out.contains(i))
            .collect()
    }
}

/// Sampling weights over scene kinds, in [`SceneKind::ALL`] order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetMix {
    pub multiview_real: f64,
    pub multiview_synthetic: f64,
    pub singleview: f64,
    /// Probability that a multi-view draw uses the same view as input and target.
    pub p_same: f64,
}

impl Default for DatasetMix {
    fn default() -> Self {
        Self {
            multiview_real: 0.4,
            multiview_synthetic: 0.3,
            singleview: 0.3,
            p_same: 0.1,
        }
    }
}

impl DatasetMix {
    pub fn only(kind: SceneKind) -> Self {
        let mut w = [0.0; 3];
        w[kind.index()] = 1.0;
        Self {
            multiview_real: w[0],
            multiview_synthetic: w[1],
            singleview: w[2],
            p_same: 0.1,
        }
    }

    pub fn weights(&self) -> [f64; 3] {
        [
            self.multiview_real,
            self.multiview_synthetic,
            self.singleview,
        ]
    }

    pub fn validate(&self) -> Result<()> {
        let w = self.weights();
        if w.iter().any(|v| !(v.is_finite() && *v >= 0.0)) || w.iter().sum::<f64>() <= 0.0 {
            bail!(
                Config,
                "mix weights must be non-negative with a positive sum"
            );
        }
        if !(0.0..=1.0).contains(&self.p_same) {
            bail!(Config, "p_same must lie in [0, 1]");
        }
        Ok(())
    }
}

/// Scenes grouped by kind, checked against a mix.
pub struct Dataset<'a> {
    pub scenes: &'a [Scene],
    by_kind: [Vec<usize>; 3],
    mix: DatasetMix,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Pair {
    pub scene: usize,
    pub input: usize,
    pub target: usize,
}

impl<'a> Dataset<'a> {
    pub fn new(scenes: &'a [Scene], mix: &DatasetMix) -> Result<Self> {
        mix.validate()?;
        if scenes.is_empty() {
            bail!(Config, "dataset is empty");
        }
        let mut by_kind: [Vec<usize>; 3] = Default::default();
        for (i, s) in scenes.iter().enumerate() {
            s.validate()?;
            by_kind[s.kind.index()].push(i);
        }
        for (k, w) in SceneKind::ALL.iter().zip(mix.weights()) {
            if w > 0.0 && by_kind[k.index()].is_empty() {
                bail!(Config, "mix selects {k:?} scenes but none are loaded");
            }
        }
        Ok(Self {
            scenes,
            by_kind,
            mix: mix.clone(),
        })
    }

    /// Draw a kind by weight, a scene uniformly within it, then an
    /// input/target pair among its training views.
    pub fn sample_pair(&self, rng: &mut Rng) -> Pair {
        let w = self.mix.weights();
        let total: f64 = w.iter().sum();
        let mut u = rng.uniform() * total;
        let mut kind = 0;
        for (k, wk) in w.iter().enumerate() {
            if *wk > 0.0 {
                kind = k;
                if u < *wk {
                    break;
                }
                u -= wk;
            }
        }
        let list = &self.by_kind[kind];
        let scene = list[rng.below(list.len())];
        let views = self.scenes[scene].training_views();
        let (input, target) =
            if self.scenes[scene].kind == SceneKind::Singleview || views.len() == 1 {
                (views[0], views[0])
            } else if rng.uniform() < self.mix.p_same {
                let v = views[rng.below(views.len())];
                (v, v)
            } else {
                let a = rng.below(views.len());
                let mut b = rng.below(views.len() - 1);
                if b >= a {
                    b += 1;
                }
                (views[a], views[b])
            };
        Pair {
            scene,
            input,
            target,
        }
    }
}

/// Camera matching [`crate::preprocess::prepare`]'s centered square crop
/// followed by a resize to `size`.
pub fn aligned_camera(camera: &Camera, size: usize) -> Camera {
    let side = camera.width.min(camera.height);
    let x0 = ((camera.width - side) / 2) as f64;
    let y0 = ((camera.height - side) / 2) as f64;
    let cropped = Camera {
        cx: camera.cx - x0,
        cy: camera.cy - y0,
        width: side,
        height: side,
        ..camera.clone()
    };
    cropped.resized(size, size)
}
