//! Image metrics and the novel / extreme view evaluation protocols.

use alloc::boxed::Box;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::backbone::{build_backbone, BackboneConfig, BuiltBackbone};
use crate::dataset::{aligned_camera, Scene};
use crate::error::{bail, Result};
use crate::gaussian::Camera;
use crate::image::{check_same_shape, Image};
use crate::loss::feature_cosine_distance;
use crate::model::{Model, ModelInput};
use crate::preprocess::{prepare, PreprocessConfig};

/// Peak signal-to-noise ratio for data range 1; `+inf` when the images are equal.
pub fn psnr(pred: &Image, target: &Image) -> Result<f64> {
    check_same_shape(pred, target)?;
    let n = pred.data.len().max(1) as f64;
    let mse = pred
        .data
        .iter()
        .zip(&target.data)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / n;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * libm::log10(1.0 / mse))
}

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

fn ssim_kernel() -> [f64; SSIM_WINDOW] {
    let mut k = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    for (i, v) in k.iter_mut().enumerate() {
        let d = i as f64 - c;
        *v = libm::exp(-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA));
    }
    let s: f64 = k.iter().sum();
    k.map(|v| v / s)
}

/// Mean SSIM over channels and every fully contained 11x11 Gaussian
/// window (sigma 1.5, data range 1).
pub fn ssim(pred: &Image, target: &Image) -> Result<f64> {
    check_same_shape(pred, target)?;
    let (w, h, ch) = (pred.width, pred.height, pred.channels);
    if w < SSIM_WINDOW || h < SSIM_WINDOW {
        bail!(
            InvalidArgument,
            "image {w}x{h} is smaller than the {SSIM_WINDOW}-pixel SSIM window"
        );
    }
    let k = ssim_kernel();
    let (c1, c2) = ((SSIM_K1 * SSIM_K1), (SSIM_K2 * SSIM_K2));
    let (ow, oh) = (w - SSIM_WINDOW + 1, h - SSIM_WINDOW + 1);
    // Separable filtering of x, y, x², y², xy.
    let mut total = 0.0;
    for c in 0..ch {
        let get = |img: &Image, x: usize, y: usize| img.data[(y * w + x) * ch + c];
        let mut rows = alloc::vec![[0.0f64; 5]; ow * h];
        for y in 0..h {
            for ox in 0..ow {
                let mut acc = [0.0; 5];
                for (i, kv) in k.iter().enumerate() {
                    let a = get(pred, ox + i, y);
                    let b = get(target, ox + i, y);
                    acc[0] += kv * a;
                    acc[1] += kv * b;
                    acc[2] += kv * a * a;
                    acc[3] += kv * b * b;
                    acc[4] += kv * a * b;
                }
                rows[y * ow + ox] = acc;
            }
        }
        for oy in 0..oh {
            for ox in 0..ow {
                let mut m = [0.0; 5];
                for (i, kv) in k.iter().enumerate() {
                    let r = rows[(oy + i) * ow + ox];
                    for j in 0..5 {
                        m[j] += kv * r[j];
                    }
                }
                let (mx, my) = (m[0], m[1]);
                let vx = m[2] - mx * mx;
                let vy = m[3] - my * my;
                let cov = m[4] - mx * my;
                total += ((2.0 * mx * my + c1) * (2.0 * cov + c2))
                    / ((mx * mx + my * my + c1) * (vx + vy + c2));
            }
        }
    }
    Ok(total / (ch * ow * oh) as f64)
}

/// Feature cosine distance without gradients, identical to the training loss.
pub fn feature_distance(pred: &Image, target: &Image, backbone: &BuiltBackbone) -> Result<f64> {
    feature_cosine_distance(pred, target, backbone, &backbone.config().tap_layers)
}

/// Angle in radians between the optical axes of two cameras.
pub fn axis_angle(a: &Camera, b: &Camera) -> f64 {
    let (u, v) = (a.optical_axis(), b.optical_axis());
    let dot: f64 = (0..3).map(|k| u[k] * v[k]).sum();
    libm::acos(dot.clamp(-1.0, 1.0))
}

fn elevation(c: &Camera) -> f64 {
    libm::asin(c.optical_axis()[1].clamp(-1.0, 1.0))
}

const ANGLE_TOL: f64 = 1e-9;

/// Index pairs `(i, j)`, `i < j`, whose optical-axis angle reaches the
/// nearest-rank 90th percentile of all pairwise angles, plus the pair with
/// the largest elevation difference. Empty when fewer than two cameras or
/// when all cameras look the same way.
pub fn select_extreme_pairs(cameras: &[Camera]) -> Vec<(usize, usize)> {
    let n = cameras.len();
    let mut all = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            all.push((axis_angle(&cameras[i], &cameras[j]), i, j));
        }
    }
    if all.is_empty() {
        return Vec::new();
    }
    let mut angles: Vec<f64> = all.iter().map(|a| a.0).collect();
    angles.sort_by(f64::total_cmp);
    if angles[angles.len() - 1] <= ANGLE_TOL {
        return Vec::new();
    }
    let rank = (0.9 * angles.len() as f64).ceil() as usize;
    let threshold = angles[rank.max(1) - 1];
    let mut out: Vec<(usize, usize)> = all
        .iter()
        .filter(|(a, _, _)| *a >= threshold - ANGLE_TOL)
        .map(|&(_, i, j)| (i, j))
        .collect();
    let mut best: Option<(f64, usize, usize)> = None;
    for &(_, i, j) in &all {
        let d = libm::fabs(elevation(&cameras[i]) - elevation(&cameras[j]));
        if best.is_none_or(|b| d > b.0) {
            best = Some((d, i, j));
        }
    }
    if let Some((d, i, j)) = best {
        if d > ANGLE_TOL && !out.contains(&(i, j)) {
            out.push((i, j));
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProtocolName {
    Novel,
    Extreme,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairRef {
    pub scene: String,
    pub input: usize,
    pub target: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalProtocol {
    pub name: ProtocolName,
    pub pairs: Vec<PairRef>,
}

impl EvalProtocol {
    /// Novel: every training view against every held-out view (all ordered
    /// pairs of distinct views when a scene holds none out).
    /// Extreme: [`select_extreme_pairs`] per scene.
    pub fn build(name: ProtocolName, scenes: &[Scene]) -> Self {
        let mut pairs = Vec::new();
        for s in scenes {
            let n = s.views.len();
            let list: Vec<(usize, usize)> = match name {
                ProtocolName::Novel if s.held_out.is_empty() => (0..n)
                    .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
                    .collect(),
                ProtocolName::Novel => s
                    .training_views()
                    .into_iter()
                    .flat_map(|i| s.held_out.iter().map(move |&j| (i, j)))
                    .collect(),
                ProtocolName::Extreme => {
                    let cams: Vec<Camera> = s.views.iter().map(|v| v.camera.clone()).collect();
                    select_extreme_pairs(&cams)
                }
            };
            pairs.extend(list.into_iter().map(|(input, target)| PairRef {
                scene: s.id.clone(),
                input,
                target,
            }));
        }
        Self { name, pairs }
    }
}

/// Anything that can predict a target view from an input view.
pub trait Predictor {
    fn preprocess(&self) -> &PreprocessConfig;
    fn predict(&self, scene: &Scene, input: usize, target_camera: &Camera) -> Result<Image>;
}

/// Optional face-identity distance network.
pub trait IdentityMetric {
    fn distance(&self, pred: &Image, target: &Image) -> Result<f64>;
}

/// Reconstruct from the input view, render at the target camera, refine.
pub struct ModelPredictor<'a> {
    pub model: &'a Model,
    pub refine: bool,
}

impl Predictor for ModelPredictor<'_> {
    fn preprocess(&self) -> &PreprocessConfig {
        &self.model.config.preprocess
    }

    fn predict(&self, scene: &Scene, input: usize, target_camera: &Camera) -> Result<Image> {
        let v = &scene.views[input];
        let li = self.model.lift_input(&v.image, Some(&v.mask), &v.id)?;
        let cloud = self.model.reconstruct_with(ModelInput::Lift(&li))?;
        Ok(self.model.render(&cloud, target_camera, self.refine)?.image)
    }
}

/// Returns the ground-truth target image of whichever view has the target camera.
pub struct OracleModel {
    pub preprocess: PreprocessConfig,
}

impl Predictor for OracleModel {
    fn preprocess(&self) -> &PreprocessConfig {
        &self.preprocess
    }

    fn predict(&self, scene: &Scene, _input: usize, target_camera: &Camera) -> Result<Image> {
        let s = self.preprocess.size;
        for v in &scene.views {
            if aligned_camera(&v.camera, s) == *target_camera {
                return Ok(prepare(&v.image, Some(&v.mask), &v.id, &self.preprocess)?.pixels);
            }
        }
        bail!(
            InvalidArgument,
            "no view of {} has the requested camera",
            scene.id
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairMetrics {
    pub scene: String,
    pub input: usize,
    pub target: usize,
    pub psnr: f64,
    pub ssim: f64,
    pub feature_distance: f64,
    /// `None` when no identity network is configured.
    pub identity: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanMetrics {
    pub label: String,
    pub pairs: usize,
    pub psnr: f64,
    pub ssim: f64,
    pub feature_distance: f64,
    pub identity: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsTable {
    pub protocol: ProtocolName,
    pub pairs: Vec<PairMetrics>,
    pub scenes: Vec<MeanMetrics>,
    pub aggregate: MeanMetrics,
}

fn mean_of(label: &str, rows: &[&PairMetrics]) -> MeanMetrics {
    let n = rows.len().max(1) as f64;
    let avg = |f: &dyn Fn(&PairMetrics) -> f64| rows.iter().map(|r| f(r)).sum::<f64>() / n;
    let identity = if !rows.is_empty() && rows.iter().all(|r| r.identity.is_some()) {
        Some(avg(&|r| r.identity.unwrap_or(0.0)))
    } else {
        None
    };
    MeanMetrics {
        label: label.into(),
        pairs: rows.len(),
        psnr: avg(&|r| r.psnr),
        ssim: avg(&|r| r.ssim),
        feature_distance: avg(&|r| r.feature_distance),
        identity,
    }
}

pub struct Evaluator {
    pub backbone: BuiltBackbone,
    pub identity: Option<Box<dyn IdentityMetric>>,
}

impl Evaluator {
    /// Feature distance over the builtin semantic backbone, no identity metric.
    pub fn builtin() -> Result<Self> {
        Ok(Self {
            backbone: build_backbone(&BackboneConfig::semantic_default(), None)?,
            identity: None,
        })
    }

    pub fn metrics(&self, pred: &Image, target: &Image) -> Result<(f64, f64, f64, Option<f64>)> {
        let identity = match &self.identity {
            Some(m) => Some(m.distance(pred, target)?),
            None => None,
        };
        Ok((
            psnr(pred, target)?,
            ssim(pred, target)?,
            feature_distance(pred, target, &self.backbone)?,
            identity,
        ))
    }

    /// Evaluate every pair of `protocol` in order.
    pub fn run_protocol(
        &self,
        predictor: &dyn Predictor,
        scenes: &[Scene],
        protocol: &EvalProtocol,
    ) -> Result<MetricsTable> {
        let cfg = predictor.preprocess();
        let mut pairs = Vec::with_capacity(protocol.pairs.len());
        for p in &protocol.pairs {
            let Some(scene) = scenes.iter().find(|s| s.id == p.scene) else {
                bail!(Config, "protocol references unknown scene {}", p.scene);
            };
            if p.input >= scene.views.len() || p.target >= scene.views.len() {
                bail!(Config, "protocol references a missing view of {}", p.scene);
            }
            let tv = &scene.views[p.target];
            let target = prepare(&tv.image, Some(&tv.mask), &tv.id, cfg)?.pixels;
            let camera = aligned_camera(&tv.camera, cfg.size);
            let pred = predictor.predict(scene, p.input, &camera)?;
            let (psnr, ssim, feature_distance, identity) = self.metrics(&pred, &target)?;
            pairs.push(PairMetrics {
                scene: p.scene.clone(),
                input: p.input,
                target: p.target,
                psnr,
                ssim,
                feature_distance,
                identity,
            });
        }
        let mut ids: Vec<&str> = Vec::new();
        for p in &pairs {
            if !ids.contains(&p.scene.as_str()) {
                ids.push(&p.scene);
            }
        }
        let scenes_mean = ids
            .iter()
            .map(|id| {
                let rows: Vec<&PairMetrics> = pairs.iter().filter(|p| p.scene == *id).collect();
                mean_of(id, &rows)
            })
            .collect();
        let all: Vec<&PairMetrics> = pairs.iter().collect();
        let aggregate = mean_of("all", &all);
        Ok(MetricsTable {
            protocol: protocol.name,
            pairs,
            scenes: scenes_mean,
            aggregate,
        })
    }
}
