//! Reconstruction losses: multi-layer feature cosine distance over frozen
//! backbones, L1, and a pluggable learned-perceptual slot.

use alloc::boxed::Box;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::backbone::{
    build_backbone, features_of, validate_taps, BackboneConfig, FeatureBackbone,
};
use crate::error::{bail, Result};
use crate::image::{check_same_shape, Image};
use crate::tensor::Tensor;

/// Norm below which a feature vector counts as zero.
pub const COSINE_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TermKind {
    FeatureCosine,
    L1,
    LpipsSlot,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Base,
    Refiner,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossTerm {
    pub kind: TermKind,
    #[serde(default)]
    pub backbone: Option<BackboneConfig>,
    #[serde(default)]
    pub tap_layers: Vec<usize>,
    pub weight: f64,
}

impl LossTerm {
    pub fn feature_cosine(backbone: BackboneConfig, weight: f64) -> Self {
        Self {
            kind: TermKind::FeatureCosine,
            tap_layers: backbone.tap_layers.clone(),
            backbone: Some(backbone),
            weight,
        }
    }

    pub fn simple(kind: TermKind, weight: f64) -> Self {
        Self {
            kind,
            backbone: None,
            tap_layers: Vec::new(),
            weight,
        }
    }

    pub fn label(&self) -> String {
        match (&self.kind, &self.backbone) {
            (TermKind::FeatureCosine, Some(b)) => alloc::format!("feature_cosine:{}", b.name),
            (TermKind::FeatureCosine, None) => "feature_cosine".into(),
            (TermKind::L1, _) => "l1".into(),
            (TermKind::LpipsSlot, _) => "lpips_slot".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub terms: Vec<LossTerm>,
    pub phase: Phase,
}

pub const PRESETS: [&str; 5] = [
    "base_full",
    "base_dino_only",
    "base_sam_only",
    "base_lpips_l1",
    "refiner",
];

impl LossConfig {
    pub fn preset(name: &str) -> Result<Self> {
        let semantic = || LossTerm::feature_cosine(BackboneConfig::semantic_default(), 1.0);
        let segmentation = || LossTerm::feature_cosine(BackboneConfig::segmentation_default(), 1.0);
        let (terms, phase) = match name {
            "base_full" => (alloc::vec![semantic(), segmentation()], Phase::Base),
            "base_dino_only" => (alloc::vec![semantic()], Phase::Base),
            "base_sam_only" => (alloc::vec![segmentation()], Phase::Base),
            "base_lpips_l1" => (
                alloc::vec![
                    LossTerm::simple(TermKind::LpipsSlot, 1.0),
                    LossTerm::simple(TermKind::L1, 1.0)
                ],
                Phase::Base,
            ),
            "refiner" => (
                alloc::vec![
                    semantic(),
                    LossTerm::simple(TermKind::L1, 1.0),
                    LossTerm::simple(TermKind::LpipsSlot, 1.0)
                ],
                Phase::Refiner,
            ),
            other => bail!(Config, "unknown loss preset {other:?}"),
        };
        Ok(Self { terms, phase })
    }

    pub fn validate(&self) -> Result<()> {
        if self.terms.is_empty() || !self.terms.iter().any(|t| t.weight > 0.0) {
            bail!(Config, "loss needs at least one term with positive weight");
        }
        for t in &self.terms {
            if !(t.weight >= 0.0) || !t.weight.is_finite() {
                bail!(
                    Config,
                    "loss term {} has invalid weight {}",
                    t.label(),
                    t.weight
                );
            }
            if t.kind == TermKind::FeatureCosine {
                let Some(b) = &t.backbone else {
                    bail!(Config, "feature_cosine term needs a backbone");
                };
                b.validate()?;
                validate_taps(&b.name, &t.tap_layers, b.depth)?;
            }
        }
        Ok(())
    }
}

/// A learned perceptual distance network, differentiable in `pred`.
pub trait PerceptualMetric: Send + Sync {
    fn distance(
        &self,
        g: &mut Graph,
        pred: Var,
        target: Var,
        width: usize,
        height: usize,
    ) -> Result<Var>;
}

/// Mean over layers and tokens of `1 - cos(pred_token, target_token)`.
///
/// Evaluated as `|p̂ - t̂|² / 2` on the normalized tokens, which equals
/// `1 - cos` for unit vectors and is exactly zero for identical inputs. A
/// token whose norm is below [`COSINE_EPS`] normalizes to zero and adds 1/2
/// for each side that vanishes, so it counts as cosine 0. Target features
/// are constants; gradients reach `pred` only.
pub fn feature_cosine_from_features(g: &mut Graph, pred: &[Var], target: &[Tensor]) -> Result<Var> {
    if pred.len() != target.len() || pred.is_empty() {
        bail!(InvalidArgument, "feature layer count mismatch");
    }
    let mut total: Option<Var> = None;
    for (&p, t) in pred.iter().zip(target) {
        if g.shape(p) != t.shape() {
            bail!(InvalidArgument, "feature shape mismatch");
        }
        let tokens = t.rows.max(1) as f64;
        let pn = g.row_normalize(p, COSINE_EPS);
        let (tn, t_zero) = normalize_rows(t);
        let p_zero = zero_rows(g.value(pn));
        let tn = g.constant(tn);
        let diff = g.sub(pn, tn);
        let sq = g.square(diff);
        let mean = g.mean(sq);
        let half = g.scale(mean, 0.5 * t.cols as f64);
        let dist = if p_zero + t_zero > 0 {
            g.add_scalar(half, 0.5 * (p_zero + t_zero) as f64 / tokens)
        } else {
            half
        };
        total = Some(match total {
            None => dist,
            Some(acc) => g.add(acc, dist),
        });
    }
    let total = total.expect("at least one layer");
    Ok(g.scale(total, 1.0 / pred.len() as f64))
}

fn zero_rows(t: &Tensor) -> usize {
    (0..t.rows)
        .filter(|&r| t.row(r).iter().all(|&v| v == 0.0))
        .count()
}

fn normalize_rows(t: &Tensor) -> (Tensor, usize) {
    let mut out = t.clone();
    let mut zeros = 0;
    for r in 0..out.rows {
        let row = out.row_mut(r);
        let n = libm::sqrt(row.iter().map(|v| v * v).sum::<f64>());
        if n < COSINE_EPS {
            row.fill(0.0);
            zeros += 1;
        } else {
            row.iter_mut().for_each(|v| *v /= n);
        }
    }
    (out, zeros)
}

pub fn feature_cosine_loss(
    g: &mut Graph,
    pred: Var,
    target: &Image,
    backbone: &dyn FeatureBackbone,
    taps: &[usize],
) -> Result<Var> {
    if g.shape(pred) != (target.width * target.height, target.channels) {
        bail!(InvalidArgument, "prediction and target shapes differ");
    }
    let tf = features_of(backbone, target, taps)?;
    let pf = backbone.features(g, pred, target.width, target.height, taps)?;
    feature_cosine_from_features(g, &pf, &tf)
}

/// Gradient-free feature cosine distance between two images.
pub fn feature_cosine_distance(
    pred: &Image,
    target: &Image,
    backbone: &dyn FeatureBackbone,
    taps: &[usize],
) -> Result<f64> {
    check_same_shape(pred, target)?;
    let mut g = Graph::inference();
    let p = g.constant(image_tensor(pred));
    let l = feature_cosine_loss(&mut g, p, target, backbone, taps)?;
    Ok(g.value(l).data[0])
}

pub fn l1(g: &mut Graph, pred: Var, target: Var) -> Var {
    let d = g.sub(pred, target);
    let a = g.abs(d);
    g.mean(a)
}

pub fn l1_loss(pred: &Image, target: &Image) -> Result<f64> {
    check_same_shape(pred, target)?;
    let n = pred.data.len().max(1) as f64;
    Ok(pred
        .data
        .iter()
        .zip(&target.data)
        .map(|(a, b)| (a - b).abs())
        .sum::<f64>()
        / n)
}

/// Mean of L1 at full, half and quarter resolution (average pooling).
/// Stands in for a learned perceptual metric when none is configured.
pub fn multiscale_l1(g: &mut Graph, pred: Var, target: Var, width: usize, height: usize) -> Var {
    let mut p = pred;
    let mut t = target;
    let (mut w, mut h) = (width, height);
    let mut total = l1(g, p, t);
    let mut count = 1.0;
    for _ in 0..2 {
        if w % 2 != 0 || h % 2 != 0 || w < 2 || h < 2 {
            break;
        }
        p = g.avg_pool2(p, h, w);
        t = g.avg_pool2(t, h, w);
        w /= 2;
        h /= 2;
        let term = l1(g, p, t);
        total = g.add(total, term);
        count += 1.0;
    }
    g.scale(total, 1.0 / count)
}

pub fn image_tensor(img: &Image) -> Tensor {
    Tensor::from_vec(img.width * img.height, img.channels, img.data.clone())
}

/// Loss terms with their backbones instantiated.
pub struct LossModule {
    pub config: LossConfig,
    backbones: Vec<Option<Box<dyn FeatureBackbone>>>,
    lpips: Option<Box<dyn PerceptualMetric>>,
}

/// Target image with per-term backbone features precomputed.
pub struct PreparedTarget {
    pub image: Image,
    features: Vec<Option<Vec<Tensor>>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TermValue {
    pub name: String,
    pub weight: f64,
    pub value: f64,
}

impl LossModule {
    /// Instantiate builtin backbones for every feature term.
    pub fn new(config: &LossConfig) -> Result<Self> {
        config.validate()?;
        let backbones = config
            .terms
            .iter()
            .map(|t| match (&t.kind, &t.backbone) {
                (TermKind::FeatureCosine, Some(b)) => {
                    build_backbone(b, None).map(|b| Some(Box::new(b) as Box<dyn FeatureBackbone>))
                }
                _ => Ok(None),
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            config: config.clone(),
            backbones,
            lpips: None,
        })
    }

    /// Replace the backbone of term `index`.
    pub fn with_backbone(mut self, index: usize, backbone: Box<dyn FeatureBackbone>) -> Self {
        self.backbones[index] = Some(backbone);
        self
    }

    pub fn with_perceptual_metric(mut self, metric: Box<dyn PerceptualMetric>) -> Self {
        self.lpips = Some(metric);
        self
    }

    pub fn prepare_target(&self, target: &Image) -> Result<PreparedTarget> {
        let features = self
            .config
            .terms
            .iter()
            .zip(&self.backbones)
            .map(|(t, b)| match b {
                Some(b) if t.weight > 0.0 => {
                    features_of(b.as_ref(), target, &t.tap_layers).map(Some)
                }
                _ => Ok(None),
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(PreparedTarget {
            image: target.clone(),
            features,
        })
    }

    /// Weighted sum of the positive-weight terms and their individual values.
    pub fn composite(
        &self,
        g: &mut Graph,
        pred: Var,
        target: &PreparedTarget,
    ) -> Result<(Var, Vec<TermValue>)> {
        let (w, h) = (target.image.width, target.image.height);
        if g.shape(pred) != (w * h, target.image.channels) {
            bail!(InvalidArgument, "prediction and target shapes differ");
        }
        let tvar = g.constant(image_tensor(&target.image));
        let mut total: Option<Var> = None;
        let mut breakdown = Vec::new();
        for (i, term) in self.config.terms.iter().enumerate() {
            if term.weight <= 0.0 {
                continue;
            }
            let v = match term.kind {
                TermKind::FeatureCosine => {
                    let b = self.backbones[i]
                        .as_ref()
                        .expect("feature term has a backbone");
                    let tf = target.features[i]
                        .as_ref()
                        .expect("target features prepared");
                    let pf = b.features(g, pred, w, h, &term.tap_layers)?;
                    feature_cosine_from_features(g, &pf, tf)?
                }
                TermKind::L1 => l1(g, pred, tvar),
                TermKind::LpipsSlot => match &self.lpips {
                    Some(m) => m.distance(g, pred, tvar, w, h)?,
                    None => multiscale_l1(g, pred, tvar, w, h),
                },
            };
            breakdown.push(TermValue {
                name: term.label(),
                weight: term.weight,
                value: g.value(v).data[0],
            });
            let weighted = g.scale(v, term.weight);
            total = Some(match total {
                None => weighted,
                Some(acc) => g.add(acc, weighted),
            });
        }
        Ok((
            total.expect("validated config has a positive term"),
            breakdown,
        ))
    }

    /// Composite loss between two images without gradients.
    pub fn evaluate(&self, pred: &Image, target: &Image) -> Result<(f64, Vec<TermValue>)> {
        check_same_shape(pred, target)?;
        let prepared = self.prepare_target(target)?;
        let mut g = Graph::inference();
        let p = g.constant(image_tensor(pred));
        let (v, b) = self.composite(&mut g, p, &prepared)?;
        Ok((g.value(v).data[0], b))
    }
}
