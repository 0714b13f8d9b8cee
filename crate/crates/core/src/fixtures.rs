//! Procedural head scenes: painted ellipsoids rendered through the module's
//! own rasterizer, with exact cameras, masks and class maps.

use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::dataset::{Scene, SceneKind, View};
use crate::edit_encoder::{class, SegmentationMap};
use crate::error::{bail, Result};
use crate::gaussian::{Camera, GaussianCloud, Vec3, DEFAULT_CAMERA_DISTANCE, TEMPLATE_SEMI_AXES};
use crate::image::{Image, Mask};
use crate::raster::rasterize;
use crate::rng::Rng;

/// (yaw, pitch) in degrees of the nine multi-view fixture cameras. The last
/// one lies between training views and is held out.
pub const FIXTURE_VIEWS: [(f64, f64); 9] = [
    (0.0, 0.0),
    (-35.0, 0.0),
    (35.0, 0.0),
    (-70.0, 5.0),
    (70.0, 5.0),
    (-20.0, 15.0),
    (20.0, -10.0),
    (0.0, -15.0),
    (15.0, 5.0),
];
pub const HELD_OUT_VIEW: usize = 8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FixtureConfig {
    pub size: usize,
    pub gaussians: usize,
    pub distance: f64,
    pub background: [f64; 3],
}

impl Default for FixtureConfig {
    fn default() -> Self {
        Self {
            size: 64,
            gaussians: 3000,
            distance: DEFAULT_CAMERA_DISTANCE,
            background: [1.0; 3],
        }
    }
}

/// Shape and paint of one procedural head.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadSpec {
    pub semi_axes: Vec3,
    pub skin: Vec3,
    pub hair: Vec3,
    pub iris: Vec3,
    pub lips: Vec3,
    /// Normalized height above which the scalp is hair.
    pub hairline: f64,
    pub eye_spacing: f64,
}

impl HeadSpec {
    pub fn random(rng: &mut Rng, saturated: bool) -> Self {
        let axes = TEMPLATE_SEMI_AXES.map(|a| a * rng.range(0.9, 1.05));
        let tone = rng.range(0.35, 0.95);
        let skin = if saturated {
            [
                rng.range(0.3, 1.0),
                rng.range(0.2, 0.9),
                rng.range(0.2, 1.0),
            ]
        } else {
            [
                tone,
                tone * rng.range(0.7, 0.85),
                tone * rng.range(0.55, 0.7),
            ]
        };
        let hair = if saturated {
            [rng.uniform(), rng.uniform(), rng.uniform()]
        } else {
            let h = rng.range(0.05, 0.8);
            [h, h * 0.75, h * 0.45]
        };
        Self {
            semi_axes: axes,
            skin,
            hair,
            iris: [
                rng.range(0.05, 0.3),
                rng.range(0.05, 0.35),
                rng.range(0.05, 0.4),
            ],
            lips: [
                rng.range(0.55, 0.85),
                rng.range(0.15, 0.35),
                rng.range(0.2, 0.35),
            ],
            hairline: rng.range(0.3, 0.55),
            eye_spacing: rng.range(0.28, 0.4),
        }
    }

    /// Class of a point on the unit sphere (before scaling by the semi-axes).
    pub fn class_at(&self, u: Vec3) -> u8 {
        let [x, y, z] = u;
        let near = |cx: f64, cy: f64, rx: f64, ry: f64| {
            let (dx, dy) = ((x - cx) / rx, (y - cy) / ry);
            dx * dx + dy * dy < 1.0
        };
        if y > self.hairline || (z < -0.25 && y > -0.35) {
            return class::HAIR;
        }
        if z > 0.5 {
            let s = self.eye_spacing;
            if near(s, 0.12, 0.11, 0.07) {
                return class::L_EYE;
            }
            if near(-s, 0.12, 0.11, 0.07) {
                return class::R_EYE;
            }
            if near(s, 0.27, 0.15, 0.04) {
                return class::L_BROW;
            }
            if near(-s, 0.27, 0.15, 0.04) {
                return class::R_BROW;
            }
            if near(0.0, -0.05, 0.09, 0.16) {
                return class::NOSE;
            }
            if near(0.0, -0.37, 0.26, 0.045) {
                return class::U_LIP;
            }
            if near(0.0, -0.46, 0.22, 0.045) {
                return class::L_LIP;
            }
        }
        class::SKIN
    }

    pub fn color_of(&self, c: u8) -> Vec3 {
        match c {
            class::HAIR => self.hair,
            class::L_EYE | class::R_EYE => self.iris,
            class::L_BROW | class::R_BROW => self.hair.map(|v| v * 0.6),
            class::U_LIP | class::L_LIP => self.lips,
            class::NOSE => self.skin.map(|v| v * 0.9),
            _ => self.skin,
        }
    }

    /// Surface Gaussians on a Fibonacci lattice with their class labels.
    pub fn cloud(&self, n: usize) -> (GaussianCloud, Vec<u8>) {
        let golden = (libm::sqrt(5.0) - 1.0) / 2.0;
        let spacing = libm::sqrt(4.0 * core::f64::consts::PI * 1.3 / n.max(1) as f64);
        let mut cloud = GaussianCloud::default();
        let mut classes = Vec::with_capacity(n);
        for i in 0..n {
            let h = 1.0 - (2.0 * i as f64 + 1.0) / n as f64;
            let r = libm::sqrt((1.0 - h * h).max(0.0));
            let theta = core::f64::consts::TAU * ((i as f64 * golden) % 1.0);
            let u = [r * libm::sin(theta), h, r * libm::cos(theta)];
            let c = self.class_at(u);
            let bump = if c == class::NOSE { 1.08 } else { 1.0 };
            let p = [0, 1, 2].map(|k| u[k] * self.semi_axes[k] * bump);
            cloud.push(
                p,
                [0.55 * spacing; 3],
                [1.0, 0.0, 0.0, 0.0],
                0.92,
                self.color_of(c),
            );
            classes.push(c);
        }
        (cloud, classes)
    }
}

/// Image, mask and class map of `cloud` seen from `camera`.
pub fn render_view(
    cloud: &GaussianCloud,
    classes: &[u8],
    camera: &Camera,
    background: [f64; 3],
) -> Result<(Image, Mask, SegmentationMap)> {
    if camera.width != camera.height {
        bail!(InvalidArgument, "fixture views are square");
    }
    let out = rasterize(cloud, camera, background)?;
    let mask = Mask::from_alpha(camera.width, camera.height, &out.alpha, 0.5);
    let mut present: Vec<u8> = classes.to_vec();
    present.sort_unstable();
    present.dedup();
    let n = camera.width * camera.height;
    let mut best = alloc::vec![(0.0f64, class::BACKGROUND); n];
    for &c in &present {
        let mut tinted = cloud.clone();
        for (col, &k) in tinted.colors.iter_mut().zip(classes) {
            *col = if k == c { [1.0; 3] } else { [0.0; 3] };
        }
        let cover = rasterize(&tinted, camera, [0.0; 3])?;
        for (px, b) in best.iter_mut().enumerate() {
            let w = cover.image.data[3 * px];
            if w > b.0 {
                *b = (w, c);
            }
        }
    }
    let seg = (0..n)
        .map(|px| {
            if mask.data[px] {
                best[px].1
            } else {
                class::BACKGROUND
            }
        })
        .collect();
    Ok((out.image, mask, SegmentationMap::new(camera.width, seg)?))
}

/// One procedural scene. Multi-view kinds get the nine [`FIXTURE_VIEWS`]
/// with [`HELD_OUT_VIEW`] held out; single-view scenes get one random pose.
pub fn fixture_scene(id: &str, kind: SceneKind, seed: u64, cfg: &FixtureConfig) -> Result<Scene> {
    let mut rng = Rng::derived(seed, id);
    let spec = HeadSpec::random(&mut rng, kind == SceneKind::MultiviewSynthetic);
    let (cloud, classes) = spec.cloud(cfg.gaussians);
    let poses: Vec<(f64, f64)> = match kind {
        SceneKind::Singleview => alloc::vec![(rng.range(-30.0, 30.0), rng.range(-10.0, 10.0))],
        _ => FIXTURE_VIEWS.to_vec(),
    };
    let views = poses
        .iter()
        .enumerate()
        .map(|(i, &(yaw, pitch))| {
            let camera = Camera::orbit(yaw, pitch, cfg.distance, cfg.size, cfg.size);
            let (image, mask, seg) = render_view(&cloud, &classes, &camera, cfg.background)?;
            Ok(View {
                id: alloc::format!("{id}/view{i}"),
                image,
                mask,
                camera,
                seg: Some(seg),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let held_out = if kind == SceneKind::Singleview {
        Vec::new()
    } else {
        alloc::vec![HELD_OUT_VIEW]
    };
    Ok(Scene {
        id: String::from(id),
        kind,
        views,
        held_out,
    })
}

/// `per_kind` scenes of every kind.
pub fn fixture_dataset(seed: u64, per_kind: usize, cfg: &FixtureConfig) -> Result<Vec<Scene>> {
    let mut out = Vec::new();
    for kind in SceneKind::ALL {
        for i in 0..per_kind {
            let tag = match kind {
                SceneKind::MultiviewReal => "real",
                SceneKind::MultiviewSynthetic => "synthetic",
                SceneKind::Singleview => "single",
            };
            out.push(fixture_scene(
                &alloc::format!("{tag}{i:03}"),
                kind,
                seed,
                cfg,
            )?);
        }
    }
    Ok(out)
}
