//! Canonical 3D representation: cameras, Gaussian primitives, and the
//! procedural head template grouped into 16-vertex patches.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
use crate::rng::Rng;

/// Vertices (and Gaussians) per 3D patch.
pub const PATCH_MEMBERS: usize = 16;

/// Semi-axes of the template ellipsoid (x: width, y: height, z: depth).
pub const TEMPLATE_SEMI_AXES: [f64; 3] = [1.0, 1.3, 1.1];

/// Default distance of orbit cameras from the origin.
pub const DEFAULT_CAMERA_DISTANCE: f64 = 2.7;

pub type Vec3 = [f64; 3];

/// Pinhole camera with a world-to-camera rigid transform.
///
/// Camera space is right-handed with `+z` forward, `+x` right and `+y` down;
/// pixel `(row, col)` has its center at `(col + 0.5, row + 0.5)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    /// Row-major 3x3 world-to-camera rotation.
    #[serde(rename = "R")]
    pub rotation: [f64; 9],
    /// World-to-camera translation.
    #[serde(rename = "t")]
    pub translation: Vec3,
    pub near: f64,
    pub far: f64,
}

impl Camera {
    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            bail!(InvalidArgument, "focal lengths must be positive");
        }
        if !(self.near > 0.0 && self.near < self.far) {
            bail!(InvalidArgument, "require 0 < near < far");
        }
        if self.width == 0 || self.height == 0 {
            bail!(InvalidArgument, "image size must be nonzero");
        }
        let r = &self.rotation;
        for i in 0..3 {
            for j in 0..3 {
                let dot: f64 = (0..3).map(|k| r[k * 3 + i] * r[k * 3 + j]).sum();
                let expect = if i == j { 1.0 } else { 0.0 };
                if (dot - expect).abs() > 1e-6 {
                    bail!(InvalidArgument, "rotation is not orthonormal");
                }
            }
        }
        let all = self.rotation.iter().chain(&self.translation);
        if !all.copied().chain([self.cx, self.cy]).all(f64::is_finite) {
            bail!(InvalidArgument, "camera has non-finite entries");
        }
        Ok(())
    }

    /// Camera at `eye` looking at `target`, with world `+y` as up.
    pub fn look_at(eye: Vec3, target: Vec3, width: usize, height: usize, focal: f64) -> Self {
        let forward = normalize(sub(target, eye));
        let mut right = cross(forward, [0.0, 1.0, 0.0]);
        if norm(right) < 1e-9 {
            // Looking straight up or down: pick world +x as image right.
            right = [1.0, 0.0, 0.0];
        }
        let right = normalize(right);
        let down = cross(forward, right);
        let rotation = [
            right[0], right[1], right[2], down[0], down[1], down[2], forward[0], forward[1],
            forward[2],
        ];
        let translation = [-dot3(right, eye), -dot3(down, eye), -dot3(forward, eye)];
        Self {
            fx: focal,
            fy: focal,
            cx: width as f64 / 2.0,
            cy: height as f64 / 2.0,
            width,
            height,
            rotation,
            translation,
            near: 0.1,
            far: 100.0,
        }
    }

    /// Camera on a sphere around the origin. Yaw rotates about world `+y`
    /// starting from the frontal (`+z`) side; positive pitch looks from above.
    pub fn orbit(yaw_deg: f64, pitch_deg: f64, distance: f64, width: usize, height: usize) -> Self {
        let (yaw, pitch) = (yaw_deg.to_radians(), pitch_deg.to_radians());
        let eye = [
            distance * libm::sin(yaw) * libm::cos(pitch),
            distance * libm::sin(pitch),
            distance * libm::cos(yaw) * libm::cos(pitch),
        ];
        Self::look_at(eye, [0.0; 3], width, height, 0.9 * width as f64)
    }

    pub fn world_to_camera(&self, p: Vec3) -> Vec3 {
        let r = &self.rotation;
        [
            r[0] * p[0] + r[1] * p[1] + r[2] * p[2] + self.translation[0],
            r[3] * p[0] + r[4] * p[1] + r[5] * p[2] + self.translation[1],
            r[6] * p[0] + r[7] * p[1] + r[8] * p[2] + self.translation[2],
        ]
    }

    /// Camera center in world coordinates, `-Rᵀ t`.
    pub fn center(&self) -> Vec3 {
        let r = &self.rotation;
        let t = &self.translation;
        [
            -(r[0] * t[0] + r[3] * t[1] + r[6] * t[2]),
            -(r[1] * t[0] + r[4] * t[1] + r[7] * t[2]),
            -(r[2] * t[0] + r[5] * t[1] + r[8] * t[2]),
        ]
    }

    /// Viewing direction in world coordinates (third row of the rotation).
    pub fn optical_axis(&self) -> Vec3 {
        [self.rotation[6], self.rotation[7], self.rotation[8]]
    }

    /// Same camera at a different resolution, intrinsics scaled to match.
    pub fn resized(&self, width: usize, height: usize) -> Self {
        let sx = width as f64 / self.width as f64;
        let sy = height as f64 / self.height as f64;
        Self {
            fx: self.fx * sx,
            fy: self.fy * sy,
            cx: self.cx * sx,
            cy: self.cy * sy,
            width,
            height,
            ..self.clone()
        }
    }
}

/// Structure-of-arrays Gaussian primitives with DC-only RGB color.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GaussianCloud {
    pub positions: Vec<Vec3>,
    /// Per-axis standard deviations.
    pub scales: Vec<Vec3>,
    /// Unit quaternions `(w, x, y, z)`.
    pub rotations: Vec<[f64; 4]>,
    pub opacities: Vec<f64>,
    pub colors: Vec<Vec3>,
}

impl GaussianCloud {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn push(
        &mut self,
        position: Vec3,
        scale: Vec3,
        rotation: [f64; 4],
        opacity: f64,
        color: Vec3,
    ) {
        self.positions.push(position);
        self.scales.push(scale);
        self.rotations.push(rotation);
        self.opacities.push(opacity);
        self.colors.push(color);
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.positions.len();
        if [
            self.scales.len(),
            self.rotations.len(),
            self.opacities.len(),
            self.colors.len(),
        ]
        .iter()
        .any(|&l| l != n)
        {
            bail!(
                InvariantViolation,
                "attribute arrays have different lengths"
            );
        }
        for i in 0..n {
            if !self.positions[i].iter().all(|v| v.is_finite()) {
                bail!(InvariantViolation, "gaussian {i}: non-finite position");
            }
            if !self.scales[i].iter().all(|&s| s > 0.0 && s.is_finite()) {
                bail!(InvariantViolation, "gaussian {i}: scales must be positive");
            }
            let q = self.rotations[i];
            let qn = libm::sqrt(q.iter().map(|v| v * v).sum::<f64>());
            if (qn - 1.0).abs() > 1e-5 {
                bail!(
                    InvariantViolation,
                    "gaussian {i}: quaternion is not unit-norm"
                );
            }
            let o = self.opacities[i];
            if !(o > 0.0 && o < 1.0) {
                bail!(InvariantViolation, "gaussian {i}: opacity outside (0,1)");
            }
            if !self.colors[i].iter().all(|c| (0.0..=1.0).contains(c)) {
                bail!(InvariantViolation, "gaussian {i}: color outside [0,1]");
            }
        }
        Ok(())
    }
}

/// Canonical head-shaped point set grouped into 16-vertex patches.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TemplatePointSet {
    pub vertices: Vec<Vec3>,
    pub patch_index: Vec<u32>,
    pub patch_centroids: Vec<Vec3>,
    /// Member vertex ids of each patch, ascending.
    pub members: Vec<[u32; PATCH_MEMBERS]>,
}

impl TemplatePointSet {
    /// Assemble from vertices and a patch assignment, checking that every
    /// patch has exactly 16 members.
    pub fn from_parts(vertices: Vec<Vec3>, patch_index: Vec<u32>) -> Result<Self> {
        let v = vertices.len();
        if v == 0 || !v.is_multiple_of(PATCH_MEMBERS) {
            bail!(
                InvalidArgument,
                "vertex count {v} is not a positive multiple of 16"
            );
        }
        if patch_index.len() != v {
            bail!(
                InvalidArgument,
                "patch_index length {} != vertex count {v}",
                patch_index.len()
            );
        }
        let np = v / PATCH_MEMBERS;
        let mut members = vec![[0u32; PATCH_MEMBERS]; np];
        let mut fill = vec![0usize; np];
        for (vi, &p) in patch_index.iter().enumerate() {
            let p = p as usize;
            if p >= np {
                bail!(InvalidArgument, "patch index {p} out of range");
            }
            if fill[p] == PATCH_MEMBERS {
                bail!(InvalidArgument, "patch {p} has more than 16 members");
            }
            members[p][fill[p]] = vi as u32;
            fill[p] += 1;
        }
        let mut patch_centroids = vec![[0.0; 3]; np];
        for (p, m) in members.iter().enumerate() {
            let mut c = [0.0; 3];
            for &vi in m {
                for k in 0..3 {
                    c[k] += vertices[vi as usize][k];
                }
            }
            patch_centroids[p] = c.map(|x| x / PATCH_MEMBERS as f64);
        }
        Ok(Self {
            vertices,
            patch_index,
            patch_centroids,
            members,
        })
    }

    pub fn num_patches(&self) -> usize {
        self.members.len()
    }

    pub fn num_vertices(&self) -> usize {
        self.vertices.len()
    }
}

/// Deterministic head-proportioned template with `16 * num_patches` vertices.
///
/// Vertices lie on the ellipsoid with [`TEMPLATE_SEMI_AXES`], placed by a
/// Fibonacci lattice around the `y` axis whose azimuth phase is derived from
/// `seed`, then stored in Morton order so patch `p` owns vertices
/// `16p .. 16p + 16`.
pub fn build_template(num_patches: usize, seed: u64) -> Result<TemplatePointSet> {
    if num_patches < 1 {
        bail!(InvalidArgument, "num_patches must be at least 1");
    }
    let v = num_patches * PATCH_MEMBERS;
    let phase = Rng::derived(seed, "template-phase").uniform();
    let golden = (libm::sqrt(5.0) - 1.0) / 2.0;
    let [ax, ay, az] = TEMPLATE_SEMI_AXES;
    let raw: Vec<Vec3> = (0..v)
        .map(|i| {
            let h = 1.0 - (2.0 * i as f64 + 1.0) / v as f64;
            let r = libm::sqrt((1.0 - h * h).max(0.0));
            let turn = i as f64 * golden + phase;
            let theta = core::f64::consts::TAU * (turn - libm::floor(turn));
            [ax * r * libm::sin(theta), ay * h, az * r * libm::cos(theta)]
        })
        .collect();
    let order = morton_order(&raw);
    let vertices: Vec<Vec3> = order.iter().map(|&i| raw[i]).collect();
    let patch_index = (0..v).map(|i| (i / PATCH_MEMBERS) as u32).collect();
    TemplatePointSet::from_parts(vertices, patch_index)
}

/// Assign vertices to 16-member patches by Morton order of their quantized
/// coordinates (10 bits per axis over the bounding box).
pub fn group_patches(vertices: &[Vec3]) -> Result<Vec<u32>> {
    if vertices.is_empty() || !vertices.len().is_multiple_of(PATCH_MEMBERS) {
        bail!(
            InvalidArgument,
            "vertex count {} is not a positive multiple of 16",
            vertices.len()
        );
    }
    let order = morton_order(vertices);
    let mut patch = vec![0u32; vertices.len()];
    for (rank, &vi) in order.iter().enumerate() {
        patch[vi] = (rank / PATCH_MEMBERS) as u32;
    }
    Ok(patch)
}

/// Vertex ids sorted by Morton code, ties broken by coordinates then id.
fn morton_order(vertices: &[Vec3]) -> Vec<usize> {
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for p in vertices {
        for k in 0..3 {
            lo[k] = lo[k].min(p[k]);
            hi[k] = hi[k].max(p[k]);
        }
    }
    let codes: Vec<u32> = vertices
        .iter()
        .map(|p| {
            let q: [u32; 3] = core::array::from_fn(|k| {
                let extent = hi[k] - lo[k];
                if extent > 0.0 {
                    let t = (p[k] - lo[k]) / extent;
                    libm::floor(t * 1024.0).clamp(0.0, 1023.0) as u32
                } else {
                    0
                }
            });
            morton3(q)
        })
        .collect();
    let mut order: Vec<usize> = (0..vertices.len()).collect();
    order.sort_by(|&a, &b| {
        codes[a]
            .cmp(&codes[b])
            .then_with(|| vertices[a][0].total_cmp(&vertices[b][0]))
            .then_with(|| vertices[a][1].total_cmp(&vertices[b][1]))
            .then_with(|| vertices[a][2].total_cmp(&vertices[b][2]))
            .then_with(|| a.cmp(&b))
    });
    order
}

/// Interleave three 10-bit coordinates, `x` in the lowest position.
pub fn morton3(q: [u32; 3]) -> u32 {
    fn spread(mut x: u32) -> u32 {
        x &= 0x3ff;
        x = (x | (x << 16)) & 0x030000ff;
        x = (x | (x << 8)) & 0x0300f00f;
        x = (x | (x << 4)) & 0x030c30c3;
        x = (x | (x << 2)) & 0x09249249;
        x
    }
    spread(q[0]) | (spread(q[1]) << 1) | (spread(q[2]) << 2)
}

pub(crate) fn sub(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub(crate) fn dot3(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub(crate) fn cross(a: Vec3, b: Vec3) -> Vec3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

pub(crate) fn norm(a: Vec3) -> f64 {
    libm::sqrt(dot3(a, a))
}

pub(crate) fn normalize(a: Vec3) -> Vec3 {
    let n = norm(a);
    [a[0] / n, a[1] / n, a[2] / n]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn template_sizes() {
        let t = build_template(4096, 0).unwrap();
        assert_eq!(t.num_vertices(), 65_536);
        assert_eq!(t.num_patches(), 4096);
        let t1 = build_template(1, 0).unwrap();
        assert_eq!(t1.num_vertices(), 16);
        assert!(t1.patch_index.iter().all(|&p| p == 0));
        assert!(build_template(0, 0).is_err());
    }

    #[test]
    fn template_is_deterministic() {
        let a = build_template(256, 7).unwrap();
        let b = build_template(256, 7).unwrap();
        let bits = |t: &TemplatePointSet| -> Vec<u64> {
            t.vertices
                .iter()
                .flat_map(|v| v.iter().map(|x| x.to_bits()))
                .collect()
        };
        assert_eq!(bits(&a), bits(&b));
        let c = build_template(256, 8).unwrap();
        assert_ne!(bits(&a), bits(&c));
    }

    #[test]
    fn template_lies_on_ellipsoid_and_centroids_match() {
        let t = build_template(64, 3).unwrap();
        for v in &t.vertices {
            let s: f64 = (0..3).map(|k| (v[k] / TEMPLATE_SEMI_AXES[k]).powi(2)).sum();
            assert!((s - 1.0).abs() < 1e-9);
        }
        for (p, m) in t.members.iter().enumerate() {
            for k in 0..3 {
                let mean = m.iter().map(|&i| t.vertices[i as usize][k]).sum::<f64>() / 16.0;
                assert!((mean - t.patch_centroids[p][k]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn grouping_rejects_bad_counts() {
        assert!(group_patches(&[[0.0; 3]; 15]).is_err());
        assert!(group_patches(&[]).is_err());
    }

    #[test]
    fn identical_points_form_one_patch() {
        assert_eq!(group_patches(&[[0.3; 3]; 16]).unwrap(), vec![0; 16]);
    }

    #[test]
    fn orbit_camera_is_valid_and_faces_origin() {
        for (yaw, pitch) in [(0.0, 0.0), (90.0, 10.0), (180.0, -30.0), (0.0, 90.0)] {
            let cam = Camera::orbit(yaw, pitch, 2.7, 64, 64);
            cam.validate().unwrap();
            let c = cam.center();
            assert!((norm(c) - 2.7).abs() < 1e-9);
            let origin = cam.world_to_camera([0.0; 3]);
            assert!(origin[0].abs() < 1e-9 && origin[1].abs() < 1e-9);
            assert!((origin[2] - 2.7).abs() < 1e-9);
        }
        // World up projects upward in the image (negative camera y).
        let cam = Camera::orbit(0.0, 0.0, 2.7, 64, 64);
        assert!(cam.world_to_camera([0.0, 1.0, 0.0])[1] < 0.0);
    }

    #[test]
    fn camera_validation_catches_bad_rotation() {
        let mut cam = Camera::orbit(0.0, 0.0, 2.7, 8, 8);
        cam.rotation[0] = 1.1;
        assert!(cam.validate().is_err());
        let mut cam = Camera::orbit(0.0, 0.0, 2.7, 8, 8);
        cam.near = 0.0;
        assert!(cam.validate().is_err());
    }
}
