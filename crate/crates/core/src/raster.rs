//! Reference differentiable Gaussian-splat renderer.
//!
//! Each Gaussian is projected with the EWA (local affine) approximation,
//! dilated by [`DILATION`] px², and alpha-composited front to back in global
//! depth order. The footprint is truncated at Mahalanobis radius
//! [`CUTOFF_SIGMA`] and shifted so it reaches zero continuously at the cutoff,
//! which keeps the render continuous in every parameter.

use alloc::vec;
use alloc::vec::Vec;

use crate::autograd::{Graph, Op, Var};
use crate::error::Result;
use crate::gaussian::{Camera, GaussianCloud};
use crate::image::Image;
use crate::tensor::Tensor;

/// Per-pixel alpha ceiling.
pub const ALPHA_MAX: f64 = 0.999;
/// Added to the diagonal of every projected 2D covariance (px²).
pub const DILATION: f64 = 0.3;
/// Footprint truncation radius in standard deviations.
pub const CUTOFF_SIGMA: f64 = 5.0;
/// Quaternions shorter than this render as the identity rotation.
pub const MIN_QUAT_NORM: f64 = 1e-8;
/// Projected covariances with a larger condition number are skipped.
pub const MAX_CONDITION: f64 = 1e12;

/// Diagnostics of one render.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct RasterStats {
    /// Gaussians in front of the near plane or beyond the far plane.
    pub clipped: usize,
    /// Gaussians whose projected covariance was numerically singular.
    pub singular: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RenderOutput {
    pub image: Image,
    /// Accumulated opacity per pixel, row-major.
    pub alpha: Vec<f64>,
    /// Expected depth under the compositing weights (0 where alpha is 0).
    pub depth: Vec<f64>,
    pub stats: RasterStats,
}

/// Render a Gaussian cloud.
pub fn rasterize(
    cloud: &GaussianCloud,
    camera: &Camera,
    background: [f64; 3],
) -> Result<RenderOutput> {
    cloud.validate()?;
    camera.validate()?;
    let flat = FlatCloud::from_cloud(cloud);
    let fwd = forward(&flat, camera, background, false);
    Ok(RenderOutput {
        image: Image::new(camera.width, camera.height, 3, fwd.image),
        alpha: fwd.alpha,
        depth: fwd.depth,
        stats: fwd.stats,
    })
}

/// Gaussian attributes as graph nodes: positions/scales/colors `N x 3`,
/// rotations `N x 4` (need not be normalized), opacities `N x 1`.
#[derive(Clone, Copy, Debug)]
pub struct GaussianVars {
    pub positions: Var,
    pub scales: Var,
    pub rotations: Var,
    pub opacities: Var,
    pub colors: Var,
}

pub struct RenderVar {
    /// `(height*width) x 3` image node.
    pub image: Var,
    pub alpha: Vec<f64>,
    pub depth: Vec<f64>,
    pub stats: RasterStats,
}

impl GaussianVars {
    pub fn constant(g: &mut Graph, cloud: &GaussianCloud) -> Self {
        let f = FlatCloud::from_cloud(cloud);
        let n = cloud.len();
        Self {
            positions: g.constant(Tensor::from_vec(n, 3, f.positions)),
            scales: g.constant(Tensor::from_vec(n, 3, f.scales)),
            rotations: g.constant(Tensor::from_vec(n, 4, f.rotations)),
            opacities: g.constant(Tensor::from_vec(n, 1, f.opacities)),
            colors: g.constant(Tensor::from_vec(n, 3, f.colors)),
        }
    }

    pub fn inputs(g: &mut Graph, cloud: &GaussianCloud) -> Self {
        let f = FlatCloud::from_cloud(cloud);
        let n = cloud.len();
        Self {
            positions: g.input(Tensor::from_vec(n, 3, f.positions)),
            scales: g.input(Tensor::from_vec(n, 3, f.scales)),
            rotations: g.input(Tensor::from_vec(n, 4, f.rotations)),
            opacities: g.input(Tensor::from_vec(n, 1, f.opacities)),
            colors: g.input(Tensor::from_vec(n, 3, f.colors)),
        }
    }

    fn as_array(&self) -> [Var; 5] {
        [
            self.positions,
            self.scales,
            self.rotations,
            self.opacities,
            self.colors,
        ]
    }

    /// Read the current values back into a cloud (rotations normalized).
    pub fn to_cloud(&self, g: &Graph) -> GaussianCloud {
        let p = g.value(self.positions);
        let s = g.value(self.scales);
        let r = g.value(self.rotations);
        let o = g.value(self.opacities);
        let c = g.value(self.colors);
        let n = p.rows;
        let mut cloud = GaussianCloud::default();
        for i in 0..n {
            let q = [r.get(i, 0), r.get(i, 1), r.get(i, 2), r.get(i, 3)];
            let qn = libm::sqrt(q.iter().map(|v| v * v).sum::<f64>());
            cloud.push(
                [p.get(i, 0), p.get(i, 1), p.get(i, 2)],
                [s.get(i, 0), s.get(i, 1), s.get(i, 2)],
                if qn >= MIN_QUAT_NORM {
                    q.map(|v| v / qn)
                } else {
                    [1.0, 0.0, 0.0, 0.0]
                },
                o.get(i, 0),
                [c.get(i, 0), c.get(i, 1), c.get(i, 2)],
            );
        }
        cloud
    }
}

/// Render on a graph so the image can be differentiated w.r.t. every attribute.
pub fn rasterize_graph(
    g: &mut Graph,
    vars: GaussianVars,
    camera: &Camera,
    background: [f64; 3],
) -> RenderVar {
    let inputs = vars.as_array();
    let n = g.shape(vars.positions).0;
    let check = |v: Var, c: usize| assert_eq!(g.shape(v), (n, c), "rasterize: attribute shape");
    check(vars.scales, 3);
    check(vars.rotations, 4);
    check(vars.opacities, 1);
    check(vars.colors, 3);
    let flat = FlatCloud {
        positions: g.value(vars.positions).data.clone(),
        scales: g.value(vars.scales).data.clone(),
        rotations: g.value(vars.rotations).data.clone(),
        opacities: g.value(vars.opacities).data.clone(),
        colors: g.value(vars.colors).data.clone(),
    };
    let needs_grad = inputs.iter().any(|&v| g.needs_grad(v));
    let fwd = forward(&flat, camera, background, needs_grad);
    let stats = fwd.stats;
    let (w, h) = (camera.width, camera.height);
    let image = Tensor::from_vec(w * h, 3, fwd.image);
    let alpha = fwd.alpha;
    let depth = fwd.depth;
    let tape = RasterTape {
        inputs,
        cloud: flat,
        camera: camera.clone(),
        background,
        cache: fwd.cache,
    };
    let image = g.push(
        image,
        Op::Rasterize(alloc::boxed::Box::new(tape)),
        needs_grad,
    );
    RenderVar {
        image,
        alpha,
        depth,
        stats,
    }
}

#[derive(Clone, Debug)]
struct FlatCloud {
    positions: Vec<f64>,
    scales: Vec<f64>,
    rotations: Vec<f64>,
    opacities: Vec<f64>,
    colors: Vec<f64>,
}

impl FlatCloud {
    fn from_cloud(c: &GaussianCloud) -> Self {
        Self {
            positions: c.positions.iter().flatten().copied().collect(),
            scales: c.scales.iter().flatten().copied().collect(),
            rotations: c.rotations.iter().flatten().copied().collect(),
            opacities: c.opacities.clone(),
            colors: c.colors.iter().flatten().copied().collect(),
        }
    }

    fn len(&self) -> usize {
        self.opacities.len()
    }
}

/// Per-Gaussian projection state kept for the backward pass.
#[derive(Clone, Debug, Default)]
struct Projected {
    /// Camera-space center.
    t: [f64; 3],
    mean: [f64; 2],
    /// Inverse of the dilated 2D covariance: `[A, B, C]` for `[[A, B], [B, C]]`.
    conic: [f64; 3],
    /// `J W`, the 2x3 map from world offsets to pixel offsets.
    jw: [[f64; 3]; 2],
    /// 3D covariance.
    sigma: [[f64; 3]; 3],
    /// `R(q̂) diag(s)`.
    m: [[f64; 3]; 3],
    rot: [[f64; 3]; 3],
    qhat: [f64; 4],
    qnorm: f64,
}

#[derive(Clone, Copy, Debug)]
struct Contribution {
    gaussian: u32,
    footprint: f64,
    /// `exp(power)` before the continuity shift; the footprint's derivative
    /// w.r.t. the power.
    dfootprint: f64,
    alpha: f64,
    clamped: bool,
    transmittance: f64,
}

#[derive(Debug)]
struct Cache {
    projected: Vec<Projected>,
    pixel_start: Vec<usize>,
    contributions: Vec<Contribution>,
    final_transmittance: Vec<f64>,
}

struct Forward {
    image: Vec<f64>,
    alpha: Vec<f64>,
    depth: Vec<f64>,
    stats: RasterStats,
    cache: Option<Cache>,
}

fn cutoff_shift() -> f64 {
    libm::exp(-0.5 * CUTOFF_SIGMA * CUTOFF_SIGMA)
}

fn quat_to_rot(q: [f64; 4]) -> [[f64; 3]; 3] {
    let [w, x, y, z] = q;
    [
        [
            1.0 - 2.0 * (y * y + z * z),
            2.0 * (x * y - w * z),
            2.0 * (x * z + w * y),
        ],
        [
            2.0 * (x * y + w * z),
            1.0 - 2.0 * (x * x + z * z),
            2.0 * (y * z - w * x),
        ],
        [
            2.0 * (x * z - w * y),
            2.0 * (y * z + w * x),
            1.0 - 2.0 * (x * x + y * y),
        ],
    ]
}

fn project(cloud: &FlatCloud, i: usize, cam: &Camera) -> Option<Projected> {
    let p = [
        cloud.positions[3 * i],
        cloud.positions[3 * i + 1],
        cloud.positions[3 * i + 2],
    ];
    let t = cam.world_to_camera(p);
    if !(t[2] >= cam.near && t[2] <= cam.far) {
        return None;
    }
    let q = [
        cloud.rotations[4 * i],
        cloud.rotations[4 * i + 1],
        cloud.rotations[4 * i + 2],
        cloud.rotations[4 * i + 3],
    ];
    let qnorm = libm::sqrt(q.iter().map(|v| v * v).sum::<f64>());
    let qhat = if qnorm >= MIN_QUAT_NORM {
        q.map(|v| v / qnorm)
    } else {
        [1.0, 0.0, 0.0, 0.0]
    };
    let rot = quat_to_rot(qhat);
    let s = [
        cloud.scales[3 * i],
        cloud.scales[3 * i + 1],
        cloud.scales[3 * i + 2],
    ];
    let mut m = [[0.0; 3]; 3];
    for r in 0..3 {
        for c in 0..3 {
            m[r][c] = rot[r][c] * s[c];
        }
    }
    let mut sigma = [[0.0; 3]; 3];
    for r in 0..3 {
        for c in 0..3 {
            sigma[r][c] = (0..3).map(|k| m[r][k] * m[c][k]).sum();
        }
    }
    let (tx, ty, tz) = (t[0], t[1], t[2]);
    let j = [
        [cam.fx / tz, 0.0, -cam.fx * tx / (tz * tz)],
        [0.0, cam.fy / tz, -cam.fy * ty / (tz * tz)],
    ];
    let w = &cam.rotation;
    let mut jw = [[0.0; 3]; 2];
    for r in 0..2 {
        for c in 0..3 {
            jw[r][c] = (0..3).map(|k| j[r][k] * w[k * 3 + c]).sum();
        }
    }
    let mut cov = [[0.0; 2]; 2];
    for r in 0..2 {
        for c in 0..2 {
            let mut acc = 0.0;
            for a in 0..3 {
                for b in 0..3 {
                    acc += jw[r][a] * sigma[a][b] * jw[c][b];
                }
            }
            cov[r][c] = acc;
        }
    }
    let a = cov[0][0] + DILATION;
    let b = cov[0][1];
    let c = cov[1][1] + DILATION;
    let half_tr = 0.5 * (a + c);
    let disc = libm::sqrt((0.25 * (a - c) * (a - c) + b * b).max(0.0));
    let (lmax, lmin) = (half_tr + disc, half_tr - disc);
    if !(lmin > 0.0) || lmax / lmin > MAX_CONDITION || !lmax.is_finite() {
        return None;
    }
    let det = a * c - b * b;
    Some(Projected {
        t,
        mean: [cam.fx * tx / tz + cam.cx, cam.fy * ty / tz + cam.cy],
        conic: [c / det, -b / det, a / det],
        jw,
        sigma,
        m,
        rot,
        qhat,
        qnorm,
    })
}

fn forward(cloud: &FlatCloud, cam: &Camera, bg: [f64; 3], keep: bool) -> Forward {
    let (w, h) = (cam.width, cam.height);
    let n = cloud.len();
    let mut stats = RasterStats::default();
    let mut projected: Vec<Option<Projected>> = Vec::with_capacity(n);
    for i in 0..n {
        let p = project(cloud, i, cam);
        if p.is_none() {
            let t = cam.world_to_camera([
                cloud.positions[3 * i],
                cloud.positions[3 * i + 1],
                cloud.positions[3 * i + 2],
            ]);
            if t[2] >= cam.near && t[2] <= cam.far {
                stats.singular += 1;
            } else {
                stats.clipped += 1;
            }
        }
        projected.push(p);
    }
    let mut order: Vec<usize> = (0..n).filter(|&i| projected[i].is_some()).collect();
    order.sort_by(|&a, &b| {
        let za = projected[a].as_ref().map_or(0.0, |p| p.t[2]);
        let zb = projected[b].as_ref().map_or(0.0, |p| p.t[2]);
        za.total_cmp(&zb).then(a.cmp(&b))
    });

    let shift = cutoff_shift();
    let norm = 1.0 / (1.0 - shift);
    let max_power = 0.5 * CUTOFF_SIGMA * CUTOFF_SIGMA;
    let mut per_pixel: Vec<Vec<Contribution>> = vec![Vec::new(); w * h];
    for &i in &order {
        let p = projected[i].as_ref().expect("visible gaussian");
        let [ca, cb, cc] = p.conic;
        let det = ca * cc - cb * cb;
        // Half-extents of the cutoff ellipse along x and y.
        let rx = CUTOFF_SIGMA * libm::sqrt(cc / det);
        let ry = CUTOFF_SIGMA * libm::sqrt(ca / det);
        let x0 = libm::floor(p.mean[0] - rx - 0.5).max(0.0) as usize;
        let y0 = libm::floor(p.mean[1] - ry - 0.5).max(0.0) as usize;
        let x1 = libm::ceil(p.mean[0] + rx - 0.5).min(w as f64 - 1.0);
        let y1 = libm::ceil(p.mean[1] + ry - 0.5).min(h as f64 - 1.0);
        if x1 < 0.0 || y1 < 0.0 {
            continue;
        }
        let (x1, y1) = (x1 as usize, y1 as usize);
        let opacity = cloud.opacities[i];
        for py in y0..=y1 {
            let dy = py as f64 + 0.5 - p.mean[1];
            for px in x0..=x1 {
                let dx = px as f64 + 0.5 - p.mean[0];
                let power = 0.5 * (ca * dx * dx + 2.0 * cb * dx * dy + cc * dy * dy);
                if power >= max_power {
                    continue;
                }
                let e = libm::exp(-power);
                let footprint = (e - shift) * norm;
                let raw = opacity * footprint;
                let clamped = raw > ALPHA_MAX;
                per_pixel[py * w + px].push(Contribution {
                    gaussian: i as u32,
                    footprint,
                    dfootprint: e * norm,
                    alpha: if clamped { ALPHA_MAX } else { raw },
                    clamped,
                    transmittance: 0.0,
                });
            }
        }
    }

    let mut image = vec![0.0; w * h * 3];
    let mut alpha = vec![0.0; w * h];
    let mut depth = vec![0.0; w * h];
    let mut final_t = vec![1.0; w * h];
    for (pix, list) in per_pixel.iter_mut().enumerate() {
        let mut t = 1.0;
        let mut rgb = [0.0; 3];
        let mut z = 0.0;
        for c in list.iter_mut() {
            c.transmittance = t;
            let i = c.gaussian as usize;
            let wgt = c.alpha * t;
            for k in 0..3 {
                rgb[k] += cloud.colors[3 * i + k] * wgt;
            }
            z += projected[i].as_ref().map_or(0.0, |p| p.t[2]) * wgt;
            t *= 1.0 - c.alpha;
        }
        for k in 0..3 {
            image[pix * 3 + k] = rgb[k] + t * bg[k];
        }
        alpha[pix] = 1.0 - t;
        depth[pix] = if t < 1.0 { z / (1.0 - t) } else { 0.0 };
        final_t[pix] = t;
    }

    let cache = keep.then(|| {
        let mut pixel_start = Vec::with_capacity(w * h + 1);
        let mut contributions = Vec::new();
        for list in &per_pixel {
            pixel_start.push(contributions.len());
            contributions.extend_from_slice(list);
        }
        pixel_start.push(contributions.len());
        Cache {
            projected: projected
                .into_iter()
                .map(Option::unwrap_or_default)
                .collect(),
            pixel_start,
            contributions,
            final_transmittance: final_t,
        }
    });
    Forward {
        image,
        alpha,
        depth,
        stats,
        cache,
    }
}

/// Saved state of one differentiable render.
pub struct RasterTape {
    pub(crate) inputs: [Var; 5],
    cloud: FlatCloud,
    camera: Camera,
    background: [f64; 3],
    cache: Option<Cache>,
}

impl RasterTape {
    /// Gradients w.r.t. (positions, scales, rotations, opacities, colors)
    /// given the image gradient.
    pub(crate) fn backward(&self, d_image: &[f64]) -> [Vec<f64>; 5] {
        let n = self.cloud.len();
        let mut d_pos = vec![0.0; 3 * n];
        let mut d_scale = vec![0.0; 3 * n];
        let mut d_rot = vec![0.0; 4 * n];
        let mut d_opa = vec![0.0; n];
        let mut d_col = vec![0.0; 3 * n];
        let Some(cache) = &self.cache else {
            return [d_pos, d_scale, d_rot, d_opa, d_col];
        };
        // Per-Gaussian accumulators for the 2D mean and conic.
        let mut d_mean = vec![[0.0; 2]; n];
        let mut d_conic = vec![[0.0; 3]; n];
        let w = self.camera.width;
        let bg = self.background;
        let cloud = &self.cloud;
        for pix in 0..cache.pixel_start.len() - 1 {
            let list = &cache.contributions[cache.pixel_start[pix]..cache.pixel_start[pix + 1]];
            if list.is_empty() {
                continue;
            }
            let gc = [d_image[pix * 3], d_image[pix * 3 + 1], d_image[pix * 3 + 2]];
            if gc == [0.0; 3] {
                continue;
            }
            let tn = cache.final_transmittance[pix];
            let mut rest = [tn * bg[0], tn * bg[1], tn * bg[2]];
            let (px, py) = ((pix % w) as f64 + 0.5, (pix / w) as f64 + 0.5);
            for c in list.iter().rev() {
                let i = c.gaussian as usize;
                let col = [
                    cloud.colors[3 * i],
                    cloud.colors[3 * i + 1],
                    cloud.colors[3 * i + 2],
                ];
                let wgt = c.alpha * c.transmittance;
                let mut g_alpha = 0.0;
                for k in 0..3 {
                    d_col[3 * i + k] += gc[k] * wgt;
                    g_alpha += gc[k] * (c.transmittance * col[k] - rest[k] / (1.0 - c.alpha));
                    rest[k] += col[k] * wgt;
                }
                if c.clamped {
                    continue;
                }
                let o = cloud.opacities[i];
                d_opa[i] += g_alpha * c.footprint;
                // footprint = (exp(-power) - shift) * norm
                let g_power = -g_alpha * o * c.dfootprint;
                let p = &cache.projected[i];
                let dx = px - p.mean[0];
                let dy = py - p.mean[1];
                let [ca, cb, cc] = p.conic;
                d_conic[i][0] += g_power * 0.5 * dx * dx;
                d_conic[i][1] += g_power * dx * dy;
                d_conic[i][2] += g_power * 0.5 * dy * dy;
                // d power / d mean = -(K d)
                d_mean[i][0] -= g_power * (ca * dx + cb * dy);
                d_mean[i][1] -= g_power * (cb * dx + cc * dy);
            }
        }

        let cam = &self.camera;
        let wr = &cam.rotation;
        for i in 0..n {
            if d_mean[i] == [0.0; 2] && d_conic[i] == [0.0; 3] {
                continue;
            }
            let p = &cache.projected[i];
            let [ca, cb, cc] = p.conic;
            // Conic gradient as a symmetric matrix; B appears twice in the form.
            let gk = [
                [d_conic[i][0], 0.5 * d_conic[i][1]],
                [0.5 * d_conic[i][1], d_conic[i][2]],
            ];
            let k = [[ca, cb], [cb, cc]];
            // dL/dΣ2 = -K gK K
            let mut kg = [[0.0; 2]; 2];
            for r in 0..2 {
                for c in 0..2 {
                    kg[r][c] = k[r][0] * gk[0][c] + k[r][1] * gk[1][c];
                }
            }
            let mut g2 = [[0.0; 2]; 2];
            for r in 0..2 {
                for c in 0..2 {
                    g2[r][c] = -(kg[r][0] * k[0][c] + kg[r][1] * k[1][c]);
                }
            }
            // Σ2 = T Σ Tᵀ with T = J W.
            let t2 = &p.jw;
            let mut g_sigma = [[0.0; 3]; 3];
            for a in 0..3 {
                for b in 0..3 {
                    let mut acc = 0.0;
                    for r in 0..2 {
                        for c in 0..2 {
                            acc += t2[r][a] * g2[r][c] * t2[c][b];
                        }
                    }
                    g_sigma[a][b] = acc;
                }
            }
            // dL/dT = 2 G2 T Σ
            let mut g_t2 = [[0.0; 3]; 2];
            for r in 0..2 {
                for c in 0..3 {
                    let mut acc = 0.0;
                    for s in 0..2 {
                        for a in 0..3 {
                            acc += g2[r][s] * t2[s][a] * p.sigma[a][c];
                        }
                    }
                    g_t2[r][c] = 2.0 * acc;
                }
            }
            // dL/dJ = dL/dT Wᵀ
            let mut g_j = [[0.0; 3]; 2];
            for r in 0..2 {
                for c in 0..3 {
                    g_j[r][c] = (0..3).map(|a| g_t2[r][a] * wr[c * 3 + a]).sum();
                }
            }
            let [tx, ty, tz] = p.t;
            let (fx, fy) = (cam.fx, cam.fy);
            let tz2 = tz * tz;
            let tz3 = tz2 * tz;
            let mut g_t = [0.0; 3];
            g_t[0] += d_mean[i][0] * fx / tz;
            g_t[1] += d_mean[i][1] * fy / tz;
            g_t[2] += -d_mean[i][0] * fx * tx / tz2 - d_mean[i][1] * fy * ty / tz2;
            g_t[2] += -g_j[0][0] * fx / tz2;
            g_t[0] += -g_j[0][2] * fx / tz2;
            g_t[2] += g_j[0][2] * 2.0 * fx * tx / tz3;
            g_t[2] += -g_j[1][1] * fy / tz2;
            g_t[1] += -g_j[1][2] * fy / tz2;
            g_t[2] += g_j[1][2] * 2.0 * fy * ty / tz3;
            // t = W p + T
            for c in 0..3 {
                d_pos[3 * i + c] += (0..3).map(|r| wr[r * 3 + c] * g_t[r]).sum::<f64>();
            }
            // Σ = M Mᵀ, M = R diag(s)
            let mut g_m = [[0.0; 3]; 3];
            for r in 0..3 {
                for c in 0..3 {
                    g_m[r][c] = 2.0 * (0..3).map(|k| g_sigma[r][k] * p.m[k][c]).sum::<f64>();
                }
            }
            let s = [
                cloud.scales[3 * i],
                cloud.scales[3 * i + 1],
                cloud.scales[3 * i + 2],
            ];
            let mut g_r = [[0.0; 3]; 3];
            for r in 0..3 {
                for c in 0..3 {
                    d_scale[3 * i + c] += g_m[r][c] * p.rot[r][c];
                    g_r[r][c] = g_m[r][c] * s[c];
                }
            }
            if p.qnorm < MIN_QUAT_NORM {
                continue;
            }
            let gq = rot_backward(p.qhat, &g_r);
            let dot: f64 = (0..4).map(|k| gq[k] * p.qhat[k]).sum();
            for k in 0..4 {
                d_rot[4 * i + k] += (gq[k] - p.qhat[k] * dot) / p.qnorm;
            }
        }
        [d_pos, d_scale, d_rot, d_opa, d_col]
    }
}

/// Gradient of a loss w.r.t. a unit quaternion given its gradient w.r.t. the
/// rotation matrix.
fn rot_backward(q: [f64; 4], g: &[[f64; 3]; 3]) -> [f64; 4] {
    let [w, x, y, z] = q;
    let mut d = [0.0; 4];
    // Partial derivatives of each rotation entry w.r.t. (w, x, y, z).
    let partials: [[[f64; 4]; 3]; 3] = [
        [
            [0.0, 0.0, -4.0 * y, -4.0 * z],
            [-2.0 * z, 2.0 * y, 2.0 * x, -2.0 * w],
            [2.0 * y, 2.0 * z, 2.0 * w, 2.0 * x],
        ],
        [
            [2.0 * z, 2.0 * y, 2.0 * x, 2.0 * w],
            [0.0, -4.0 * x, 0.0, -4.0 * z],
            [-2.0 * x, -2.0 * w, 2.0 * z, 2.0 * y],
        ],
        [
            [-2.0 * y, 2.0 * z, -2.0 * w, 2.0 * x],
            [2.0 * x, 2.0 * w, 2.0 * z, 2.0 * y],
            [0.0, -4.0 * x, -4.0 * y, 0.0],
        ],
    ];
    for r in 0..3 {
        for c in 0..3 {
            for k in 0..4 {
                d[k] += g[r][c] * partials[r][c][k];
            }
        }
    }
    d
}

/// Which Gaussian attribute a checked parameter belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Attribute {
    Position,
    Scale,
    Rotation,
    Opacity,
    Color,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamRef {
    pub gaussian: usize,
    pub attribute: Attribute,
    pub component: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// Largest `|a - n| / (|a| + |n|)` over compared parameters; infinite if
    /// any gradient was NaN.
    pub max_relative_error: f64,
    pub worst: Option<ParamRef>,
    /// Parameters compared (those with `|a| + |n| > 1e-8`).
    pub compared: usize,
    /// Parameters of Gaussians whose alpha touches the clamp; not compared.
    pub excluded: Vec<ParamRef>,
    /// Parameters whose analytic or numeric gradient was NaN.
    pub nan: Vec<ParamRef>,
}

impl GradCheckReport {
    pub fn passed(&self, tolerance: f64) -> bool {
        self.nan.is_empty() && self.max_relative_error < tolerance
    }
}

/// Compare analytic gradients of `loss(render(cloud))` against central finite
/// differences of step `eps` for every attribute of every Gaussian.
///
/// `loss` builds a scalar from the `(h*w) x 3` image node.
pub fn check_gradients<F>(
    cloud: &GaussianCloud,
    camera: &Camera,
    background: [f64; 3],
    loss: F,
    eps: f64,
) -> GradCheckReport
where
    F: Fn(&mut Graph, Var) -> Var,
{
    let mut g = Graph::new();
    let vars = GaussianVars::inputs(&mut g, cloud);
    let render = rasterize_graph(&mut g, vars, camera, background);
    let l = loss(&mut g, render.image);
    let grads = g.backward(l);
    let arrays = vars.as_array();
    let analytic: Vec<Vec<f64>> = arrays
        .iter()
        .map(|&v| {
            grads
                .get(v)
                .map(|t| t.data.clone())
                .unwrap_or_else(|| vec![0.0; g.value(v).len()])
        })
        .collect();

    let clamp_band = near_clamp_gaussians(cloud, camera);
    let base = FlatCloud::from_cloud(cloud);
    let eval = |flat: &FlatCloud| -> f64 {
        let mut g = Graph::inference();
        let n = flat.len();
        let vars = GaussianVars {
            positions: g.constant(Tensor::from_vec(n, 3, flat.positions.clone())),
            scales: g.constant(Tensor::from_vec(n, 3, flat.scales.clone())),
            rotations: g.constant(Tensor::from_vec(n, 4, flat.rotations.clone())),
            opacities: g.constant(Tensor::from_vec(n, 1, flat.opacities.clone())),
            colors: g.constant(Tensor::from_vec(n, 3, flat.colors.clone())),
        };
        let r = rasterize_graph(&mut g, vars, camera, background);
        let l = loss(&mut g, r.image);
        g.value(l).data[0]
    };

    let attrs = [
        (Attribute::Position, 3),
        (Attribute::Scale, 3),
        (Attribute::Rotation, 4),
        (Attribute::Opacity, 1),
        (Attribute::Color, 3),
    ];
    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        worst: None,
        compared: 0,
        excluded: Vec::new(),
        nan: Vec::new(),
    };
    for (slot, &(attribute, width)) in attrs.iter().enumerate() {
        for gi in 0..cloud.len() {
            for component in 0..width {
                let pref = ParamRef {
                    gaussian: gi,
                    attribute,
                    component,
                };
                if clamp_band[gi] {
                    report.excluded.push(pref);
                    continue;
                }
                let idx = gi * width + component;
                let mut plus = base.clone();
                let mut minus = base.clone();
                field_mut(&mut plus, slot)[idx] += eps;
                field_mut(&mut minus, slot)[idx] -= eps;
                let numeric = (eval(&plus) - eval(&minus)) / (2.0 * eps);
                let a = analytic[slot][idx];
                if a.is_nan() || numeric.is_nan() {
                    report.nan.push(pref);
                    report.max_relative_error = f64::INFINITY;
                    continue;
                }
                let denom = a.abs() + numeric.abs();
                if denom <= 1e-8 {
                    continue;
                }
                report.compared += 1;
                let rel = (a - numeric).abs() / denom;
                if rel > report.max_relative_error {
                    report.max_relative_error = rel;
                    report.worst = Some(pref);
                }
            }
        }
    }
    report
}

fn field_mut(f: &mut FlatCloud, slot: usize) -> &mut Vec<f64> {
    match slot {
        0 => &mut f.positions,
        1 => &mut f.scales,
        2 => &mut f.rotations,
        3 => &mut f.opacities,
        _ => &mut f.colors,
    }
}

/// Gaussians whose unclamped alpha comes within 1e-3 of [`ALPHA_MAX`] at some
/// pixel; finite differences straddle the clamp kink for these.
fn near_clamp_gaussians(cloud: &GaussianCloud, camera: &Camera) -> Vec<bool> {
    let flat = FlatCloud::from_cloud(cloud);
    let fwd = forward(&flat, camera, [0.0; 3], true);
    let mut flags = vec![false; cloud.len()];
    if let Some(cache) = fwd.cache {
        for c in &cache.contributions {
            let i = c.gaussian as usize;
            if flat.opacities[i] * c.footprint >= ALPHA_MAX - 1e-3 {
                flags[i] = true;
            }
        }
    }
    flags
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn single(depth: f64, scale: f64, opacity: f64, color: [f64; 3]) -> GaussianCloud {
        let mut c = GaussianCloud::default();
        c.push(
            [0.0, 0.0, depth - 2.7],
            [scale; 3],
            [1.0, 0.0, 0.0, 0.0],
            opacity,
            color,
        );
        c
    }

    fn front_camera(size: usize) -> Camera {
        Camera::orbit(0.0, 0.0, 2.7, size, size)
    }

    #[test]
    fn empty_cloud_renders_background() {
        let cam = front_camera(8);
        let out = rasterize(&GaussianCloud::default(), &cam, [0.2, 0.4, 0.6]).unwrap();
        for px in out.image.data.chunks(3) {
            assert_eq!(px, &[0.2, 0.4, 0.6]);
        }
        assert!(out.alpha.iter().all(|&a| a == 0.0));
    }

    #[test]
    fn behind_camera_is_clipped_not_an_error() {
        let mut c = GaussianCloud::default();
        c.push(
            [0.0, 0.0, 5.0],
            [0.1; 3],
            [1.0, 0.0, 0.0, 0.0],
            0.5,
            [1.0, 0.0, 0.0],
        );
        let out = rasterize(&c, &front_camera(8), [1.0; 3]).unwrap();
        assert_eq!(out.stats.clipped, 1);
        assert!(out.alpha.iter().all(|&a| a == 0.0));
    }

    #[test]
    fn quaternion_backward_matches_finite_differences() {
        let mut rng = Rng::new(5);
        let q: [f64; 4] = core::array::from_fn(|_| rng.normal());
        let g: [[f64; 3]; 3] = core::array::from_fn(|_| core::array::from_fn(|_| rng.normal()));
        let f = |q: [f64; 4]| {
            let r = quat_to_rot(q);
            (0..3)
                .flat_map(|i| (0..3).map(move |j| (i, j)))
                .map(|(i, j)| r[i][j] * g[i][j])
                .sum::<f64>()
        };
        let d = rot_backward(q, &g);
        for k in 0..4 {
            let mut p = q;
            let mut m = q;
            p[k] += 1e-6;
            m[k] -= 1e-6;
            let num = (f(p) - f(m)) / 2e-6;
            assert!((num - d[k]).abs() < 1e-6, "component {k}");
        }
    }

    #[test]
    fn single_gaussian_center_and_corners() {
        let cam = front_camera(16);
        let cloud = single(2.0, 0.05, 0.9999, [1.0, 0.0, 0.0]);
        let out = rasterize(&cloud, &cam, [1.0; 3]).unwrap();
        let center = out.image.pixel(8, 8);
        assert!(center[0] > 0.99);
        assert_eq!(out.image.pixel(0, 0), [1.0; 3]);
        assert_eq!(out.image.pixel(15, 15), [1.0; 3]);
    }

    pub(crate) fn random_cloud(rng: &mut Rng, n: usize) -> GaussianCloud {
        let mut c = GaussianCloud::default();
        for _ in 0..n {
            let q: [f64; 4] = core::array::from_fn(|_| rng.normal());
            let qn = libm::sqrt(q.iter().map(|v| v * v).sum::<f64>());
            c.push(
                [
                    rng.range(-0.5, 0.5),
                    rng.range(-0.5, 0.5),
                    rng.range(-0.5, 0.5),
                ],
                [
                    rng.range(0.03, 0.2),
                    rng.range(0.03, 0.2),
                    rng.range(0.03, 0.2),
                ],
                q.map(|v| v / qn),
                rng.range(0.05, 0.95),
                [rng.uniform(), rng.uniform(), rng.uniform()],
            );
        }
        c
    }

    #[test]
    fn analytic_gradients_match_finite_differences() {
        let mut rng = Rng::new(11);
        let cam = Camera::orbit(20.0, 10.0, 2.7, 16, 16);
        let cloud = random_cloud(&mut rng, 8);
        let target: Vec<f64> = (0..16 * 16 * 3).map(|_| rng.uniform()).collect();
        let report = check_gradients(
            &cloud,
            &cam,
            [0.3, 0.6, 0.9],
            |g, img| {
                let t = g.constant(Tensor::from_vec(256, 3, target.clone()));
                let d = g.sub(img, t);
                let sq = g.square(d);
                g.mean(sq)
            },
            1e-4,
        );
        assert!(report.compared > 50);
        assert!(report.passed(1e-3), "{report:?}");
    }
}
