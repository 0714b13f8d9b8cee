use headlift_core::autograd::Graph;
use headlift_core::gaussian::{Camera, GaussianCloud};
use headlift_core::raster::{
    check_gradients, rasterize, rasterize_graph, Attribute, GaussianVars, ALPHA_MAX,
};
use headlift_core::rng::Rng;
use headlift_core::tensor::Tensor;
use proptest::prelude::*;

const IDENTITY: [f64; 4] = [1.0, 0.0, 0.0, 0.0];

fn front(size: usize) -> Camera {
    Camera::orbit(0.0, 0.0, 2.7, size, size)
}

/// Position at `depth` in front of [`front`] along its optical axis.
fn on_axis(depth: f64) -> [f64; 3] {
    [0.0, 0.0, depth - 2.7]
}

fn random_cloud(rng: &mut Rng, n: usize) -> GaussianCloud {
    let mut c = GaussianCloud::default();
    for _ in 0..n {
        let q: [f64; 4] = std::array::from_fn(|_| rng.normal());
        let qn = q.iter().map(|v| v * v).sum::<f64>().sqrt();
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
            rng.range(0.05, 0.9),
            [rng.uniform(), rng.uniform(), rng.uniform()],
        );
    }
    c
}

fn permuted(c: &GaussianCloud, perm: &[usize]) -> GaussianCloud {
    let mut out = GaussianCloud::default();
    for &i in perm {
        out.push(
            c.positions[i],
            c.scales[i],
            c.rotations[i],
            c.opacities[i],
            c.colors[i],
        );
    }
    out
}

fn l2_to(
    target: Tensor,
) -> impl Fn(&mut Graph, headlift_core::autograd::Var) -> headlift_core::autograd::Var {
    move |g, img| {
        let t = g.constant(target.clone());
        let d = g.sub(img, t);
        let s = g.square(d);
        g.sum(s)
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn gaussian_order_does_not_matter(seed in any::<u64>(), n in 1usize..24) {
        let mut rng = Rng::new(seed);
        let cloud = random_cloud(&mut rng, n);
        let mut perm: Vec<usize> = (0..n).collect();
        rng.shuffle(&mut perm);
        let cam = Camera::orbit(rng.range(-60.0, 60.0), rng.range(-30.0, 30.0), 2.7, 16, 16);
        let a = rasterize(&cloud, &cam, [1.0; 3]).unwrap();
        let b = rasterize(&permuted(&cloud, &perm), &cam, [1.0; 3]).unwrap();
        let worst = a.image.data.iter().zip(&b.image.data).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        prop_assert!(worst <= 1e-5, "max diff {worst}");
    }

    #[test]
    fn transparent_scenes_render_the_background_exactly(seed in any::<u64>(), n in 0usize..16, bg in prop::array::uniform3(0.0f64..=1.0)) {
        let mut rng = Rng::new(seed);
        let mut cloud = random_cloud(&mut rng, n);
        cloud.opacities.iter_mut().for_each(|o| *o = 0.0);
        let mut g = Graph::inference();
        let vars = GaussianVars::constant(&mut g, &cloud);
        let out = rasterize_graph(&mut g, vars, &front(12), bg);
        for px in g.value(out.image).data.chunks(3) {
            prop_assert_eq!(px, &bg[..]);
        }
    }

    #[test]
    fn more_opacity_never_lowers_the_contribution(lo in 0.001f64..0.999, hi in 0.001f64..0.999, scale in 0.02f64..0.3) {
        let (lo, hi) = (lo.min(hi), lo.max(hi));
        let render = |o: f64| {
            let mut c = GaussianCloud::default();
            c.push(on_axis(2.0), [scale; 3], IDENTITY, o, [1.0, 0.0, 0.0]);
            rasterize(&c, &front(15), [0.0; 3]).unwrap().image.pixel(7, 7)[0]
        };
        prop_assert!(render(hi) >= render(lo));
    }
}

#[test]
fn a_nearer_opaque_gaussian_hides_its_twin() {
    let (color, bg) = ([1.0, 0.0, 0.0], [1.0; 3]);
    let cam = front(15);
    let mut near = GaussianCloud::default();
    near.push(on_axis(1.0), [0.05; 3], IDENTITY, 0.9999, color);
    let mut both = near.clone();
    both.push(on_axis(2.0), [0.05; 3], IDENTITY, 0.9999, color);
    let a = rasterize(&near, &cam, bg).unwrap();
    let b = rasterize(&both, &cam, bg).unwrap();
    // Front-to-back compositing: whatever lies behind the near Gaussian is
    // weighted by its transmittance 1 - alpha_near.
    for (i, (pa, pb)) in a
        .image
        .data
        .chunks(3)
        .zip(b.image.data.chunks(3))
        .enumerate()
    {
        let t = 1.0 - a.alpha[i];
        for c in 0..3 {
            assert!(
                (pa[c] - pb[c]).abs() <= t * (color[c] - bg[c]).abs() + 1e-12,
                "pixel {i}"
            );
        }
    }
    // At the shared center both alphas sit on the clamp.
    let center = 7 * 15 + 7;
    assert!((a.alpha[center] - ALPHA_MAX).abs() < 1e-12);
    let t = 1.0 - ALPHA_MAX;
    for c in 0..3 {
        let only_near = ALPHA_MAX * color[c] + t * bg[c];
        let twin = ALPHA_MAX * color[c] + t * (ALPHA_MAX * color[c] + t * bg[c]);
        assert!((a.image.pixel(7, 7)[c] - only_near).abs() < 1e-12);
        assert!((b.image.pixel(7, 7)[c] - twin).abs() < 1e-12);
    }
    // Where the twins agree with the background the 1e-4 budget holds.
    assert!((a.image.pixel(7, 7)[0] - b.image.pixel(7, 7)[0]).abs() < 1e-4);
}

#[test]
fn gradients_match_finite_differences() {
    for seed in 0..5 {
        let mut rng = Rng::new(seed);
        let cloud = random_cloud(&mut rng, 4);
        let cam = front(16);
        let target = Tensor::from_vec(256, 3, (0..768).map(|_| rng.uniform()).collect());
        let report = check_gradients(&cloud, &cam, [1.0; 3], l2_to(target), 1e-4);
        assert!(report.passed(1e-3), "seed {seed}: {report:?}");
        assert!(report.compared > 0);
    }
}

#[test]
fn offscreen_cloud_has_zero_gradients() {
    let mut cloud = GaussianCloud::default();
    cloud.push([40.0, 0.0, 0.0], [0.05; 3], IDENTITY, 0.5, [0.2, 0.4, 0.6]);
    cloud.push([0.0, -40.0, 0.5], [0.05; 3], IDENTITY, 0.5, [0.9, 0.1, 0.1]);
    let target = Tensor::from_vec(64, 3, vec![0.3; 192]);
    let mut g = Graph::new();
    let vars = GaussianVars::inputs(&mut g, &cloud);
    let out = rasterize_graph(&mut g, vars, &front(8), [1.0; 3]);
    let l = l2_to(target.clone())(&mut g, out.image);
    let grads = g.backward(l);
    for v in [
        vars.positions,
        vars.scales,
        vars.rotations,
        vars.opacities,
        vars.colors,
    ] {
        assert!(grads
            .get(v)
            .is_none_or(|t| t.data.iter().all(|&x| x == 0.0)));
    }
    let report = check_gradients(&cloud, &front(8), [1.0; 3], l2_to(target), 1e-4);
    assert_eq!(report.compared, 0);
    assert_eq!(report.max_relative_error, 0.0);
}

#[test]
fn clamped_gaussians_are_excluded_and_named() {
    let mut cloud = GaussianCloud::default();
    cloud.push(on_axis(2.0), [0.1; 3], IDENTITY, ALPHA_MAX, [1.0, 0.0, 0.0]);
    cloud.push([0.3, 0.0, 0.0], [0.05; 3], IDENTITY, 0.4, [0.0, 0.0, 1.0]);
    let target = Tensor::from_vec(225, 3, vec![0.5; 675]);
    let report = check_gradients(&cloud, &front(15), [1.0; 3], l2_to(target), 1e-4);
    assert!(!report.excluded.is_empty());
    assert!(report.excluded.iter().all(|p| p.gaussian == 0));
    assert!(report
        .excluded
        .iter()
        .any(|p| p.attribute == Attribute::Opacity));
    assert!(report.compared > 0);
    assert!(report.passed(1e-3), "{report:?}");
}
