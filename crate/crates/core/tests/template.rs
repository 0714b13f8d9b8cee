use headlift_core::gaussian::{build_template, group_patches, TemplatePointSet, PATCH_MEMBERS};
use headlift_core::rng::Rng;
use proptest::prelude::*;

type Vec3 = [f64; 3];

fn dist2(a: &Vec3, b: &Vec3) -> f64 {
    (0..3).map(|k| (a[k] - b[k]) * (a[k] - b[k])).sum()
}

fn diameter(points: &[Vec3]) -> f64 {
    let mut best: f64 = 0.0;
    for (i, a) in points.iter().enumerate() {
        for b in &points[i + 1..] {
            best = best.max(dist2(a, b));
        }
    }
    best.sqrt()
}

/// Lloyd's k-means with farthest-point initialization; returns cluster labels.
fn kmeans(points: &[Vec3], k: usize) -> Vec<usize> {
    let mut centers = vec![points[0]];
    let mut nearest: Vec<f64> = points.iter().map(|p| dist2(p, &points[0])).collect();
    while centers.len() < k {
        let (far, _) =
            nearest.iter().enumerate().fold(
                (0, -1.0),
                |acc, (i, &d)| if d > acc.1 { (i, d) } else { acc },
            );
        centers.push(points[far]);
        for (n, p) in nearest.iter_mut().zip(points) {
            *n = n.min(dist2(p, &points[far]));
        }
    }
    let mut labels = vec![0; points.len()];
    for _ in 0..100 {
        let next: Vec<usize> = points
            .iter()
            .map(|p| {
                (0..k)
                    .min_by(|&a, &b| dist2(p, &centers[a]).total_cmp(&dist2(p, &centers[b])))
                    .unwrap()
            })
            .collect();
        let settled = next == labels;
        labels = next;
        let mut sums = vec![([0.0; 3], 0usize); k];
        for (p, &l) in points.iter().zip(&labels) {
            for d in 0..3 {
                sums[l].0[d] += p[d];
            }
            sums[l].1 += 1;
        }
        for (c, (s, n)) in centers.iter_mut().zip(sums) {
            if n > 0 {
                *c = s.map(|v| v / n as f64);
            }
        }
        if settled {
            break;
        }
    }
    labels
}

fn max_group_diameter(points: &[Vec3], labels: &[usize], k: usize) -> f64 {
    (0..k)
        .map(|c| {
            let members: Vec<Vec3> = points
                .iter()
                .zip(labels)
                .filter(|(_, &l)| l == c)
                .map(|(p, _)| *p)
                .collect();
            diameter(&members)
        })
        .fold(0.0, f64::max)
}

fn patch_diameter(t: &TemplatePointSet) -> f64 {
    t.members
        .iter()
        .map(|m| {
            diameter(
                &m.iter()
                    .map(|&v| t.vertices[v as usize])
                    .collect::<Vec<_>>(),
            )
        })
        .fold(0.0, f64::max)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn patches_are_spatially_local(num_patches in 1usize..=64, seed in any::<u64>()) {
        let t = build_template(num_patches, seed).unwrap();
        let labels = kmeans(&t.vertices, num_patches);
        let reference = max_group_diameter(&t.vertices, &labels, num_patches);
        let ours = patch_diameter(&t);
        prop_assert!(ours <= 4.0 * reference, "patch diameter {ours} vs k-means {reference}");
    }

    #[test]
    fn template_is_a_pure_function_of_its_arguments(num_patches in 1usize..=32, seed in any::<u64>()) {
        let a = build_template(num_patches, seed).unwrap();
        prop_assert_eq!(&a, &build_template(num_patches, seed).unwrap());
        prop_assert_eq!(a.num_vertices(), PATCH_MEMBERS * num_patches);
        for (p, m) in a.members.iter().enumerate() {
            prop_assert!(m.iter().all(|&v| a.patch_index[v as usize] as usize == p));
        }
    }

    #[test]
    fn grouping_ignores_input_order(seed in any::<u64>(), patches in 1usize..=8) {
        let mut rng = Rng::new(seed);
        let points: Vec<Vec3> = (0..patches * PATCH_MEMBERS)
            .map(|_| [rng.normal(), rng.normal(), rng.normal()])
            .collect();
        let mut perm: Vec<usize> = (0..points.len()).collect();
        rng.shuffle(&mut perm);
        let shuffled: Vec<Vec3> = perm.iter().map(|&i| points[i]).collect();
        prop_assert_eq!(groups(&points), groups(&shuffled));
    }
}

/// Each patch as a sorted list of member coordinates, patches sorted.
fn groups(points: &[Vec3]) -> Vec<Vec<Vec3>> {
    let labels = group_patches(points).unwrap();
    let np = points.len() / PATCH_MEMBERS;
    let mut out: Vec<Vec<Vec3>> = (0..np)
        .map(|p| {
            let mut m: Vec<Vec3> = points
                .iter()
                .zip(&labels)
                .filter(|(_, &l)| l as usize == p)
                .map(|(v, _)| *v)
                .collect();
            m.sort_by(|a, b| a.partial_cmp(b).unwrap());
            m
        })
        .collect();
    out.sort_by(|a, b| a.partial_cmp(b).unwrap());
    out
}

#[test]
fn two_separated_clusters_become_two_patches() {
    let mut rng = Rng::new(3);
    let centers = [[-5.0, 0.0, 0.0], [5.0, 1.0, -2.0]];
    let mut points = Vec::new();
    for c in &centers {
        for _ in 0..PATCH_MEMBERS {
            points.push([
                c[0] + rng.range(-0.1, 0.1),
                c[1] + rng.range(-0.1, 0.1),
                c[2] + rng.range(-0.1, 0.1),
            ]);
        }
    }
    rng.shuffle(&mut points);
    let labels = group_patches(&points).unwrap();
    // Brute force: the cluster a point belongs to is its nearest center.
    let cluster: Vec<usize> = points
        .iter()
        .map(|p| {
            if dist2(p, &centers[0]) < dist2(p, &centers[1]) {
                0
            } else {
                1
            }
        })
        .collect();
    for i in 0..points.len() {
        for j in 0..points.len() {
            assert_eq!(
                labels[i] == labels[j],
                cluster[i] == cluster[j],
                "points {i} and {j}"
            );
        }
    }
}

#[test]
fn sixteen_identical_points_form_one_patch() {
    let labels = group_patches(&[[0.3, -0.2, 1.0]; PATCH_MEMBERS]).unwrap();
    assert_eq!(labels, vec![0; PATCH_MEMBERS]);
}
