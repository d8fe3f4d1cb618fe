//! Invariants checked on random inputs.

use std::f64::consts::PI;

use aft_core::camera::{zbuffer_visible, CameraModel, VisibilityParams};
use aft_core::control::{chamber_pressures, control_step, ControllerGains, ControllerState};
use aft_core::kinematics::{
    forward_kinematics, inverse_kinematics, material_pose, surface_point_position, tip_position, wrap_angle,
    FeasibleDomain, IkOptions, IkTarget, RobotConfig, SegmentConfig,
};
use aft_core::matching::{optimal_assignment, padded_total, row_assignment, score, ObservedPoint, ScoreParams};
use aft_core::reconstruct::{estimate_partition_transform, RigidTransform};
use aft_core::refmodel::{aggregate_descriptor, farthest_point_sample, Descriptor, ReferencePoint};
use aft_core::Vec3;
use approx::assert_abs_diff_eq;
use nalgebra::{DMatrix, Rotation3};
use proptest::prelude::*;

fn segment() -> impl Strategy<Value = SegmentConfig> {
    (0.0..20.0f64, -PI..PI, 0.18..0.26f64).prop_map(|(k, p, l)| SegmentConfig::new(k, p, l))
}

fn config() -> impl Strategy<Value = RobotConfig> {
    prop::collection::vec(segment(), 2).prop_map(RobotConfig::new)
}

fn vec3(r: f64) -> impl Strategy<Value = Vec3> {
    (-r..r, -r..r, -r..r).prop_map(|(x, y, z)| Vec3::new(x, y, z))
}

fn rotation() -> impl Strategy<Value = Rotation3<f64>> {
    vec3(PI).prop_map(Rotation3::from_scaled_axis)
}

fn matrix(max: usize) -> impl Strategy<Value = DMatrix<f64>> {
    (1..=max, 1..=max).prop_flat_map(|(r, c)| {
        prop::collection::vec(-0.2..1.0f64, r * c).prop_map(move |v| DMatrix::from_vec(r, c, v))
    })
}

fn brute_force(s: &DMatrix<f64>, floor: f64) -> f64 {
    fn go(s: &DMatrix<f64>, floor: f64, row: usize, used: &mut [bool], acc: f64) -> f64 {
        if row == s.nrows() {
            return acc;
        }
        let mut best = go(s, floor, row + 1, used, acc + floor);
        for j in 0..s.ncols() {
            if !used[j] {
                used[j] = true;
                best = best.max(go(s, floor, row + 1, used, acc + s[(row, j)].max(floor)));
                used[j] = false;
            }
        }
        best
    }
    go(s, floor, 0, &mut vec![false; s.ncols()], 0.0)
}

fn descriptor(dims: &[usize], seed: &[f64]) -> Descriptor {
    let mut k = 0;
    Descriptor::new(
        dims.iter()
            .map(|&d| {
                (0..d)
                    .map(|_| {
                        k += 1;
                        seed[k % seed.len()] + 0.1 * k as f64
                    })
                    .collect()
            })
            .collect(),
    )
    .unwrap()
}

fn front_camera() -> CameraModel {
    CameraModel::look_at((250.0, 250.0, 128.0, 96.0), (256, 192), Vec3::new(0.7, 0.0, 0.2), Vec3::new(0.0, 0.0, 0.2), -Vec3::z())
        .unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 128, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn fk_rotation_is_orthonormal(c in config(), t in 0.0..1.0f64) {
        let pose = forward_kinematics(&c, t * c.total_length()).unwrap();
        let r = pose.rotation.matrix();
        assert_abs_diff_eq!(r.transpose() * r, nalgebra::Matrix3::identity(), epsilon = 1e-12);
        assert_abs_diff_eq!(r.determinant(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn fk_is_continuous_in_arc_length(c in config(), t in 0.01..0.99f64) {
        let s = t * c.total_length();
        let a = forward_kinematics(&c, s).unwrap().position;
        let b = forward_kinematics(&c, s + 1e-7).unwrap().position;
        // The backbone is unit speed.
        prop_assert!((a - b).norm() <= 1e-7 + 1e-12);
    }

    #[test]
    fn fk_is_continuous_at_zero_curvature(phi in -PI..PI, l in 0.18..0.26f64, t in 0.0..1.0f64) {
        let tiny = RobotConfig::new(vec![SegmentConfig::new(1e-9, phi, l), SegmentConfig::new(1e-9, phi, l)]);
        let straight = RobotConfig::straight(&[l, l]);
        let a = forward_kinematics(&tiny, t * 2.0 * l).unwrap().position;
        let b = forward_kinematics(&straight, t * 2.0 * l).unwrap().position;
        prop_assert!((a - b).norm() < 1e-6);
    }

    #[test]
    fn surface_points_are_rigid_about_the_backbone(c in config(), t in 0.0..1.0f64, offset in vec3(0.03)) {
        let rest = RobotConfig::straight(&[0.2, 0.2]);
        let sigma = 0.4 * t;
        let rest_point = Vec3::new(offset.x, offset.y, sigma);
        let p = surface_point_position(&c, &rest, &rest_point, sigma).unwrap();
        let centre = material_pose(&c, &[0.2, 0.2], sigma).unwrap().position;
        // Distance to the backbone point is preserved.
        assert_abs_diff_eq!((p - centre).norm(), Vec3::new(offset.x, offset.y, 0.0).norm(), epsilon = 1e-12);
        let same = surface_point_position(&rest, &rest, &rest_point, sigma).unwrap();
        assert_abs_diff_eq!(same, rest_point, epsilon = 1e-15);
    }

    #[test]
    fn wrapped_angles_stay_in_range(a in -100.0..100.0f64) {
        let w = wrap_angle(a);
        prop_assert!(w > -PI && w <= PI);
        assert_abs_diff_eq!((a - w) / (2.0 * PI), ((a - w) / (2.0 * PI)).round(), epsilon = 1e-9);
    }

    #[test]
    fn ik_stays_in_domain_and_never_increases_the_objective(truth in config()) {
        let nominal = [0.2, 0.2];
        let domain = FeasibleDomain::around(&nominal);
        let targets: Vec<IkTarget> = [0.1, 0.2, 0.3, 0.4]
            .iter()
            .map(|&s| IkTarget { sigma: s, position: material_pose(&truth, &nominal, s).unwrap().position })
            .collect();
        let sol = inverse_kinematics(&targets, &RobotConfig::straight(&nominal), &domain, &IkOptions::default()).unwrap();
        prop_assert!(domain.contains(&sol.config));
        prop_assert!(sol.history.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn assignment_matches_brute_force(s in matrix(5), floor in 0.0..0.3f64) {
        let m = optimal_assignment(&s, floor);
        let total = padded_total(&s, floor, &row_assignment(&m, s.nrows()));
        assert_abs_diff_eq!(total, brute_force(&s, floor), epsilon = 1e-12);
        // One-to-one, reported pairs strictly above the floor.
        let mut cols: Vec<usize> = m.pairs.iter().map(|p| p.observed).collect();
        cols.sort_unstable();
        cols.dedup();
        prop_assert_eq!(cols.len(), m.pairs.len());
        prop_assert!(m.pairs.iter().all(|p| p.score > floor));
        prop_assert_eq!(m.pairs.len() + m.unmatched_reference.len(), s.nrows());
        prop_assert_eq!(m.pairs.len() + m.unmatched_observed.len(), s.ncols());
    }

    #[test]
    fn assignment_is_permutation_equivariant(s in matrix(7), shift in 0usize..7) {
        let n = s.ncols();
        let perm: Vec<usize> = (0..n).map(|j| (j + shift) % n).collect();
        // Column j of the permuted matrix is column perm[j] of the original.
        let permuted = DMatrix::from_fn(s.nrows(), n, |i, j| s[(i, perm[j])]);
        let a = optimal_assignment(&s, 0.05);
        let b = optimal_assignment(&permuted, 0.05);
        assert_abs_diff_eq!(a.total_score(), b.total_score(), epsilon = 1e-12);
        let mapped: Vec<(usize, usize)> = b.pairs.iter().map(|p| (p.reference, perm[p.observed])).collect();
        let original: Vec<(usize, usize)> = a.pairs.iter().map(|p| (p.reference, p.observed)).collect();
        prop_assert_eq!(mapped, original);
    }

    #[test]
    fn score_decreases_with_distance(
        seed in prop::collection::vec(0.1..1.0f64, 5),
        d in 0.0..0.1f64,
        step in 1e-4..0.05f64,
        dir in vec3(1.0),
    ) {
        prop_assume!(dir.norm() > 1e-3);
        let dir = dir.normalize();
        let desc = descriptor(&[3, 5], &seed);
        let reference = ReferencePoint {
            rest_position: Vec3::zeros(),
            current_position: Vec3::zeros(),
            sigma: 0.0,
            partition: 0,
            descriptor: desc.clone(),
        };
        let at = |r: f64| ObservedPoint { position: dir * r, pixel: [0.0, 0.0], descriptor: desc.clone() };
        let params = ScoreParams::default();
        let near = score(&reference, &at(d), &params).unwrap();
        let far = score(&reference, &at(d + step), &params).unwrap();
        prop_assert!(far < near);
    }

    #[test]
    fn registration_is_equivariant(
        points in prop::collection::vec(vec3(0.1), 4..40),
        r in rotation(),
        t in vec3(0.5),
        g in rotation(),
        h in vec3(0.5),
    ) {
        let motion = RigidTransform { rotation: r, translation: t };
        let extra = RigidTransform { rotation: g, translation: h };
        let moved: Vec<Vec3> = points.iter().map(|p| motion.apply(p)).collect();
        let moved_again: Vec<Vec3> = moved.iter().map(|p| extra.apply(p)).collect();
        let (Ok(a), Ok(b)) = (
            estimate_partition_transform(&points, &moved),
            estimate_partition_transform(&points, &moved_again),
        ) else {
            // Degenerate (near-collinear) draws are rejected, never misregistered.
            return Ok(());
        };
        let composed = extra.compose(&a.transform);
        assert_abs_diff_eq!(b.transform.rotation.matrix(), composed.rotation.matrix(), epsilon = 1e-8);
        assert_abs_diff_eq!(b.transform.translation, composed.translation, epsilon = 1e-8);
    }

    #[test]
    fn zbuffer_is_deterministic_and_keeps_one_point_per_bucket(points in prop::collection::vec(vec3(0.1), 1..200)) {
        let camera = front_camera();
        let shifted: Vec<Vec3> = points.iter().map(|p| p + Vec3::new(0.0, 0.0, 0.2)).collect();
        let params = VisibilityParams::per_pixel();
        let a = zbuffer_visible(&camera, &shifted, &params);
        let b = zbuffer_visible(&camera, &shifted, &params);
        prop_assert_eq!(&a, &b);
        let mut buckets: Vec<(usize, usize)> = a.iter().map(|(_, p)| (p.u as usize, p.v as usize)).collect();
        buckets.sort_unstable();
        let n = buckets.len();
        buckets.dedup();
        prop_assert_eq!(buckets.len(), n);
        // Every kept point is the nearest of all points projecting into its pixel.
        for (i, p) in &a {
            for (j, q) in shifted.iter().enumerate() {
                if let Some(pq) = camera.project(q) {
                    if (pq.u as usize, pq.v as usize) == (p.u as usize, p.v as usize) && j != *i {
                        prop_assert!(pq.depth >= p.depth);
                    }
                }
            }
        }
    }

    #[test]
    fn controller_pressures_are_bounded_and_sparse(
        est in config(),
        tgt in config(),
        integral in prop::collection::vec(-10.0..10.0f64, 2),
        dt in 0.01..1.0f64,
    ) {
        let mut state = ControllerState::new(2, ControllerGains::default());
        state.integral = integral;
        let (pressures, next) = control_step(&state, &est, &tgt, dt).unwrap();
        prop_assert_eq!(pressures.len(), 6);
        prop_assert!(pressures.iter().all(|p| (0.0..=state.gains.u_max.min(100.0)).contains(p)));
        for seg in pressures.chunks(3) {
            prop_assert!(seg.iter().filter(|p| **p > 0.0).count() <= 2);
        }
        prop_assert_eq!(next.pressures, pressures);
    }

    #[test]
    fn angular_weighting_points_toward_psi(u in 1.0..100.0f64, psi in -PI..PI) {
        let p = chamber_pressures(u, psi);
        let angles = [0.0, 2.0 * PI / 3.0, 4.0 * PI / 3.0];
        let (x, y) = p.iter().zip(angles).fold((0.0, 0.0), |(x, y), (p, a)| (x + p * a.cos(), y + p * a.sin()));
        // The resultant lies within 30 degrees of the commanded direction.
        prop_assert!(wrap_angle(y.atan2(x) - psi).abs() <= PI / 6.0 + 1e-9);
    }

    #[test]
    fn aggregation_picks_the_medoid_view_per_scale(views in prop::collection::vec(prop::collection::vec(-1.0..1.0f64, 5), 1..6)) {
        let descs: Vec<Descriptor> = views.iter().map(|v| descriptor(&[2, 3], v)).collect();
        let agg = aggregate_descriptor(&descs).unwrap();
        let cos = |a: &[f64], b: &[f64]| {
            let n = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
            a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (n(a) * n(b))
        };
        for (s, chosen) in agg.scales().iter().enumerate() {
            prop_assert!(descs.iter().any(|d| &d.scales()[s] == chosen));
            let mean = |c: &[f64]| descs.iter().map(|d| cos(c, &d.scales()[s])).sum::<f64>();
            let best = descs.iter().map(|d| mean(&d.scales()[s])).fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(mean(chosen) >= best - 1e-12);
        }
    }

    #[test]
    fn farthest_point_sampling_picks_distinct_points(points in prop::collection::vec(vec3(1.0), 1..80), n in 1usize..80, seed in any::<u64>()) {
        let n = n.min(points.len());
        let idx = farthest_point_sample(&points, n, seed).unwrap();
        prop_assert_eq!(idx.len(), n);
        let mut sorted = idx.clone();
        sorted.sort_unstable();
        sorted.dedup();
        prop_assert_eq!(sorted.len(), n);
    }

    #[test]
    fn tip_moves_with_total_length(c in config(), scale in 1.0..1.2f64) {
        // Stretching a straight robot moves the tip along the axis only.
        let straight = RobotConfig::straight(&c.lengths());
        let longer = RobotConfig::straight(&c.lengths().iter().map(|l| l * scale).collect::<Vec<_>>());
        let d = tip_position(&longer) - tip_position(&straight);
        assert_abs_diff_eq!(d.x, 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(d.z, c.total_length() * (scale - 1.0), epsilon = 1e-12);
    }
}
