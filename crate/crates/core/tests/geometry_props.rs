use mih_localmap::geometry::{
    gauss_newton_refine, logdet_metric, measurement_jacobian, pose_info_single, project, CameraPose, FeatureMatch,
    PinholeModel,
};
use mih_localmap::PointId;
use nalgebra::{Matrix3, Matrix6, Rotation3, SymmetricEigen, Vector2, Vector3, Vector6};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_pose(rng: &mut ChaCha8Rng, angle: f64, offset: f64) -> CameraPose {
    let axis = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
    let rot = Rotation3::new(axis.normalize() * rng.random_range(0.0..angle)).into_inner();
    let t = Vector3::new(
        rng.random_range(-offset..offset),
        rng.random_range(-offset..offset),
        rng.random_range(-offset..offset),
    );
    CameraPose::new(rot, t)
}

/// World point whose camera-frame depth lies in `[1, 10)`.
fn point_in_front(rng: &mut ChaCha8Rng, pose: &CameraPose) -> Vector3<f64> {
    let z = rng.random_range(1.0..10.0);
    let pc = Vector3::new(rng.random_range(-0.8..0.8) * z, rng.random_range(-0.6..0.6) * z, z);
    pose.rotation.transpose() * (pc - pose.translation)
}

/// Right increment built directly from nalgebra's rotation exponential; for
/// single-axis steps it coincides with the full SE(3) exponential.
fn nudge(pose: &CameraPose, axis: usize, h: f64) -> CameraPose {
    let mut w = Vector3::zeros();
    let mut v = Vector3::zeros();
    if axis < 3 {
        w[axis] = h;
    } else {
        v[axis - 3] = h;
    }
    CameraPose {
        rotation: pose.rotation * Rotation3::new(w).into_inner(),
        translation: pose.translation + pose.rotation * v,
    }
}

#[test]
fn jacobian_matches_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let model = PinholeModel::default();
    let step = 1e-6;
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let pose = random_pose(&mut rng, 3.0, 5.0);
        let p = point_in_front(&mut rng, &pose);
        let h = measurement_jacobian(&pose, &model, &p).unwrap();
        let mut fd = nalgebra::SMatrix::<f64, 2, 6>::zeros();
        for k in 0..6 {
            let plus = project(&nudge(&pose, k, step), &model, &p).unwrap();
            let minus = project(&nudge(&pose, k, -step), &model, &p).unwrap();
            fd.set_column(k, &((plus - minus) / (2.0 * step)));
        }
        worst = worst.max((h - fd).norm() / fd.norm());
    }
    assert!(worst < 1e-5, "worst relative error {worst:e}");
}

#[test]
fn translation_block_matches_pinhole_point_jacobian() {
    let model = PinholeModel { fx: 420.0, fy: 380.0, cx: 300.0, cy: 200.0 };
    let p = Vector3::new(0.4, -0.3, 2.5);
    let h = measurement_jacobian(&CameraPose::identity(), &model, &p).unwrap();
    let (x, y, z) = (p.x, p.y, p.z);
    let expected = [
        [model.fx / z, 0.0, -model.fx * x / (z * z)],
        [0.0, model.fy / z, -model.fy * y / (z * z)],
    ];
    for r in 0..2 {
        for c in 0..3 {
            assert!((h[(r, 3 + c)] - expected[r][c]).abs() < 1e-12);
        }
    }
    let axis = measurement_jacobian(&CameraPose::identity(), &model, &Vector3::new(0.0, 0.0, 4.0)).unwrap();
    assert!((axis[(0, 3)] - model.fx / 4.0).abs() < 1e-12);
}

fn random_matches(rng: &mut ChaCha8Rng, pose: &CameraPose, n: usize) -> Vec<FeatureMatch> {
    let model = PinholeModel::default();
    (0..n)
        .map(|i| {
            let p = point_in_front(rng, pose);
            let z = project(pose, &model, &p).unwrap();
            FeatureMatch::new(PointId(i as u64), p, z)
        })
        .collect()
}

#[test]
fn logdet_agrees_with_eigen_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let model = PinholeModel::default();
    for _ in 0..50 {
        let pose = random_pose(&mut rng, 1.0, 2.0);
        let matches = random_matches(&mut rng, &pose, 20);
        let mut sum = Matrix6::zeros();
        for m in &matches {
            let h = measurement_jacobian(&pose, &model, &m.world_point).unwrap();
            sum += h.transpose() * h;
        }
        let oracle: f64 = SymmetricEigen::new(sum + Matrix6::identity() * 1e-3)
            .eigenvalues
            .iter()
            .map(|e| e.ln())
            .sum();
        let got = logdet_metric(&matches, &pose, &model, 1e-3);
        assert!(((got - oracle) / oracle).abs() < 1e-8, "{got} vs {oracle}");
    }
}

#[test]
fn nested_sets_show_diminishing_returns() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let model = PinholeModel::default();
    let pose = CameraPose::identity();
    let f = |s: &[FeatureMatch]| logdet_metric(s, &pose, &model, 1e-3);
    for _ in 0..500 {
        let pool = random_matches(&mut rng, &pose, 30);
        let b_len = rng.random_range(0..29);
        let a_len = rng.random_range(0..=b_len);
        let (b, rest) = pool.split_at(b_len);
        let a = &b[..a_len];
        let m = rest[0];
        let with = |s: &[FeatureMatch]| {
            let mut v = s.to_vec();
            v.push(m);
            f(&v)
        };
        let gain_a = with(a) - f(a);
        let gain_b = with(b) - f(b);
        assert!(gain_a >= -1e-9 && gain_b >= -1e-9);
        assert!(gain_a - gain_b >= -1e-9, "gain {gain_a} on A below {gain_b} on B");
    }
}

#[test]
fn gauss_newton_recovers_noiseless_pose() {
    let model = PinholeModel::default();
    for seed in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let truth = random_pose(&mut rng, 3.0, 2.0);
        let matches = random_matches(&mut rng, &truth, 50);
        let mut dir = Vector6::from_fn(|_, _| rng.random_range(-1.0..1.0));
        let (w, v) = (dir.fixed_rows::<3>(0).normalize(), dir.fixed_rows::<3>(3).normalize());
        dir.fixed_rows_mut::<3>(0).copy_from(&(w * 0.05));
        dir.fixed_rows_mut::<3>(3).copy_from(&(v * 0.05));
        let start = truth.retract(&dir);
        let out = gauss_newton_refine(&start, &model, &matches, 10, 1e-12).unwrap();
        assert!(out.iterations <= 10);
        assert!(out.pose.rotation_error(&truth) < 1e-6);
        assert!(out.pose.translation_error(&truth) < 1e-6);
        assert!(out.final_cost <= out.initial_cost);
    }
}

#[test]
fn collinear_points_through_centre_are_singular() {
    let model = PinholeModel::default();
    let pose = CameraPose::identity();
    let matches: Vec<_> = (1..=10)
        .map(|i| {
            let p = Vector3::new(0.1, 0.05, 1.0) * i as f64;
            FeatureMatch::new(PointId(i), p, project(&pose, &model, &p).unwrap())
        })
        .collect();
    assert!(gauss_newton_refine(&pose, &model, &matches, 10, 1e-12).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn single_info_is_rank_two_psd(seed in any::<u64>(), scale in 0.1f64..10.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pose = random_pose(&mut rng, 3.0, 3.0);
        let p = point_in_front(&mut rng, &pose);
        let model = PinholeModel::default();
        let mut m = FeatureMatch::new(PointId(0), p, Vector2::zeros());
        let base = pose_info_single(&m, &pose, &model).unwrap().0;
        prop_assert!((base - base.transpose()).abs().max() <= 1e-12 * base.abs().max());
        let eig = SymmetricEigen::new(base).eigenvalues;
        let top = eig.max();
        prop_assert!(eig.iter().all(|&e| e >= -1e-9 * top));
        prop_assert!(eig.iter().filter(|&&e| e > 1e-9 * top).count() <= 2);
        m.residual_information = nalgebra::Matrix2::identity() * scale;
        let scaled = pose_info_single(&m, &pose, &model).unwrap().0;
        prop_assert!((scaled - base * scale).abs().max() <= 1e-9 * scaled.abs().max());
    }

    #[test]
    fn gauss_newton_never_raises_cost(seed in any::<u64>(), noise in 0.0f64..3.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = PinholeModel::default();
        let truth = random_pose(&mut rng, 3.0, 2.0);
        let mut matches = random_matches(&mut rng, &truth, 30);
        for m in &mut matches {
            m.measurement += Vector2::new(rng.random_range(-noise..=noise), rng.random_range(-noise..=noise));
        }
        let start = truth.retract(&Vector6::from_fn(|_, _| rng.random_range(-0.03..0.03)));
        let mut prev = f64::INFINITY;
        for iters in 0..6 {
            let out = gauss_newton_refine(&start, &model, &matches, iters, 0.0).unwrap();
            prop_assert!(out.final_cost <= out.initial_cost);
            prop_assert!(out.final_cost <= prev + 1e-9 * prev.clamp(1.0, 1e300));
            prev = out.final_cost;
        }
    }

    #[test]
    fn rotation_stays_orthonormal(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut pose = random_pose(&mut rng, 3.0, 3.0);
        for _ in 0..50 {
            pose = pose.retract(&Vector6::from_fn(|_, _| rng.random_range(-0.5..0.5)));
        }
        prop_assert!(pose.is_valid());
        let r: Matrix3<f64> = pose.rotation;
        prop_assert!((r.determinant() - 1.0).abs() < 1e-9);
    }
}
