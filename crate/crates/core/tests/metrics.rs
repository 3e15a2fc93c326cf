use nalgebra::{Matrix3, Matrix4, SymmetricEigen, UnitQuaternion, Vector3};
use orientpose::geom;
use orientpose::metrics::{
    default_thresholds, joint_errors, mpjpe, pa_mpjpe, pck, pck_auc, procrustes_align, EvalReport,
};
use orientpose::skeleton::{Pose3D, NUM_JOINTS};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_pose(rng: &mut impl Rng) -> Pose3D {
    let mut p = Pose3D(std::array::from_fn(|_| {
        [rng.gen_range(-500.0..500.0), rng.gen_range(-900.0..900.0), rng.gen_range(-300.0..300.0)]
    }));
    p.0[0] = [0.0; 3];
    p
}

fn random_rotation(rng: &mut impl Rng) -> Matrix3<f64> {
    let axis = Vector3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
    let q = UnitQuaternion::from_scaled_axis(axis.normalize() * rng.gen_range(-3.1..3.1));
    *q.to_rotation_matrix().matrix()
}

fn transform(p: &Pose3D, r: &Matrix3<f64>, s: f64, t: Vector3<f64>) -> Pose3D {
    Pose3D(p.0.map(|j| {
        let v = r * Vector3::new(j[0], j[1], j[2]) * s + t;
        [v[0], v[1], v[2]]
    }))
}

fn sum_sq(a: &Pose3D, b: &Pose3D) -> f64 {
    a.0.iter().zip(&b.0).map(|(p, q)| {
        let d = geom::sub(*p, *q);
        geom::dot(d, d)
    }).sum()
}

/// Closed-form absolute orientation via unit quaternions: the optimal
/// rotation is the top eigenvector of a 4x4 symmetric matrix built from the
/// cross-covariance. Independent of the SVD route.
fn quaternion_align(pred: &Pose3D, gt: &Pose3D) -> Pose3D {
    let n = NUM_JOINTS as f64;
    let centroid = |p: &Pose3D| p.0.iter().fold(Vector3::zeros(), |a, j| a + Vector3::new(j[0], j[1], j[2])) / n;
    let (mx, my) = (centroid(pred), centroid(gt));
    let xs: Vec<_> = pred.0.iter().map(|j| Vector3::new(j[0], j[1], j[2]) - mx).collect();
    let ys: Vec<_> = gt.0.iter().map(|j| Vector3::new(j[0], j[1], j[2]) - my).collect();
    let mut m = Matrix3::zeros();
    for (x, y) in xs.iter().zip(&ys) {
        m += x * y.transpose();
    }
    let (sxx, sxy, sxz) = (m[(0, 0)], m[(0, 1)], m[(0, 2)]);
    let (syx, syy, syz) = (m[(1, 0)], m[(1, 1)], m[(1, 2)]);
    let (szx, szy, szz) = (m[(2, 0)], m[(2, 1)], m[(2, 2)]);
    let nmat = Matrix4::new(
        sxx + syy + szz, syz - szy, szx - sxz, sxy - syx,
        syz - szy, sxx - syy - szz, sxy + syx, szx + sxz,
        szx - sxz, sxy + syx, -sxx + syy - szz, syz + szy,
        sxy - syx, szx + sxz, syz + szy, -sxx - syy + szz,
    );
    let eig = SymmetricEigen::new(nmat);
    let k = (0..4).max_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b])).unwrap();
    let q = eig.eigenvectors.column(k);
    let rot = UnitQuaternion::from_quaternion(nalgebra::Quaternion::new(q[0], q[1], q[2], q[3]));
    let r = *rot.to_rotation_matrix().matrix();
    let num: f64 = xs.iter().zip(&ys).map(|(x, y)| y.dot(&(r * x))).sum();
    let den: f64 = xs.iter().map(|x| x.norm_squared()).sum();
    let s = num / den;
    Pose3D(std::array::from_fn(|j| {
        let v = r * xs[j] * s + my;
        [v[0], v[1], v[2]]
    }))
}

#[test]
fn per_joint_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (a, b) = (random_pose(&mut rng), random_pose(&mut rng));
    let mut total = 0.0;
    for j in 0..NUM_JOINTS {
        let d: f64 = (0..3).map(|k| (a.0[j][k] - b.0[j][k]).powi(2)).sum();
        total += d.sqrt();
        assert!((joint_errors(&a, &b)[j] - d.sqrt()).abs() < 1e-9);
    }
    assert!((mpjpe(&a, &b) - total / NUM_JOINTS as f64).abs() < 1e-9);
}

#[test]
fn similarity_copy_aligns_exactly() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..50 {
        let gt = random_pose(&mut rng);
        let r = random_rotation(&mut rng);
        let pred = transform(&gt, &r, 2.0, Vector3::new(10.0, -40.0, 300.0));
        let aligned = procrustes_align(&pred, &gt).unwrap();
        assert!(mpjpe(&aligned, &gt) < 1e-6);
        assert!(pa_mpjpe(&pred, &gt).unwrap() < 1e-6);
    }
}

#[test]
fn alignment_matches_quaternion_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..100 {
        let (pred, gt) = (random_pose(&mut rng), random_pose(&mut rng));
        let a = procrustes_align(&pred, &gt).unwrap();
        let b = quaternion_align(&pred, &gt);
        let diff = a.0.iter().zip(&b.0).map(|(p, q)| geom::norm(geom::sub(*p, *q))).fold(0.0, f64::max);
        assert!(diff < 1e-6, "{diff}");
    }
}

#[test]
fn alignment_beats_random_similarities() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let gt = random_pose(&mut rng);
    let noisy = Pose3D(gt.0.map(|j| [j[0] + rng.gen_range(-50.0..50.0), j[1] + rng.gen_range(-50.0..50.0), j[2]]));
    let pred = transform(&noisy, &random_rotation(&mut rng), 0.7, Vector3::new(5.0, 5.0, 5.0));
    let best = sum_sq(&procrustes_align(&pred, &gt).unwrap(), &gt);
    for _ in 0..10_000 {
        let r = random_rotation(&mut rng);
        let s = rng.gen_range(0.2..3.0);
        let t = Vector3::new(rng.gen_range(-100.0..100.0), rng.gen_range(-100.0..100.0), rng.gen_range(-100.0..100.0));
        assert!(best <= sum_sq(&transform(&pred, &r, s, t), &gt) + 1e-9);
    }
}

#[test]
fn uniform_errors_give_half_auc() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let errors: Vec<f64> = (0..100_000).map(|_| rng.gen_range(0.0..150.0)).collect();
    let (_, auc) = pck_auc(&errors, &default_thresholds()).unwrap();
    assert!((auc - 0.5).abs() < 0.02, "{auc}");
}

#[test]
fn report_aggregates_pairs() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let gts: Vec<_> = (0..10).map(|_| random_pose(&mut rng)).collect();
    let r = EvalReport::from_pairs("None", &gts, &gts).unwrap();
    assert_eq!((r.mpjpe, r.pck150), (0.0, 1.0));
    assert!(r.pa_mpjpe < 1e-9);
    assert!(EvalReport::from_pairs("x", &gts[..2], &gts).is_err());
    let mut buf = Vec::new();
    orientpose::metrics::write_reports_csv(&[r.clone(), r], &mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    assert_eq!(text.lines().count(), 3);
    assert!(text.starts_with("condition,mpjpe,pa_mpjpe,pck150,auc,pelvis"));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn pa_is_similarity_invariant_and_bounded_by_mpjpe(seed in 0u64..100_000, s in 0.1..5.0f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (pred, gt) = (random_pose(&mut rng), random_pose(&mut rng));
        let base = pa_mpjpe(&pred, &gt).unwrap();
        prop_assert!(base <= mpjpe(&pred, &gt) + 1e-9);
        let moved = transform(&pred, &random_rotation(&mut rng), s, Vector3::new(1.0, 2.0, 3.0));
        prop_assert!((pa_mpjpe(&moved, &gt).unwrap() - base).abs() < 1e-6);
        // A shared rigid motion leaves the unaligned error unchanged.
        let r = random_rotation(&mut rng);
        let t = Vector3::new(7.0, -8.0, 9.0);
        let (mp, mg) = (transform(&pred, &r, 1.0, t), transform(&gt, &r, 1.0, t));
        prop_assert!((mpjpe(&mp, &mg) - mpjpe(&pred, &gt)).abs() < 1e-6);
    }

    #[test]
    fn pck_is_monotone(errors in proptest::collection::vec(0.0..300.0f64, 1..200)) {
        let ts = default_thresholds();
        for w in ts.windows(2) {
            prop_assert!(pck(&errors, w[0]) <= pck(&errors, w[1]));
        }
    }
}
