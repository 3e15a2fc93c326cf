use image::{Rgb, RgbImage};
use orientpose::perturb::{
    apply, bbox_noise, erase_circle, erase_edge, erase_rect, item_seed, occlude, rng_for, translate, BBox, Edge,
    OcclusionSpec, PerturbKind, PerturbSpec,
};
use orientpose::skeleton::Pose2D;
use rand::Rng;

fn noise_image(a: u32, seed: u64) -> RgbImage {
    let mut rng = rng_for(seed);
    RgbImage::from_fn(a, a, |_, _| Rgb([rng.gen_range(1..=255), rng.gen_range(1..=255), rng.gen_range(1..=255)]))
}

fn zero_count(img: &RgbImage) -> usize {
    img.pixels().filter(|p| p.0 == [0; 3]).count()
}

/// Changed pixels must be exactly the zero-filled ones.
fn only_zeroed(before: &RgbImage, after: &RgbImage) -> bool {
    before.pixels().zip(after.pixels()).all(|(b, a)| a == b || a.0 == [0; 3])
}

#[test]
fn translation_offsets_respect_tau() {
    let img = noise_image(32, 1);
    let mut rng = rng_for(2);
    let (mut max, mut sum) = (0.0f64, 0.0);
    let n = 10_000;
    for _ in 0..n {
        let (_, t) = translate(&img, 0.4, 0, &mut rng);
        assert!(t.shift.iter().all(|s| s.abs() as f64 <= 0.4 * 32.0));
        for o in t.offset {
            let r = o.abs() / 32.0;
            assert!(r <= 0.4);
            max = max.max(r);
            sum += r;
        }
    }
    assert!(max <= 0.4);
    let mean = sum / (2 * n) as f64;
    assert!((mean - 0.2).abs() < 0.01, "{mean}");
}

#[test]
fn generators_are_deterministic() {
    let img = noise_image(32, 3);
    let pose = Pose2D([[10.0, 12.0]; 17]);
    let kinds = [
        PerturbKind::Translate { tau: 0.25 },
        PerturbKind::Occlude(OcclusionSpec::default()),
        PerturbKind::EraseRect,
        PerturbKind::EraseCircle,
        PerturbKind::EraseEdge,
    ];
    for kind in kinds {
        let spec = PerturbSpec::new(kind, 42);
        let a = apply(&img, &pose, &spec, &mut rng_for(item_seed(spec.seed, 7)));
        let b = apply(&img, &pose, &spec, &mut rng_for(item_seed(spec.seed, 7)));
        assert_eq!(a, b, "{kind:?}");
        let c = apply(&img, &pose, &spec, &mut rng_for(item_seed(spec.seed, 8)));
        assert_ne!(a.0, c.0, "{kind:?} ignores its seed");
    }
}

#[test]
fn translated_pose_follows_content() {
    let img = noise_image(32, 4);
    let pose = Pose2D([[10.0, 12.0]; 17]);
    let spec = PerturbSpec::new(PerturbKind::Translate { tau: 0.25 }, 9);
    let (out, moved) = apply(&img, &pose, &spec, &mut rng_for(9));
    let [x, y] = moved.0[0];
    if (0.0..32.0).contains(&x) && (0.0..32.0).contains(&y) {
        assert_eq!(out.get_pixel(x as u32, y as u32), img.get_pixel(10, 12));
    }
}

#[test]
fn occluded_fraction_matches_recount_and_bounds() {
    let a = 32u32;
    let spec = OcclusionSpec { count: (1, 8), size: (0.1, 0.3) };
    let mut rng = rng_for(10);
    let mut total = 0.0;
    for _ in 0..1000 {
        let img = RgbImage::from_pixel(a, a, Rgb([0; 3]));
        let (_, occ, covered) = occlude(&img, &spec, &mut rng);
        assert!((1..=8).contains(&occ.len()));
        let recount = (0..a * a)
            .filter(|&k| occ.iter().any(|o| o.contains([(k % a) as f64, (k / a) as f64])))
            .count();
        assert_eq!(covered, recount);
        let upper: f64 = occ.iter().map(|o| o.size[0] * o.size[1]).sum::<f64>() + 4.0 * occ.len() as f64 * a as f64;
        assert!((covered as f64) <= upper);
        for o in &occ {
            for s in o.size {
                assert!((0.1 * a as f64..=0.3 * a as f64).contains(&s));
            }
        }
        total += covered as f64 / (a * a) as f64;
    }
    let mean = total / 1000.0;
    assert!(mean > 0.01 && mean < 0.6, "{mean}");
}

#[test]
fn rect_erase_matches_oracle_and_monte_carlo() {
    let a = 32u32;
    let mut rng = rng_for(11);
    let mut mean = 0.0;
    let n = 1000;
    for _ in 0..n {
        let img = noise_image(a, rng.gen());
        let (out, info) = erase_rect(&img, 0, &mut rng);
        assert!((0.0..=a as f64).contains(&info.width));
        assert!(only_zeroed(&img, &out));
        // Brute-force membership: projection onto the axis within the
        // segment, distance to the axis below half the width.
        let [p, q] = info.ends;
        let (dx, dy) = (q[0] - p[0], q[1] - p[1]);
        let len2 = dx * dx + dy * dy;
        for y in 0..a {
            for x in 0..a {
                let (rx, ry) = (x as f64 - p[0], y as f64 - p[1]);
                let t = (rx * dx + ry * dy) / len2;
                let cross = (rx * dy - ry * dx).abs() / len2.sqrt();
                let inside = len2 > 0.0 && (0.0..=1.0).contains(&t) && cross < info.width / 2.0;
                assert_eq!(out.get_pixel(x, y).0 == [0; 3], inside);
            }
        }
        mean += zero_count(&out) as f64 / (a * a) as f64 / n as f64;
    }
    // Independent Monte-Carlo of the sampling rule in continuous space.
    let mut mc_rng = rng_for(12);
    let side = a as f64;
    let trials = 4000;
    let mut mc = 0.0;
    for _ in 0..trials {
        let pt = |r: &mut rand_chacha::ChaCha8Rng| [r.gen_range(-0.5..side - 0.5), r.gen_range(-0.5..side - 0.5)];
        let (p, q) = (pt(&mut mc_rng), pt(&mut mc_rng));
        let w = mc_rng.gen_range(0.0..=side);
        let (dx, dy) = (q[0] - p[0], q[1] - p[1]);
        let len = (dx * dx + dy * dy).sqrt();
        let hits = (0..64)
            .filter(|_| {
                let s = pt(&mut mc_rng);
                let (rx, ry) = (s[0] - p[0], s[1] - p[1]);
                let t = (rx * dx + ry * dy) / (len * len);
                (0.0..=1.0).contains(&t) && (rx * dy - ry * dx).abs() / len < w / 2.0
            })
            .count();
        mc += hits as f64 / 64.0 / trials as f64;
    }
    assert!(mean > 0.0 && mean < 1.0);
    assert!((mean - mc).abs() < 0.02, "pixels {mean} vs monte carlo {mc}");
}

#[test]
fn circle_radii_and_area() {
    let a = 64u32;
    let img = noise_image(a, 13);
    let mut rng = rng_for(14);
    let mut interior = 0;
    for _ in 0..10_000 {
        let (_, info) = erase_circle(&img, 0, &mut rng);
        let r = info.disc.radius;
        assert!((a as f64 / 5.0..=2.0 * a as f64 / 5.0).contains(&r));
        let c = info.disc.center;
        let fully_inside = c[0] - r >= -0.5 && c[1] - r >= -0.5 && c[0] + r <= a as f64 - 0.5 && c[1] + r <= a as f64 - 0.5;
        if fully_inside {
            interior += 1;
            let area = std::f64::consts::PI * r * r;
            assert!((info.erased as f64 - area).abs() / area < 0.03, "{} vs {area}", info.erased);
        }
    }
    assert!(interior > 0);
    let (out, _) = erase_circle(&img, 0, &mut rng_for(15));
    assert!(only_zeroed(&img, &out));
}

#[test]
fn edges_are_chosen_uniformly() {
    let img = noise_image(8, 16);
    let mut rng = rng_for(17);
    let mut counts = [0usize; 4];
    let n = 10_000;
    for _ in 0..n {
        let (out, info) = erase_edge(&img, 0, &mut rng);
        assert!((0.0..=4.0).contains(&info.width));
        assert!(only_zeroed(&img, &out));
        counts[match info.edge {
            Edge::Left => 0,
            Edge::Right => 1,
            Edge::Top => 2,
            Edge::Bottom => 3,
        }] += 1;
    }
    for c in counts {
        let f = c as f64 / n as f64;
        assert!((f - 0.25).abs() < 0.02, "{counts:?}");
    }
}

#[test]
fn bbox_centre_noise_has_expected_spread() {
    let mut rng = rng_for(18);
    let b = BBox { center: [128.0, 128.0], size: 256.0 };
    let n = 10_000;
    let mut sums = [0.0f64; 2];
    let mut sq = [0.0f64; 2];
    for _ in 0..n {
        let nb = bbox_noise(b, 0.2, 0.0, &mut rng);
        assert_eq!(nb.size, 256.0);
        for k in 0..2 {
            let d = nb.center[k] - b.center[k];
            sums[k] += d;
            sq[k] += d * d;
        }
    }
    for k in 0..2 {
        let mean = sums[k] / n as f64;
        let std = (sq[k] / n as f64 - mean * mean).sqrt();
        assert!((std - 51.2).abs() / 51.2 < 0.03, "axis {k}: {std}");
    }
    let tiny = bbox_noise(BBox { center: [0.0, 0.0], size: 1.0 }, 0.0, 100.0, &mut rng);
    assert!(tiny.size >= 1.0);
}
