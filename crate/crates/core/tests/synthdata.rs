use std::collections::HashSet;

use orientpose::exec::Exec;
use orientpose::extract::decode_pose;
use orientpose::geom;
use orientpose::mapcodec::limb_region;
use orientpose::metrics::mpjpe;
use orientpose::perturb::rng_for;
use orientpose::skeleton::{orientations_from_pose, LimbLengths, LimbTopology, NUM_LIMBS};
use orientpose::synthdata::{
    file_len, generate, project, read_dataset, render, render_with_ids, sample_cone, sample_pose, write_dataset,
    Camera, DataConfig, DataError, RenderStyle, SceneConfig, CONE_HALF_ANGLES_DEG, PALETTE, REST_DIRECTIONS,
};
use rand::Rng;

fn small_config(count: usize, seed: u64) -> DataConfig {
    DataConfig {
        count,
        seed,
        ..DataConfig::default()
    }
}

#[test]
fn sampled_poses_keep_default_lengths() {
    let topo = LimbTopology::canonical();
    let lengths = LimbLengths::default();
    let mut rng = rng_for(1);
    for _ in 0..200 {
        let pose = sample_pose(&mut rng);
        let dec = orientations_from_pose(&pose, &topo).unwrap();
        for i in 0..NUM_LIMBS {
            assert!((dec.lengths[i] - lengths.0[i]).abs() < 1e-9);
            assert!((geom::norm(dec.orients.0[i]) - 1.0).abs() < 1e-9);
        }
    }
}

#[test]
fn cone_samples_stay_within_half_angle() {
    let mut rng = rng_for(2);
    for (i, rest) in REST_DIRECTIONS.iter().enumerate() {
        let half = CONE_HALF_ANGLES_DEG[i].to_radians();
        let mut mean = [0.0; 3];
        for _ in 0..10_000 {
            let v = sample_cone(*rest, half, &mut rng);
            assert!(geom::angle_between(v, *rest) <= half + 1e-9);
            mean = geom::add(mean, v);
        }
        assert!(geom::angle_between(mean, *rest) <= half);
    }
}

#[test]
fn projection_is_linear_in_scale() {
    let pose = sample_pose(&mut rng_for(3));
    let cam = Camera { scale: 0.1, principal: [5.0, 7.0] };
    let double = Camera { scale: 0.2, ..cam };
    let (a, b) = (project(&pose, &cam), project(&pose, &double));
    for &(p, c) in &LimbTopology::canonical().limbs {
        let la = geom::norm2([a.0[c][0] - a.0[p][0], a.0[c][1] - a.0[p][1]]);
        let lb = geom::norm2([b.0[c][0] - b.0[p][0], b.0[c][1] - b.0[p][1]]);
        assert!((lb - 2.0 * la).abs() < 1e-9);
    }
    let unit = project(&pose, &Camera { scale: 1.0, principal: [0.0, 0.0] });
    for (p2, p3) in unit.0.iter().zip(&pose.0) {
        assert_eq!(*p2, [p3[0], p3[1]]);
    }
}

#[test]
fn rendered_limbs_follow_region_masks() {
    let topo = LimbTopology::canonical();
    let mut rng = rng_for(4);
    let pose = sample_pose(&mut rng);
    let cam = Camera::for_image(64);
    let p2 = project(&pose, &cam);
    let style = RenderStyle::default();
    let (img, ids) = render_with_ids(&p2, &pose, &topo, &style, 64, &mut rng_for(5));
    let mut union = vec![false; 64 * 64];
    for (i, &(p, c)) in topo.limbs.iter().enumerate() {
        let mask = limb_region(p2.0[p], p2.0[c], style.limb_width, (64, 64));
        for (k, &b) in mask.bits.iter().enumerate() {
            union[k] |= b;
            if ids[k] == Some(i) {
                assert!(b, "limb {i} drawn outside its region");
            }
        }
    }
    for k in 0..64 * 64 {
        assert_eq!(ids[k].is_some(), union[k]);
        if ids[k].is_none() {
            assert!(img.as_raw()[3 * k..3 * k + 3].iter().all(|&v| v <= style.background_max));
        }
    }
    let again = render(&p2, &pose, &topo, &style, 64, &mut rng_for(5));
    assert_eq!(img, again);
}

/// Declares limb `k` present when some pixel brighter than the background
/// is a scalar multiple of its palette colour.
fn histogram_says_present(img: &image::RgbImage, k: usize) -> bool {
    let target = PALETTE[k].map(|v| v as f64);
    img.pixels()
        .filter(|px| {
            let v = px.0.map(|c| c as f64);
            let peak = v.iter().cloned().fold(0.0, f64::max);
            peak > 61.0 && (0..3).all(|c| (v[c] - target[c] * peak / 255.0).abs() <= 1.5)
        })
        .count()
        >= 1
}

#[test]
fn colour_histogram_detects_a_limb() {
    let topo = LimbTopology::canonical();
    let cam = Camera::for_image(64);
    let style = RenderStyle::default();
    let mut rng = rng_for(6);
    let (mut correct, mut pairs) = (0, 0);
    while pairs < 500 {
        let pose = sample_pose(&mut rng);
        let k = rng.gen_range(0..NUM_LIMBS);
        let p2 = project(&pose, &cam);
        let seed = rng.gen();
        let (with_img, ids) = render_with_ids(&p2, &pose, &topo, &style, 64, &mut rng_for(seed));
        // A limb hidden behind others leaves the image unchanged.
        if !ids.contains(&Some(k)) {
            continue;
        }
        let hidden = RenderStyle { hidden: 1 << k, ..style };
        let without_img = render(&p2, &pose, &topo, &hidden, 64, &mut rng_for(seed));
        correct += histogram_says_present(&with_img, k) as usize;
        correct += !histogram_says_present(&without_img, k) as usize;
        pairs += 1;
    }
    let acc = correct as f64 / (2 * pairs) as f64;
    assert!(acc > 0.99, "{acc}");
}

#[test]
fn ground_truth_path_is_consistent() {
    let cfg = small_config(300, 7);
    let samples = generate(&cfg, Exec::Auto).unwrap();
    let topo = LimbTopology::canonical();
    let lengths = LimbLengths::default();
    let mut checked = 0;
    for s in &samples {
        let maps = s.maps(&topo, &cfg.scene.map).unwrap();
        for i in 0..NUM_LIMBS {
            assert_eq!(s.limb_visible(i), maps.conf(i).iter().any(|&c| c > 0.0));
        }
        if s.visibility == u16::MAX {
            let est = decode_pose(&maps, &lengths, &topo).unwrap();
            assert!(mpjpe(&est.pose, &s.pose3d) < 0.1);
            checked += 1;
        }
        assert_eq!(s.pose3d.0[0], [0.0; 3]);
    }
    assert!(checked > 100, "only {checked} fully visible samples");
    let frac = samples.iter().filter(|s| s.has_3d).count() as f64 / samples.len() as f64;
    assert!((frac - 0.5).abs() < 0.1);
}

#[test]
fn generation_is_reproducible_and_parallel_safe() {
    let cfg = small_config(40, 8);
    let a = generate(&cfg, Exec::Auto).unwrap();
    let b = generate(&cfg, Exec::Sequential).unwrap();
    assert_eq!(a, b);
    let distinct: HashSet<_> = a.iter().map(|s| s.image.as_raw().clone()).collect();
    assert_eq!(distinct.len(), a.len());
}

#[test]
fn dataset_round_trips_and_reports_corruption() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("train.opk");
    let cfg = small_config(2000, 9);
    let samples = generate(&cfg, Exec::Auto).unwrap();
    write_dataset(&samples, &cfg.scene, &path).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    assert_eq!(bytes.len(), file_len(2000, 64, 64));
    assert_eq!(bytes.len(), 28 + 2000 * (3 * 64 * 64 + 343));
    let (header, back) = read_dataset(&path).unwrap();
    assert_eq!((header.count, header.map_w), (2000, 16));
    assert_eq!(back, samples);

    let cut = dir.path().join("cut.opk");
    let stride = 3 * 64 * 64 + 343;
    std::fs::write(&cut, &bytes[..28 + 5 * stride + 100]).unwrap();
    match read_dataset(&cut) {
        Err(DataError::Truncated { offset, .. }) => assert_eq!(offset, 28 + 5 * stride),
        other => panic!("expected truncation, got {other:?}"),
    }
    let mut bad = bytes[..64].to_vec();
    bad[0] = b'X';
    std::fs::write(&cut, &bad).unwrap();
    assert!(matches!(read_dataset(&cut), Err(DataError::BadMagic(_))));
    let mut v2 = bytes[..64].to_vec();
    v2[4] = 2;
    std::fs::write(&cut, &v2).unwrap();
    assert!(matches!(read_dataset(&cut), Err(DataError::Version { found: 2 })));
}

#[test]
fn scene_defaults_are_consistent() {
    let scene = SceneConfig::default();
    assert_eq!(scene.stride(), 4);
    assert_eq!(scene.style().limb_width, 6.0);
    let pose = sample_pose(&mut rng_for(1));
    let topo = LimbTopology::canonical();
    let s = scene.make_sample(&pose, &Camera::for_image(64), &scene.style(), true, &topo, &mut rng_for(1)).unwrap();
    assert_eq!(s.pose2d.0[0], [7.5, 7.5]);
}
