use nalgebra::Vector3;
use proptest::prelude::*;
use smd::geometry::{CameraModel, Pose, Rotation};
use smd::image::GrayImage;
use smd::sweep::{self, CostVolume, DepthMap};
use smd::synth::{self, SceneConfig, Surface};

struct PlaneScene {
    frames: Vec<GrayImage>,
    camera: CameraModel,
    poses: Vec<Pose>,
}

/// Textured fronto-parallel plane at inverse depth `omega`.
fn plane_scene(omega: f64) -> PlaneScene {
    let cfg = SceneConfig {
        width: 320,
        height: 180,
        focal: 320.0,
        baseline_frac: 0.02,
        m_points: 50,
        seed: 11,
        ..SceneConfig::default()
    };
    let truth = synth::generate(&cfg).unwrap().truth;
    let surface = Surface::Plane {
        a: omega,
        b: 0.0,
        c: 0.0,
    };
    let frames = synth::render(&cfg, &truth.camera, &truth.poses, &surface).unwrap();
    PlaneScene {
        frames,
        camera: truth.camera,
        poses: truth.poses,
    }
}

fn volume(s: &PlaneScene, planes: &[f64]) -> CostVolume {
    sweep::sweep(&s.frames[0], &s.frames[1..], &s.camera, &s.poses, planes).unwrap()
}

fn argmin(v: &CostVolume, x: usize, y: usize) -> Option<usize> {
    let c = v.pixel(x, y);
    (0..c.len())
        .filter(|&k| c[k].is_finite())
        .min_by(|&a, &b| c[a].total_cmp(&c[b]))
}

#[test]
fn identical_frames_cost_nothing() {
    let img = synth::texture(48, 32, 5.0, 1);
    let cam = SceneConfig {
        width: 48,
        height: 32,
        focal: 48.0,
        ..Default::default()
    }
    .camera()
    .unwrap();
    let poses = vec![Pose::identity(); 3];
    let v = sweep::sweep(&img, &vec![img.clone(); 3], &cam, &poses, &[0.2, 0.5, 1.0]).unwrap();
    let valid: Vec<f32> = v.cost.iter().copied().filter(|c| c.is_finite()).collect();
    assert!(!valid.is_empty());
    assert!(
        valid.iter().all(|c| *c <= 1e-12),
        "max {:?}",
        valid.iter().cloned().fold(0.0f32, f32::max)
    );
}

#[test]
fn warps_leaving_every_frame_are_invalid() {
    let img = synth::texture(40, 30, 5.0, 2);
    let cam = SceneConfig {
        width: 40,
        height: 30,
        focal: 40.0,
        ..Default::default()
    }
    .camera()
    .unwrap();
    let away = Pose::new(Rotation::identity(), Vector3::new(100.0, 0.0, 0.0));
    let v = sweep::sweep(
        &img,
        &[img.clone(), img.clone()],
        &cam,
        &[away, away],
        &[0.5, 1.0],
    )
    .unwrap();
    assert!(v.cost.iter().all(|c| *c == sweep::INVALID_COST));
    let map = sweep::winner_take_all(&v, &[0.5, 1.0]).unwrap();
    assert_eq!(map.valid_count(), 0);
}

#[test]
fn fronto_parallel_plane_is_found_at_its_index() {
    let planes = sweep::sample_planes(0.1, 0.5, 8).unwrap();
    let k = 3;
    let scene = plane_scene(planes[k]);
    let v = volume(&scene, &planes);
    let margin = 16;
    let (mut hits, mut total) = (0, 0);
    for y in margin..v.height - margin {
        for x in margin..v.width - margin {
            total += 1;
            hits += usize::from(argmin(&v, x, y) == Some(k));
        }
    }
    let frac = hits as f64 / total as f64;
    assert!(
        frac >= 0.95,
        "argmin at plane {k} on {frac:.3} of interior pixels"
    );
}

#[test]
fn finer_sampling_never_raises_the_minimum() {
    let coarse = sweep::sample_planes(0.1, 0.5, 5).unwrap();
    let fine = sweep::sample_planes(0.1, 0.5, 9).unwrap();
    let scene = plane_scene(0.23);
    let (vc, vf) = (volume(&scene, &coarse), volume(&scene, &fine));
    let min = |v: &CostVolume, x, y| v.pixel(x, y).iter().copied().fold(f32::INFINITY, f32::min);
    for y in 0..vc.height {
        for x in 0..vc.width {
            assert!(min(&vf, x, y) <= min(&vc, x, y), "pixel ({x}, {y})");
        }
    }
}

#[test]
fn cost_ignores_a_global_intensity_offset() {
    // Images live in [0, 1], so compress first and keep both copies unclipped.
    let scene = plane_scene(0.3);
    let planes = sweep::sample_planes(0.1, 0.5, 4).unwrap();
    let mapped = |offset: f32| PlaneScene {
        frames: scene
            .frames
            .iter()
            .map(|f| GrayImage::from_fn(f.width(), f.height(), |x, y| 0.5 * f.get(x, y) + offset))
            .collect(),
        camera: scene.camera,
        poses: scene.poses.clone(),
    };
    let (a, b) = (volume(&mapped(0.0), &planes), volume(&mapped(0.5), &planes));
    for (ca, cb) in a.cost.iter().zip(&b.cost) {
        assert_eq!(ca.is_finite(), cb.is_finite());
        if ca.is_finite() {
            assert!((ca - cb).abs() <= 1e-6, "{ca} vs {cb}");
        }
    }
}

#[test]
fn valid_depths_stay_in_the_plane_range() {
    let planes = sweep::sample_planes(0.1, 0.5, 6).unwrap();
    let scene = plane_scene(0.2);
    let map = sweep::winner_take_all(&volume(&scene, &planes), &planes).unwrap();
    let refined = sweep::median_refine(&map, 2).unwrap();
    for m in [&map, &refined] {
        for v in m.inverse_depth.iter().filter(|v| **v > 0.0) {
            assert!(planes.iter().any(|p| (*p as f32) == *v));
        }
        assert!(m.confidence.iter().all(|c| (0.0..=1.0).contains(c)));
    }
}

fn random_volume(w: usize, h: usize, n: usize, costs: Vec<u16>) -> CostVolume {
    let cost = costs
        .into_iter()
        .map(|c| {
            if c % 7 == 0 {
                sweep::INVALID_COST
            } else {
                c as f32
            }
        })
        .collect();
    CostVolume::new(w, h, n, cost).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn sampled_planes_are_increasing(a in 0.01f64..5.0, span in 0.01f64..5.0, n in 1usize..200) {
        let p = sweep::sample_planes(a, a + span, n).unwrap();
        prop_assert_eq!(p.len(), n);
        prop_assert!(p.windows(2).all(|w| w[0] < w[1]));
        if n > 1 {
            prop_assert_eq!(p[0], a);
            prop_assert!((p[n - 1] - (a + span)).abs() <= 1e-12);
        }
    }

    #[test]
    fn winner_take_all_is_monotone_invariant(
        costs in proptest::collection::vec(0u16..1000, 6 * 5 * 4),
    ) {
        let planes = [0.1, 0.2, 0.3, 0.4];
        let vol = random_volume(6, 5, 4, costs.clone());
        let warped = CostVolume::new(6, 5, 4, vol.cost.iter().map(|c| c.sqrt() * 3.0 + 1.0).collect()).unwrap();
        let a = sweep::winner_take_all(&vol, &planes).unwrap();
        let b = sweep::winner_take_all(&warped, &planes).unwrap();
        prop_assert_eq!(a.inverse_depth, b.inverse_depth);
    }

    #[test]
    fn median_stays_within_the_valid_range(
        values in proptest::collection::vec(0u8..10, 9 * 7),
        radius in 1usize..4,
    ) {
        let inverse_depth: Vec<f32> = values.iter().map(|v| if *v < 3 { 0.0 } else { *v as f32 * 0.1 }).collect();
        let map = DepthMap { width: 9, height: 7, confidence: vec![0.0; inverse_depth.len()], inverse_depth };
        let out = sweep::median_refine(&map, radius).unwrap();
        let valid: Vec<f32> = map.inverse_depth.iter().copied().filter(|v| *v > 0.0).collect();
        let (lo, hi) = valid.iter().fold((f32::INFINITY, 0.0f32), |(l, h), v| (l.min(*v), h.max(*v)));
        for v in out.inverse_depth.iter().filter(|v| **v > 0.0) {
            prop_assert!(*v >= lo && *v <= hi);
        }
    }

    #[test]
    fn median_is_idempotent_on_constant_maps(w in 1usize..12, h in 1usize..12, v in 0.01f32..2.0, radius in 1usize..4) {
        let map = DepthMap { width: w, height: h, inverse_depth: vec![v; w * h], confidence: vec![0.5; w * h] };
        let once = sweep::median_refine(&map, radius).unwrap();
        prop_assert_eq!(&once.inverse_depth, &map.inverse_depth);
        prop_assert_eq!(sweep::median_refine(&once, radius).unwrap().inverse_depth, once.inverse_depth);
    }
}
