mod common;

use common::{small_scene, truth_state};
use nalgebra::{DVector, Vector2};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use smd::ba::{self, BaOptions, BaState, DISTORTION_BOUND, OMEGA_MIN};
use smd::geometry::Distortion;
use smd::synth::{self, InitMode};

fn stacked(state: &BaState, tracks: &smd::features::TrackTable) -> DVector<f64> {
    let r = ba::residuals(state, tracks).unwrap();
    DVector::from_iterator(2 * r.len(), r.iter().flat_map(|v| [v.x, v.y]))
}

/// Ground truth with every parameter moved by a random amount.
fn perturbed(state: &BaState, seed: u64) -> BaState {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = state.params();
    p[0] *= 1.0 + rng.random_range(-0.05..0.05);
    p[1] += rng.random_range(-0.05..0.05);
    p[2] += rng.random_range(-0.02..0.02);
    for k in 3..p.len() {
        let scale = if k < 3 + 6 * state.n_frames() {
            1e-3
        } else {
            0.1 * p[k]
        };
        p[k] += rng.random_range(-1.0..1.0) * scale;
    }
    state.with_params(&p)
}

#[test]
fn jacobian_matches_central_differences() {
    for seed in 0..3 {
        let scene = small_scene(seed, 0.3);
        let state = perturbed(&truth_state(&scene), 100 + seed);
        let analytic = ba::jacobian(&state, &scene.tracks)
            .unwrap()
            .to_dense(&state);
        let p0 = state.params();
        for c in 0..state.n_params() {
            let h = 1e-6 * p0[c].abs().max(1e-2);
            let mut plus = p0.clone();
            plus[c] += h;
            let mut minus = p0.clone();
            minus[c] -= h;
            let fd = (stacked(&state.with_params(&plus), &scene.tracks)
                - stacked(&state.with_params(&minus), &scene.tracks))
                / (2.0 * h);
            let col = analytic.column(c);
            let rel = (&fd - col).norm() / col.norm().max(1e-8);
            assert!(
                rel <= 1e-4,
                "seed {seed} column {c}: relative error {rel:e}"
            );
        }
    }
}

#[test]
fn jacobian_sparsity_and_gauge_column() {
    let scene = small_scene(1, 0.3);
    let state = perturbed(&truth_state(&scene), 7);
    let jac = ba::jacobian(&state, &scene.tracks).unwrap();
    assert_eq!(
        jac.n_params,
        3 + 6 * state.n_frames() + state.m_points() - 1
    );
    let dense = jac.to_dense(&state);
    for (b, blk) in jac.blocks.iter().enumerate() {
        assert_eq!(blk.omega.is_none(), blk.point == state.gauge_point);
        for c in 0..dense.ncols() {
            let own_pose = (3 + 6 * blk.frame..9 + 6 * blk.frame).contains(&c);
            let own_omega = state.omega_column(blk.point) == Some(c);
            if c >= 3 && !own_pose && !own_omega {
                assert_eq!(dense[(2 * b, c)], 0.0);
                assert_eq!(dense[(2 * b + 1, c)], 0.0);
            }
        }
    }
}

#[test]
fn truth_is_a_fixed_point_on_noiseless_data() {
    let scene = small_scene(2, 0.0);
    let state = truth_state(&scene);
    for r in ba::residuals(&state, &scene.tracks).unwrap() {
        assert!(r.norm() <= 1e-9, "residual {r:?}");
    }
    for j in 0..state.m_points() {
        assert!(
            ba::reproj_residual(&state, &scene.tracks, 0, j)
                .unwrap()
                .norm()
                <= 1e-9
        );
    }
    let (_, report) = ba::solve(&state, &scene.tracks, &BaOptions::default()).unwrap();
    assert!(report.converged);
    assert!(report.iterations <= 2, "{} iterations", report.iterations);
    assert!(
        report.final_cost <= 1e-12,
        "final cost {}",
        report.final_cost
    );
}

#[test]
fn zero_distortion_residual_is_pinhole() {
    let mut scene = small_scene(3, 0.3);
    let mut state = truth_state(&scene);
    state.distortion = Distortion::NONE;
    scene.tracks = scene.truth.exact_tracks.clone();
    let k = state.intrinsics;
    for i in 0..state.n_frames() {
        for j in 0..state.m_points() {
            let r0 = scene.tracks.ref_points[j];
            let ray = nalgebra::Vector3::new(
                (r0.x - k.principal_point[0]) / k.focal,
                (r0.y - k.principal_point[1]) / k.focal,
                1.0,
            );
            let x = state.poses[i].rotation.matrix() * (ray / state.omegas[j])
                + state.poses[i].translation;
            let pinhole = Vector2::new(
                k.focal * x.x / x.z + k.principal_point[0],
                k.focal * x.y / x.z + k.principal_point[1],
            );
            let expected = scene.tracks.obs[i][j] - pinhole;
            let got = ba::reproj_residual(&state, &scene.tracks, i + 1, j).unwrap();
            assert!((got - expected).norm() <= 1e-9, "{got:?} vs {expected:?}");
        }
    }
}

#[test]
fn cost_trace_strictly_decreases_and_bounds_hold() {
    for seed in 0..3 {
        let scene = small_scene(seed, 0.3);
        let init = synth::initial_state(&scene.tracks, InitMode::Rank1).unwrap();
        let (state, report) = ba::solve(&init, &scene.tracks, &BaOptions::default()).unwrap();
        for w in report.cost_trace.windows(2) {
            assert!(w[1].cost < w[0].cost, "trace not decreasing: {w:?}");
            assert!(w[1].iteration > w[0].iteration);
        }
        assert_eq!(report.final_cost, report.cost_trace.last().unwrap().cost);
        assert!(
            state.distortion.k1.abs() <= DISTORTION_BOUND
                && state.distortion.k2.abs() <= DISTORTION_BOUND
        );
        assert!(state.omegas.iter().all(|w| *w >= OMEGA_MIN));
        assert_eq!(
            state.omegas[state.gauge_point],
            init.omegas[init.gauge_point]
        );
    }
}

#[test]
fn solve_is_deterministic() {
    let scene = small_scene(4, 0.3);
    let init = synth::initial_state(&scene.tracks, InitMode::Flat).unwrap();
    let opts = BaOptions::default();
    let (sa, mut ra) = ba::solve(&init, &scene.tracks, &opts).unwrap();
    let (sb, mut rb) = ba::solve(&init, &scene.tracks, &opts).unwrap();
    ra.wall_time_s = 0.0;
    rb.wall_time_s = 0.0;
    assert_eq!(sa, sb);
    assert_eq!(ra, rb);
}

#[test]
fn bounds_are_enforced_on_entry() {
    let scene = small_scene(5, 0.3);
    let mut state = truth_state(&scene);
    state.distortion = Distortion::new(5.0, -5.0);
    let c = state.clone().clamped();
    assert_eq!(
        (c.distortion.k1, c.distortion.k2),
        (DISTORTION_BOUND, -DISTORTION_BOUND)
    );
    state.focal = 100.0 * state.focal_init;
    assert_eq!(
        state.clamped().focal,
        4.0 * scene.truth.camera.intrinsics.focal
    );
}

#[test]
fn rejects_mismatched_tracks() {
    let a = small_scene(6, 0.3);
    let b = synth::generate(&synth::SceneConfig {
        n_frames: 3,
        m_points: 40,
        seed: 6,
        ..Default::default()
    })
    .unwrap();
    assert!(ba::residuals(&truth_state(&a), &b.tracks).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn translation_depth_gauge_leaves_residuals_unchanged(seed in 0u64..8, s in 0.1f64..10.0) {
        let scene = small_scene(seed, 0.3);
        let state = perturbed(&truth_state(&scene), seed);
        let mut scaled = state.clone();
        for p in &mut scaled.poses {
            p.translation *= s;
        }
        for w in &mut scaled.omegas {
            *w /= s;
        }
        let a = stacked(&state, &scene.tracks);
        let b = stacked(&scaled, &scene.tracks);
        prop_assert!((a - b).amax() <= 1e-8);
    }

    #[test]
    fn huber_is_continuous_and_matches_quadratic_inside(n in 0.0f64..5.0, delta in 0.1f64..3.0) {
        let r = Vector2::new(n, 0.0);
        let c = ba::robust_cost(&r, delta);
        if n <= delta {
            prop_assert!((c - n * n).abs() <= 1e-12);
        } else {
            prop_assert!(c <= n * n);
            prop_assert!((c - (2.0 * delta * n - delta * delta)).abs() <= 1e-12);
        }
        let at = ba::robust_cost(&Vector2::new(delta, 0.0), delta);
        prop_assert!((at - delta * delta).abs() <= 1e-12);
    }
}
