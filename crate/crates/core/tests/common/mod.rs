#![allow(dead_code)]

use smd::ba::BaState;
use smd::geometry::InverseDepthPoint;
use smd::synth::{self, Scene, SceneConfig};

pub fn small_scene(seed: u64, noise_px: f64) -> Scene {
    synth::generate(&SceneConfig {
        n_frames: 4,
        m_points: 40,
        noise_px,
        seed,
        ..SceneConfig::default()
    })
    .unwrap()
}

/// Bundle-adjustment state at the generator's ground truth.
pub fn truth_state(scene: &Scene) -> BaState {
    let t = &scene.truth;
    let points: Vec<InverseDepthPoint> = t
        .omegas
        .iter()
        .map(|&omega| InverseDepthPoint {
            ref_normalized: Default::default(),
            omega,
        })
        .collect();
    let mut state = BaState::new(t.camera.intrinsics, t.poses.clone(), &points).unwrap();
    state.distortion = t.camera.distortion;
    state
}

pub fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[(v.len() - 1) / 2]
}
