use cannula_core::scene::{CameraConfig, CameraModel};
use cannula_core::servo::{planar_waypoint, select_xy};
use nalgebra::{Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

mod support;

use support::servo::*;

#[test]
fn untilted_camera_is_linear_with_known_map() {
    let cfg = CameraConfig { tilt_deg: 0.0, ..CameraConfig::default() };
    let cam = CameraModel::looking_at(&cfg, Vector3::zeros());
    let k = untilted_map(cfg.yaw_deg, cfg.px_per_mm * 1e3);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..50 {
        let a = Vector3::new(rng.random_range(-1e-3..1e-3), rng.random_range(-1e-3..1e-3), 0.0);
        let d = Vector3::new(rng.random_range(-2e-4..2e-4), rng.random_range(-2e-4..2e-4), 0.0);
        let di = cam.project(&(a + d)).unwrap() - cam.project(&a).unwrap();
        assert!((di - k * select_xy(&d)).norm() < 1e-9);
    }
}

#[test]
fn broyden_converges_within_ten_updates() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for yaw in [0.0, 20.0, 45.0, 120.0, -70.0] {
        let k = untilted_map(yaw, 136_330.0);
        for _ in 0..10 {
            let goal = Vector2::new(rng.random_range(-80.0..80.0), rng.random_range(-80.0..80.0));
            let n = updates_to_converge(&k, goal, 5.0, 10);
            assert!(n.is_some(), "yaw {yaw} goal {goal:?} did not converge");
        }
    }
}

#[test]
fn exact_jacobian_lands_on_goal() {
    let k = untilted_map(20.0, 136_330.0);
    let p = Vector3::new(1e-4, 2e-4, -3e-4);
    let tip = k * select_xy(&p);
    let goal = tip + Vector2::new(7.0, -11.0);
    let w = planar_waypoint(&p, &tip, &goal, &k, 200e-6).unwrap();
    assert!((k * select_xy(&w) - goal).norm() < 1e-9);
}
