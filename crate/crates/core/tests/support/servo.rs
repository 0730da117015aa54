//! Visual-servoing oracles.

use cannula_core::servo::{direction_error_deg, planar_waypoint, select_xy, BroydenEstimator, BroydenParams};
use nalgebra::{Matrix2, Vector2, Vector3};

/// Image Jacobian of an untilted camera: rotation by the yaw, mirrored y,
/// scaled by the pixel density. Built from the camera geometry directly.
pub fn untilted_map(yaw_deg: f64, px_per_m: f64) -> Matrix2<f64> {
    let (s, c) = yaw_deg.to_radians().sin_cos();
    // Camera x = world-rotated x, camera y = mirrored world-rotated y.
    Matrix2::new(c, s, s, -c) * px_per_m
}

/// Closed planar loop against an exactly linear camera; returns the number
/// of gated updates needed to bring the direction error under `tol_deg`.
pub fn updates_to_converge(k: &Matrix2<f64>, goal: Vector2<f64>, tol_deg: f64, max: u32) -> Option<u32> {
    let mut est = BroydenEstimator::new(Matrix2::identity(), BroydenParams::default());
    let mut p = Vector3::zeros();
    for _ in 0..200 {
        if direction_error_deg(&est.j, k) < tol_deg {
            return Some(est.updates);
        }
        if est.updates >= max {
            return None;
        }
        let tip = k * select_xy(&p);
        let mut target = planar_waypoint(&p, &tip, &goal, &est.j, 200e-6).unwrap();
        if (goal - tip).norm() < 1.0 {
            // At the goal: step aside so the loop keeps producing secant pairs.
            target += Vector3::new(1e-4, -5e-5, 0.0);
        }
        let dp = select_xy(&(target - p));
        est.observe(&dp, &(k * dp));
        p = target;
    }
    None
}
