//! Uncalibrated image-based servoing: a Broyden estimate of the map from
//! horizontal tip motion to image motion, and the waypoints built from it.

use nalgebra::{Matrix2, Vector2, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::se3::{rotation_between, Rotation};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ServoError {
    #[error("image Jacobian is singular (det {det:.3e})")]
    SingularJacobian { det: f64 },
    #[error("tip and goal coincide with the remote centre of motion")]
    DegenerateAxis,
}

/// Horizontal part of a robot-frame position.
pub fn select_xy(p: &Vector3<f64>) -> Vector2<f64> {
    Vector2::new(p.x, p.y)
}

/// `J + β (Δi − J Δp) Δpᵀ / |Δp|²`.
pub fn broyden_update(j: &Matrix2<f64>, dp: &Vector2<f64>, di: &Vector2<f64>, beta: f64) -> Matrix2<f64> {
    let n2 = dp.norm_squared();
    if n2 == 0.0 {
        return *j;
    }
    j + (di - j * dp) * dp.transpose() * (beta / n2)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BroydenParams {
    pub beta: f64,
    /// Smallest image motion that triggers an update.
    pub min_image_step_px: f64,
    /// Smallest horizontal robot motion that triggers an update.
    pub min_robot_step: f64,
}

impl Default for BroydenParams {
    fn default() -> Self {
        BroydenParams { beta: 0.5, min_image_step_px: 0.8, min_robot_step: 5e-6 }
    }
}

/// Running image Jacobian estimate in pixels per metre.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BroydenEstimator {
    pub j: Matrix2<f64>,
    pub params: BroydenParams,
    pub updates: u32,
}

impl BroydenEstimator {
    pub fn new(j0: Matrix2<f64>, params: BroydenParams) -> Self {
        BroydenEstimator { j: j0, params, updates: 0 }
    }

    /// Applies the update when both motions clear their gates. Returns
    /// whether the estimate changed.
    pub fn observe(&mut self, dp: &Vector2<f64>, di: &Vector2<f64>) -> bool {
        if dp.norm() < self.params.min_robot_step || di.norm() < self.params.min_image_step_px {
            return false;
        }
        self.j = broyden_update(&self.j, dp, di, self.params.beta);
        self.updates += 1;
        true
    }
}

/// Largest angle between predicted and true image motion over all unit
/// horizontal directions, in degrees.
pub fn direction_error_deg(j_est: &Matrix2<f64>, j_true: &Matrix2<f64>) -> f64 {
    (0..720)
        .map(|k| {
            let a = k as f64 * std::f64::consts::PI / 360.0;
            let d = Vector2::new(a.cos(), a.sin());
            let (u, v) = (j_est * d, j_true * d);
            if u.norm() == 0.0 || v.norm() == 0.0 {
                return 180.0;
            }
            (u.x * v.y - u.y * v.x).abs().atan2(u.dot(&v)).to_degrees()
        })
        .fold(0.0, f64::max)
}

/// Horizontal step toward the goal pixel through the inverse Jacobian,
/// capped at `max_step`. The height is unchanged.
pub fn planar_waypoint(
    p: &Vector3<f64>,
    tip_px: &Vector2<f64>,
    goal_px: &Vector2<f64>,
    j: &Matrix2<f64>,
    max_step: f64,
) -> Result<Vector3<f64>, ServoError> {
    let det = j.determinant();
    let scale = j.norm_squared();
    if !(det.abs() > 1e-12 * scale) || !det.is_finite() {
        return Err(ServoError::SingularJacobian { det });
    }
    let inv = j.try_inverse().ok_or(ServoError::SingularJacobian { det })?;
    let mut step = inv * (goal_px - tip_px);
    let n = step.norm();
    if n > max_step {
        step *= max_step / n;
    }
    Ok(Vector3::new(p.x + step.x, p.y + step.y, p.z))
}

/// Straight-down waypoint `eta` below `p`.
pub fn lowering_waypoint(p: &Vector3<f64>, eta: f64) -> Vector3<f64> {
    Vector3::new(p.x, p.y, p.z - eta)
}

/// Rotates `current` minimally so its z axis points from `p` at `p_rcm`.
pub fn aligned_orientation(
    current: &Rotation,
    p: &Vector3<f64>,
    p_rcm: &Vector3<f64>,
) -> Result<Rotation, ServoError> {
    let axis = p_rcm - p;
    if axis.norm() < 1e-9 {
        return Err(ServoError::DegenerateAxis);
    }
    Ok(rotation_between(&current.z_axis(), &axis.normalize()).compose(current))
}
