//! Five-axis robot model: XYZ stage carrying a yaw/pitch head whose axes meet
//! on the tool shaft. Forward kinematics is a product of exponentials and the
//! tool frame origin is the needle tip.

use nalgebra::{DMatrix, DVector, Dyn, Matrix6xX, OMatrix, Vector3, Vector6, U6};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ddp::{pick_tracking_index, Trajectory};
use crate::dynamics::RigidBodyState;
use crate::se3::{adjoint_inverse, exp_twist, BodyVelocity, Pose, Rotation, Twist};

pub type BodyJacobian = OMatrix<f64, U6, Dyn>;

#[derive(Debug, Error, PartialEq)]
pub enum KinematicsError {
    #[error("joint {joint} at {value} outside [{min}, {max}]")]
    JointLimit {
        joint: usize,
        value: f64,
        min: f64,
        max: f64,
    },
    #[error("expected {expected} joint values, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("invalid robot model: {0}")]
    InvalidModel(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JointKind {
    Prismatic,
    Revolute,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RobotModel {
    pub twists: Vec<Twist>,
    pub g0: Pose,
    /// `[min, max]` per joint (m or rad).
    pub joint_limits: Vec<[f64; 2]>,
    /// Rate bound per joint (m/s or rad/s).
    pub vel_limits: Vec<f64>,
}

/// Slack on limit checks so a command landing exactly on a bound passes.
const LIMIT_SLACK: f64 = 1e-12;

impl RobotModel {
    /// Stage-mounted yaw (world z) and pitch (world y) axes through a pivot
    /// 100 mm up the shaft; shaft tilted 30° from vertical toward −x.
    pub fn default_five_axis() -> Self {
        let tilt = 30f64.to_radians();
        let rz = Vector3::new(-tilt.sin(), 0.0, tilt.cos());
        let rx = Vector3::new(tilt.cos(), 0.0, tilt.sin());
        let r0 = Rotation::from_matrix_unchecked(nalgebra::Matrix3::from_columns(&[
            rx,
            Vector3::y(),
            rz,
        ]));
        let tip = Vector3::zeros();
        let pivot = tip + rz * 0.1;
        RobotModel {
            twists: vec![
                Twist::prismatic(Vector3::x()),
                Twist::prismatic(Vector3::y()),
                Twist::prismatic(Vector3::z()),
                Twist::revolute(Vector3::z(), pivot),
                Twist::revolute(Vector3::y(), pivot),
            ],
            g0: Pose::new(tip, r0),
            joint_limits: vec![
                [-0.015, 0.015],
                [-0.015, 0.015],
                [-0.015, 0.015],
                [-60f64.to_radians(), 60f64.to_radians()],
                [-60f64.to_radians(), 60f64.to_radians()],
            ],
            vel_limits: vec![2e-3, 2e-3, 2e-3, 0.5, 0.5],
        }
    }

    pub fn from_toml(text: &str) -> Result<Self, KinematicsError> {
        let model: RobotModel =
            toml::from_str(text).map_err(|e| KinematicsError::InvalidModel(e.to_string()))?;
        model.validate()?;
        Ok(model)
    }

    pub fn dof(&self) -> usize {
        self.twists.len()
    }

    pub fn kind(&self, joint: usize) -> JointKind {
        if self.twists[joint].w.norm() == 0.0 {
            JointKind::Prismatic
        } else {
            JointKind::Revolute
        }
    }

    pub fn validate(&self) -> Result<(), KinematicsError> {
        let n = self.dof();
        if n == 0 || self.joint_limits.len() != n || self.vel_limits.len() != n {
            return Err(KinematicsError::InvalidModel(
                "twists, joint_limits and vel_limits must have equal nonzero length".into(),
            ));
        }
        for (i, t) in self.twists.iter().enumerate() {
            let wn = t.w.norm();
            let ok = if wn == 0.0 {
                (t.v.norm() - 1.0).abs() < 1e-9
            } else {
                (wn - 1.0).abs() < 1e-9
            };
            if !ok {
                return Err(KinematicsError::InvalidModel(format!(
                    "joint {i}: prismatic twists need a unit v-part, revolute a unit ω-part"
                )));
            }
        }
        for (i, [lo, hi]) in self.joint_limits.iter().enumerate() {
            if !(lo < hi) || self.vel_limits[i] <= 0.0 {
                return Err(KinematicsError::InvalidModel(format!(
                    "joint {i}: bad limits"
                )));
            }
        }
        if self.g0.r.orthonormality_error() > 1e-9 {
            return Err(KinematicsError::InvalidModel("g0 rotation not orthonormal".into()));
        }
        Ok(())
    }

    pub fn check_limits(&self, q: &DVector<f64>) -> Result<(), KinematicsError> {
        self.check_dim(q)?;
        for (i, [lo, hi]) in self.joint_limits.iter().enumerate() {
            if !(q[i] >= lo - LIMIT_SLACK && q[i] <= hi + LIMIT_SLACK) {
                return Err(KinematicsError::JointLimit {
                    joint: i,
                    value: q[i],
                    min: *lo,
                    max: *hi,
                });
            }
        }
        Ok(())
    }

    fn check_dim(&self, q: &DVector<f64>) -> Result<(), KinematicsError> {
        if q.len() != self.dof() {
            return Err(KinematicsError::Dimension {
                expected: self.dof(),
                got: q.len(),
            });
        }
        Ok(())
    }
}

impl Default for RobotModel {
    fn default() -> Self {
        Self::default_five_axis()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointState {
    pub q: DVector<f64>,
    pub qdot: DVector<f64>,
}

impl JointState {
    pub fn at(q: DVector<f64>) -> Self {
        let n = q.len();
        JointState {
            q,
            qdot: DVector::zeros(n),
        }
    }

    /// Apply a rate command for `dt`, rejecting moves that leave the limits.
    pub fn integrate(
        &mut self,
        model: &RobotModel,
        qdot: &DVector<f64>,
        dt: f64,
    ) -> Result<(), KinematicsError> {
        let next = &self.q + qdot * dt;
        model.check_limits(&next)?;
        self.q = next;
        self.qdot = qdot.clone();
        Ok(())
    }
}

/// `g(q) = e^{ξ̂₁q₁}⋯e^{ξ̂ₙqₙ}·g(0)`.
pub fn forward_kinematics(model: &RobotModel, q: &DVector<f64>) -> Result<Pose, KinematicsError> {
    model.check_limits(q)?;
    Ok(fk_unchecked(model, q))
}

fn fk_unchecked(model: &RobotModel, q: &DVector<f64>) -> Pose {
    let mut g = model.g0;
    for i in (0..model.dof()).rev() {
        g = exp_twist(&model.twists[i], q[i]).compose(&g);
    }
    g
}

/// Body manipulator Jacobian: column i is `Ad⁻¹(e^{ξ̂ᵢqᵢ}⋯e^{ξ̂ₙqₙ}g(0))·ξᵢ`.
pub fn body_jacobian(model: &RobotModel, q: &DVector<f64>) -> Result<BodyJacobian, KinematicsError> {
    model.check_dim(q)?;
    let n = model.dof();
    let mut jac = Matrix6xX::zeros(n);
    let mut suffix = model.g0;
    for i in (0..n).rev() {
        suffix = exp_twist(&model.twists[i], q[i]).compose(&suffix);
        let col = adjoint_inverse(&suffix) * model.twists[i].to_vector();
        jac.set_column(i, &col);
    }
    Ok(jac)
}

/// Smallest singular value of the body Jacobian.
pub fn min_singular_value(model: &RobotModel, q: &DVector<f64>) -> Result<f64, KinematicsError> {
    let jac = body_jacobian(model, q)?;
    let s = jac.svd(false, false).singular_values;
    Ok(s.iter().copied().fold(f64::INFINITY, f64::min))
}

pub const DEFAULT_DAMPING: f64 = 1e-6;

/// Damped least-squares joint rates for a desired body velocity, without
/// rate limiting. Computed as `(JᵀJ + λ²I)⁻¹JᵀV`, which equals
/// `Jᵀ(JJᵀ + λ²I)⁻¹V` but stays well conditioned when `J` has rank 5.
pub fn dls_joint_rates(jac: &BodyJacobian, v: &Vector6<f64>, lambda: f64) -> DVector<f64> {
    let n = jac.ncols();
    let jt = jac.transpose();
    let normal: DMatrix<f64> = &jt * jac + DMatrix::identity(n, n) * (lambda * lambda);
    let rhs: DVector<f64> = &jt * v;
    match normal.clone().cholesky() {
        Some(c) => c.solve(&rhs),
        None => normal
            .pseudo_inverse(1e-15)
            .map(|p| p * rhs)
            .unwrap_or_else(|_| DVector::zeros(n)),
    }
}

/// Uniformly scale `qdot` so no joint exceeds its rate bound; direction is kept.
pub fn clamp_rates(model: &RobotModel, qdot: &DVector<f64>) -> DVector<f64> {
    let worst = qdot
        .iter()
        .zip(&model.vel_limits)
        .map(|(v, lim)| v.abs() / lim)
        .fold(0.0, f64::max);
    if worst > 1.0 {
        qdot / worst
    } else {
        qdot.clone()
    }
}

/// `V = J_r(q)·q̇` inverted by damped least squares, then rate limited.
pub fn resolve_joint_rates(
    model: &RobotModel,
    q: &DVector<f64>,
    v_desired: &BodyVelocity,
) -> Result<DVector<f64>, KinematicsError> {
    let jac = body_jacobian(model, q)?;
    let qdot = dls_joint_rates(&jac, &v_desired.to_vector(), DEFAULT_DAMPING);
    Ok(clamp_rates(model, &qdot))
}

/// Like [`resolve_joint_rates`] but ignoring roll about the tool axis: the
/// body ω_z row is dropped before the damped solve, so an unreachable roll
/// request cannot leak into the axis tilt or the tip velocity.
pub fn resolve_axis_rates(
    model: &RobotModel,
    q: &DVector<f64>,
    v_desired: &BodyVelocity,
) -> Result<DVector<f64>, KinematicsError> {
    let jac = body_jacobian(model, q)?;
    let n = model.dof();
    let reduced = DMatrix::from_fn(5, n, |r, c| jac[(r, c)]);
    let v = v_desired.to_vector();
    let target = DVector::from_fn(5, |r, _| v[r]);
    let jt = reduced.transpose();
    let normal: DMatrix<f64> =
        &jt * &reduced + DMatrix::identity(n, n) * (DEFAULT_DAMPING * DEFAULT_DAMPING);
    let rhs = &jt * target;
    let qdot = match normal.clone().cholesky() {
        Some(c) => c.solve(&rhs),
        None => normal
            .pseudo_inverse(1e-15)
            .map(|p| p * rhs)
            .unwrap_or_else(|_| DVector::zeros(n)),
    };
    Ok(clamp_rates(model, &qdot))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PidGains {
    pub kp: f64,
    pub ki: f64,
    pub kd: f64,
}

impl Default for PidGains {
    fn default() -> Self {
        PidGains {
            kp: 5.0,
            ki: 0.0,
            kd: 0.1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrackerParams {
    pub gains: PidGains,
    /// Proportional gain on tool-axis misalignment (1/s).
    pub axis_gain: f64,
    pub lookahead: usize,
    /// Meters per radian in the closest-pose search.
    pub rot_weight: f64,
}

impl Default for TrackerParams {
    fn default() -> Self {
        TrackerParams {
            gains: PidGains::default(),
            axis_gain: 5.0,
            lookahead: 3,
            rot_weight: 1e-3,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrackCommand {
    pub qdot: DVector<f64>,
    pub index: usize,
}

/// Stateful task-space tracker (PID memory and a non-decreasing index).
#[derive(Debug, Clone)]
pub struct TaskSpaceTracker {
    pub params: TrackerParams,
    integral: Vector3<f64>,
    prev_error: Option<Vector3<f64>>,
    last_index: usize,
}

impl TaskSpaceTracker {
    pub fn new(params: TrackerParams) -> Self {
        TaskSpaceTracker {
            params,
            integral: Vector3::zeros(),
            prev_error: None,
            last_index: 0,
        }
    }

    /// Forget PID memory and the index, for a freshly planned trajectory.
    pub fn reset(&mut self) {
        self.integral = Vector3::zeros();
        self.prev_error = None;
        self.last_index = 0;
    }

    /// Feedforward index of the most recent step.
    pub fn last_index(&self) -> usize {
        self.last_index
    }

    pub fn step(
        &mut self,
        model: &RobotModel,
        q: &DVector<f64>,
        traj: &Trajectory,
        dt: f64,
    ) -> Result<TrackCommand, KinematicsError> {
        let g = forward_kinematics(model, q)?;
        let now = RigidBodyState::at_rest(g);
        let closest = pick_tracking_index(traj, &now, 0, self.params.rot_weight);
        let index = (closest + self.params.lookahead)
            .min(traj.len())
            .max(self.last_index);
        self.last_index = index;
        let rt = g.r.matrix().transpose();

        // Feedforward from the lookahead state, feedback against the closest
        // one so the loop does not chase its own lead.
        let (mut v_cmd, anchor) = if index >= traj.len() {
            (BodyVelocity::zero(), &traj.states[traj.len()])
        } else {
            let ahead = &traj.states[index];
            let r_ref = ahead.pose.r.matrix();
            (
                BodyVelocity::new(rt * r_ref * ahead.vel.v, rt * r_ref * ahead.vel.w),
                &traj.states[closest.min(index)],
            )
        };

        let err = anchor.pose.p - g.p;
        self.integral += err * dt;
        let derivative = self
            .prev_error
            .map(|prev| (err - prev) / dt)
            .unwrap_or_else(Vector3::zeros);
        self.prev_error = Some(err);
        let pg = self.params.gains;
        let correction = err * pg.kp + self.integral * pg.ki + derivative * pg.kd;
        v_cmd.v += rt * correction;
        let axis_err = g.r.z_axis().cross(&anchor.pose.r.z_axis());
        v_cmd.w += rt * axis_err * self.params.axis_gain;

        let qdot = resolve_axis_rates(model, q, &v_cmd)?;
        Ok(TrackCommand { qdot, index })
    }
}

/// One tracking step from a fresh tracker.
pub fn track_step(
    model: &RobotModel,
    q: &DVector<f64>,
    traj: &Trajectory,
    params: &TrackerParams,
    dt: f64,
) -> Result<TrackCommand, KinematicsError> {
    TaskSpaceTracker::new(*params).step(model, q, traj, dt)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn default_model_validates() {
        let m = RobotModel::default();
        m.validate().unwrap();
        assert_eq!(m.kind(0), JointKind::Prismatic);
        assert_eq!(m.kind(4), JointKind::Revolute);
    }

    #[test]
    fn fk_at_zero_is_home() {
        let m = RobotModel::default();
        assert_eq!(forward_kinematics(&m, &DVector::zeros(5)).unwrap(), m.g0);
    }

    #[test]
    fn single_prismatic_joint_translates() {
        let m = RobotModel::default();
        let q = DVector::from_vec(vec![0.01, 0.0, 0.0, 0.0, 0.0]);
        let g = forward_kinematics(&m, &q).unwrap();
        assert_relative_eq!(g.p, m.g0.p + Vector3::new(0.01, 0.0, 0.0), epsilon = 1e-15);
        assert_eq!(g.r, m.g0.r);
    }

    #[test]
    fn limits_enforced() {
        let m = RobotModel::default();
        let q = DVector::from_vec(vec![0.02, 0.0, 0.0, 0.0, 0.0]);
        assert!(matches!(
            forward_kinematics(&m, &q),
            Err(KinematicsError::JointLimit { joint: 0, .. })
        ));
        assert!(matches!(
            forward_kinematics(&m, &DVector::zeros(4)),
            Err(KinematicsError::Dimension { .. })
        ));
    }

    #[test]
    fn revolute_joints_pivot_about_the_shaft_point() {
        let m = RobotModel::default();
        let pivot = m.g0.p + m.g0.r.z_axis() * 0.1;
        for q4 in [-0.3, 0.2] {
            for q5 in [-0.1, 0.25] {
                let q = DVector::from_vec(vec![0.0, 0.0, 0.0, q4, q5]);
                let g = forward_kinematics(&m, &q).unwrap();
                let on_axis = g.p + g.r.z_axis() * 0.1;
                assert_relative_eq!(on_axis, pivot, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn two_joint_jacobian_at_zero() {
        let (a, b) = (0.03, 0.05);
        let m = RobotModel {
            twists: vec![
                Twist::prismatic(Vector3::x()),
                Twist::revolute(Vector3::z(), Vector3::new(a, 0.0, 0.0)),
            ],
            g0: Pose::from_translation(Vector3::new(b, 0.0, 0.0)),
            joint_limits: vec![[-1.0, 1.0]; 2],
            vel_limits: vec![1.0; 2],
        };
        let j = body_jacobian(&m, &DVector::zeros(2)).unwrap();
        assert_relative_eq!(
            Vector6::from(j.column(0)),
            Vector6::new(1.0, 0.0, 0.0, 0.0, 0.0, 0.0),
            epsilon = 1e-15
        );
        assert_relative_eq!(
            Vector6::from(j.column(1)),
            Vector6::new(0.0, b - a, 0.0, 0.0, 0.0, 1.0),
            epsilon = 1e-15
        );
    }

    #[test]
    fn zero_velocity_gives_zero_rates() {
        let m = RobotModel::default();
        let qdot = resolve_joint_rates(&m, &DVector::zeros(5), &BodyVelocity::zero()).unwrap();
        assert_eq!(qdot, DVector::zeros(5));
    }

    #[test]
    fn clamp_keeps_direction() {
        let m = RobotModel::default();
        let qdot = DVector::from_vec(vec![4e-3, 1e-3, 0.0, 0.1, 0.0]);
        let c = clamp_rates(&m, &qdot);
        assert_relative_eq!(c[0], 2e-3, epsilon = 1e-18);
        assert_relative_eq!(c[1] / c[0], 0.25, epsilon = 1e-15);
    }

    #[test]
    fn model_round_trips_through_toml() {
        let m = RobotModel::default();
        let text = toml::to_string(&m).unwrap();
        assert_eq!(RobotModel::from_toml(&text).unwrap(), m);
        assert!(RobotModel::from_toml("twists = []\nbogus = 1").is_err());
    }
}
