//! Fully actuated rigid-body model of the tool tip.
//!
//! The state is `x = (g, V)` with `ġ = g·V̂`. Translational inputs act as body
//! forces and rotational inputs as body torques in Euler's equations.
//!
//! Integration is semi-implicit: the velocity is advanced first, then the pose
//! is moved along the group exponential of the new velocity, which keeps `R`
//! on SO(3) without renormalization. The angular velocity uses the implicit
//! midpoint rule so kinetic energy and ‖Jω‖ are preserved by the discrete map.
//!
//! Linearizations are expressed in the local chart
//! `δx = (δp, δθ, δv, δω)` with `p = p̄ + δp` and `R = R̄·exp(δθ̂)`.

use nalgebra::{Matrix3, Matrix4, SMatrix, SVector, Vector3, Vector6};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::se3::{
    exp_se3, hat3, hat6, left_jacobian_so3, log_so3, right_jacobian_so3, BodyVelocity, Pose,
    Rotation,
};

pub const STATE_DIM: usize = 12;
pub const CONTROL_DIM: usize = 6;

pub type Tangent = SVector<f64, STATE_DIM>;
pub type StateMatrix = SMatrix<f64, STATE_DIM, STATE_DIM>;
pub type InputMatrix = SMatrix<f64, STATE_DIM, CONTROL_DIM>;

#[derive(Debug, Error, PartialEq)]
pub enum InertiaError {
    #[error("mass must be positive, got {0}")]
    Mass(f64),
    #[error("principal moments must be positive, got {0:?}")]
    Moments([f64; 3]),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InertiaParams {
    pub mass: f64,
    pub moments: [f64; 3],
}

impl Default for InertiaParams {
    /// Normalized planner units.
    fn default() -> Self {
        InertiaParams {
            mass: 1.0,
            moments: [1.0; 3],
        }
    }
}

impl InertiaParams {
    pub fn validate(&self) -> Result<(), InertiaError> {
        if !(self.mass > 0.0 && self.mass.is_finite()) {
            return Err(InertiaError::Mass(self.mass));
        }
        if !self.moments.iter().all(|j| *j > 0.0 && j.is_finite()) {
            return Err(InertiaError::Moments(self.moments));
        }
        Ok(())
    }

    fn j(&self) -> Vector3<f64> {
        Vector3::from(self.moments)
    }
}

/// Six body-frame inputs: three forces followed by three torques.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ControlInput(pub Vector6<f64>);

impl ControlInput {
    pub fn zero() -> Self {
        Self::default()
    }

    pub fn force(&self) -> Vector3<f64> {
        self.0.fixed_rows::<3>(0).into_owned()
    }

    pub fn torque(&self) -> Vector3<f64> {
        self.0.fixed_rows::<3>(3).into_owned()
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|x| x.is_finite())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RigidBodyState {
    pub pose: Pose,
    pub vel: BodyVelocity,
}

impl RigidBodyState {
    pub fn new(pose: Pose, vel: BodyVelocity) -> Self {
        RigidBodyState { pose, vel }
    }

    pub fn at_rest(pose: Pose) -> Self {
        RigidBodyState {
            pose,
            vel: BodyVelocity::zero(),
        }
    }

    /// Chart coordinates of `self` relative to `nominal`.
    pub fn minus(&self, nominal: &RigidBodyState) -> Tangent {
        let dp = self.pose.p - nominal.pose.p;
        let dth = log_so3(&nominal.pose.r.transpose().compose(&self.pose.r));
        let dv = self.vel.v - nominal.vel.v;
        let dw = self.vel.w - nominal.vel.w;
        let mut t = Tangent::zeros();
        t.fixed_rows_mut::<3>(0).copy_from(&dp);
        t.fixed_rows_mut::<3>(3).copy_from(&dth);
        t.fixed_rows_mut::<3>(6).copy_from(&dv);
        t.fixed_rows_mut::<3>(9).copy_from(&dw);
        t
    }

    /// Inverse of [`RigidBodyState::minus`].
    pub fn plus(&self, delta: &Tangent) -> RigidBodyState {
        let dp: Vector3<f64> = delta.fixed_rows::<3>(0).into_owned();
        let dth: Vector3<f64> = delta.fixed_rows::<3>(3).into_owned();
        let dv: Vector3<f64> = delta.fixed_rows::<3>(6).into_owned();
        let dw: Vector3<f64> = delta.fixed_rows::<3>(9).into_owned();
        RigidBodyState {
            pose: Pose::new(
                self.pose.p + dp,
                self.pose.r.compose(&crate::se3::exp_so3(&dth)),
            ),
            vel: BodyVelocity::new(self.vel.v + dv, self.vel.w + dw),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.pose.p.iter().all(|x| x.is_finite())
            && self.pose.r.matrix().iter().all(|x| x.is_finite())
            && self.vel.is_finite()
    }
}

/// Gyroscopic term of Euler's equations, `(J₂ − J₃)ω₂ω₃` and cyclic.
fn gyroscopic(j: &Vector3<f64>, w: &Vector3<f64>) -> Vector3<f64> {
    Vector3::new(
        (j.y - j.z) * w.y * w.z,
        (j.z - j.x) * w.x * w.z,
        (j.x - j.y) * w.x * w.y,
    )
}

/// Jacobian of `J⁻¹·gyroscopic(ω)` with respect to ω.
fn gyroscopic_jacobian(j: &Vector3<f64>, w: &Vector3<f64>) -> Matrix3<f64> {
    let (a, b, c) = ((j.y - j.z) / j.x, (j.z - j.x) / j.y, (j.x - j.y) / j.z);
    Matrix3::new(
        0.0,
        a * w.z,
        a * w.y,
        b * w.z,
        0.0,
        b * w.x,
        c * w.y,
        c * w.x,
        0.0,
    )
}

fn angular_accel(j: &Vector3<f64>, w: &Vector3<f64>, torque: &Vector3<f64>) -> Vector3<f64> {
    (gyroscopic(j, w) + torque).component_div(j)
}

/// Continuous-time right-hand side: `(g·V̂, V̇)`.
pub fn state_derivative(
    x: &RigidBodyState,
    u: &ControlInput,
    inertia: &InertiaParams,
) -> (Matrix4<f64>, Vector6<f64>) {
    let pose_rate = x.pose.to_homogeneous() * hat6(&x.vel);
    let lin = u.force() / inertia.mass;
    let ang = angular_accel(&inertia.j(), &x.vel.w, &u.torque());
    (pose_rate, Vector6::new(lin.x, lin.y, lin.z, ang.x, ang.y, ang.z))
}

/// Implicit midpoint step of Euler's equations, solved by Newton iteration.
/// Returns `ω'` and the midpoint at which the solution was found.
fn midpoint_omega(
    j: &Vector3<f64>,
    w: &Vector3<f64>,
    torque: &Vector3<f64>,
    dt: f64,
) -> (Vector3<f64>, Vector3<f64>) {
    let forcing = torque.component_div(j) * dt;
    let mut next = *w;
    for _ in 0..30 {
        let mid = (w + next) * 0.5;
        let residual = next - w - angular_accel(j, &mid, &Vector3::zeros()) * dt - forcing;
        if residual.amax() == 0.0 {
            break;
        }
        let jac = Matrix3::identity() - gyroscopic_jacobian(j, &mid) * (0.5 * dt);
        let delta = jac.lu().solve(&residual).unwrap_or(residual);
        next -= delta;
        if delta.amax() <= 1e-16 * (1.0 + next.amax()) {
            break;
        }
    }
    (next, (w + next) * 0.5)
}

fn advance_velocity(
    x: &RigidBodyState,
    u: &ControlInput,
    inertia: &InertiaParams,
    dt: f64,
) -> BodyVelocity {
    let v = x.vel.v + u.force() * (dt / inertia.mass);
    let (w, _) = midpoint_omega(&inertia.j(), &x.vel.w, &u.torque(), dt);
    BodyVelocity::new(v, w)
}

/// One fixed-step update of the tool-tip state.
pub fn step(
    x: &RigidBodyState,
    u: &ControlInput,
    inertia: &InertiaParams,
    dt: f64,
) -> RigidBodyState {
    let vel = advance_velocity(x, u, inertia, dt);
    RigidBodyState {
        pose: x.pose.compose(&exp_se3(&vel, dt)),
        vel,
    }
}

/// `∂(J_l(φ)·ρ)/∂φ`.
fn left_jacobian_action_derivative(phi: &Vector3<f64>, rho: &Vector3<f64>) -> Matrix3<f64> {
    let t2 = phi.norm_squared();
    let t = t2.sqrt();
    let (a, da, b, db) = if t < 2e-2 {
        let t4 = t2 * t2;
        (
            0.5 - t2 / 24.0 + t4 / 720.0,
            -1.0 / 12.0 + t2 / 180.0 - t4 / 6720.0,
            1.0 / 6.0 - t2 / 120.0 + t4 / 5040.0,
            -1.0 / 60.0 + t2 / 1260.0 - t4 / 60480.0,
        )
    } else {
        let (s, c) = t.sin_cos();
        let t3 = t2 * t;
        let t4 = t2 * t2;
        (
            (1.0 - c) / t2,
            s / t3 - 2.0 * (1.0 - c) / t4,
            (t - s) / t3,
            (1.0 - c) / t4 - 3.0 * (t - s) / (t4 * t),
        )
    };
    // da, db hold a'(θ)/θ and b'(θ)/θ.
    let pxr = phi.cross(rho);
    let pxpxr = phi.cross(&pxr);
    -hat3(rho) * a
        + pxr * phi.transpose() * da
        + (Matrix3::identity() * phi.dot(rho) + phi * rho.transpose()
            - rho * phi.transpose() * 2.0)
            * b
        + pxpxr * phi.transpose() * db
}

/// Linearization of [`step`] in the local chart: `δx' ≈ A·δx + B·δu`.
pub fn step_jacobians(
    x: &RigidBodyState,
    u: &ControlInput,
    inertia: &InertiaParams,
    dt: f64,
) -> (StateMatrix, InputMatrix) {
    let j = inertia.j();
    let v_next = x.vel.v + u.force() * (dt / inertia.mass);
    let (w_next, w_mid) = midpoint_omega(&j, &x.vel.w, &u.torque(), dt);

    let df = gyroscopic_jacobian(&j, &w_mid) * (0.5 * dt);
    let lhs = (Matrix3::identity() - df)
        .try_inverse()
        .unwrap_or_else(Matrix3::identity);
    let w_w = lhs * (Matrix3::identity() + df);
    let w_tau = lhs * Matrix3::from_diagonal(&j.map(|ji| dt / ji));

    let phi = w_next * dt;
    let rho = v_next * dt;
    let r = *x.pose.r.matrix();
    let jl = left_jacobian_so3(&phi);
    let jr = right_jacobian_so3(&phi);
    let translation = jl * rho;
    let dtrans_dw = left_jacobian_action_derivative(&phi, &rho) * dt;
    let delta_rt = crate::se3::exp_so3(&phi).matrix().transpose();

    let mut a = StateMatrix::zeros();
    a.fixed_view_mut::<3, 3>(0, 0).copy_from(&Matrix3::identity());
    a.fixed_view_mut::<3, 3>(0, 3).copy_from(&(-r * hat3(&translation)));
    a.fixed_view_mut::<3, 3>(0, 6).copy_from(&(r * jl * dt));
    a.fixed_view_mut::<3, 3>(0, 9).copy_from(&(r * dtrans_dw * w_w));
    a.fixed_view_mut::<3, 3>(3, 3).copy_from(&delta_rt);
    a.fixed_view_mut::<3, 3>(3, 9).copy_from(&(jr * dt * w_w));
    a.fixed_view_mut::<3, 3>(6, 6).copy_from(&Matrix3::identity());
    a.fixed_view_mut::<3, 3>(9, 9).copy_from(&w_w);

    let force_gain = dt / inertia.mass;
    let mut b = InputMatrix::zeros();
    b.fixed_view_mut::<3, 3>(0, 0)
        .copy_from(&(r * jl * (dt * force_gain)));
    b.fixed_view_mut::<3, 3>(0, 3).copy_from(&(r * dtrans_dw * w_tau));
    b.fixed_view_mut::<3, 3>(3, 3).copy_from(&(jr * dt * w_tau));
    b.fixed_view_mut::<3, 3>(6, 0)
        .copy_from(&(Matrix3::identity() * force_gain));
    b.fixed_view_mut::<3, 3>(9, 3).copy_from(&w_tau);
    (a, b)
}

/// Rotational kinetic energy `½ωᵀJω`.
pub fn rotational_energy(inertia: &InertiaParams, w: &Vector3<f64>) -> f64 {
    0.5 * w.dot(&inertia.j().component_mul(w))
}

/// Body angular momentum `Jω`.
pub fn angular_momentum(inertia: &InertiaParams, w: &Vector3<f64>) -> Vector3<f64> {
    inertia.j().component_mul(w)
}

#[doc(hidden)]
pub fn rotation_of(x: &RigidBodyState) -> &Rotation {
    &x.pose.r
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn top() -> InertiaParams {
        InertiaParams {
            mass: 1.0,
            moments: [1.0, 2.0, 3.0],
        }
    }

    #[test]
    fn derivative_examples() {
        let x = RigidBodyState::default();
        let (rate, acc) = state_derivative(&x, &ControlInput::zero(), &InertiaParams::default());
        assert_eq!(rate, Matrix4::zeros());
        assert_eq!(acc, Vector6::zeros());

        let m2 = InertiaParams {
            mass: 2.0,
            moments: [1.0; 3],
        };
        let u = ControlInput(Vector6::new(1.0, 0.0, 0.0, 0.0, 0.0, 0.0));
        let (_, acc) = state_derivative(&x, &u, &m2);
        assert_eq!(acc, Vector6::new(0.5, 0.0, 0.0, 0.0, 0.0, 0.0));

        let spinning = RigidBodyState::new(
            Pose::identity(),
            BodyVelocity::new(Vector3::zeros(), Vector3::new(1.0, 1.0, 1.0)),
        );
        let (_, acc) = state_derivative(&spinning, &ControlInput::zero(), &top());
        assert_relative_eq!(
            acc,
            Vector6::new(0.0, 0.0, 0.0, -1.0, 1.0, -1.0 / 3.0),
            epsilon = 1e-15
        );
    }

    #[test]
    fn pose_rate_is_g_times_hat() {
        let x = RigidBodyState::new(
            Pose::new(Vector3::new(0.1, 0.2, 0.3), Rotation::rot_y(0.4)),
            BodyVelocity::new(Vector3::new(1.0, 0.0, 0.5), Vector3::new(0.0, 0.2, 0.0)),
        );
        let (rate, _) = state_derivative(&x, &ControlInput::zero(), &top());
        assert_eq!(rate, x.pose.to_homogeneous() * hat6(&x.vel));
    }

    #[test]
    fn rest_is_a_fixed_point() {
        let x = RigidBodyState::at_rest(Pose::new(Vector3::new(1.0, 2.0, 3.0), Rotation::rot_x(0.3)));
        let y = step(&x, &ControlInput::zero(), &top(), 0.01);
        assert_eq!(x, y);
    }

    #[test]
    fn constant_descent_moves_one_millimeter() {
        let mut x = RigidBodyState::new(
            Pose::identity(),
            BodyVelocity::new(Vector3::new(0.0, 0.0, -1e-3), Vector3::zeros()),
        );
        for _ in 0..10 {
            x = step(&x, &ControlInput::zero(), &InertiaParams::default(), 0.1);
        }
        assert_relative_eq!(x.pose.p, Vector3::new(0.0, 0.0, -1e-3), epsilon = 1e-15);
    }

    #[test]
    fn symmetric_body_keeps_omega_exactly() {
        let inertia = InertiaParams {
            mass: 1.0,
            moments: [2.5; 3],
        };
        let w = Vector3::new(0.3, -1.7, 0.9);
        let mut x = RigidBodyState::new(Pose::identity(), BodyVelocity::new(Vector3::zeros(), w));
        for _ in 0..1000 {
            x = step(&x, &ControlInput::zero(), &inertia, 0.01);
        }
        assert_eq!(x.vel.w, w);
    }

    #[test]
    fn step_is_deterministic() {
        let x = RigidBodyState::new(
            Pose::new(Vector3::new(0.1, 0.0, 0.0), Rotation::rot_z(0.2)),
            BodyVelocity::new(Vector3::new(0.0, 1.0, 0.0), Vector3::new(0.5, 0.1, -0.3)),
        );
        let u = ControlInput(Vector6::new(0.1, 0.2, 0.3, 0.4, 0.5, 0.6));
        let a = step(&x, &u, &top(), 0.03);
        let b = step(&x, &u, &top(), 0.03);
        assert_eq!(a, b);
    }

    #[test]
    fn rotation_stays_orthonormal_without_renormalizing() {
        let mut x = RigidBodyState::new(
            Pose::identity(),
            BodyVelocity::new(Vector3::new(0.1, 0.0, 0.0), Vector3::new(1.0, 2.0, 0.5)),
        );
        for _ in 0..100_000 {
            x = step(&x, &ControlInput::zero(), &top(), 1e-3);
        }
        assert!(x.pose.r.orthonormality_error() < 1e-9);
    }

    #[test]
    fn jacobians_match_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let h = 1e-6;
        for _ in 0..30 {
            let rv = |rng: &mut ChaCha8Rng, s: f64| {
                Vector3::new(
                    rng.random_range(-s..s),
                    rng.random_range(-s..s),
                    rng.random_range(-s..s),
                )
            };
            let x = RigidBodyState::new(
                Pose::new(rv(&mut rng, 0.01), crate::se3::exp_so3(&rv(&mut rng, 1.0))),
                BodyVelocity::new(rv(&mut rng, 0.5), rv(&mut rng, 2.0)),
            );
            let u = ControlInput(Vector6::from_iterator((0..6).map(|_| rng.random_range(-1.0..1.0))));
            let inertia = InertiaParams {
                mass: rng.random_range(0.5..2.0),
                moments: [
                    rng.random_range(0.5..2.0),
                    rng.random_range(0.5..2.0),
                    rng.random_range(0.5..2.0),
                ],
            };
            let dt = 0.05;
            let (a, b) = step_jacobians(&x, &u, &inertia, dt);
            let nominal = step(&x, &u, &inertia, dt);
            for i in 0..STATE_DIM {
                let mut d = Tangent::zeros();
                d[i] = h;
                let fwd = step(&x.plus(&d), &u, &inertia, dt).minus(&nominal);
                let bwd = step(&x.plus(&(-d)), &u, &inertia, dt).minus(&nominal);
                let col = (fwd - bwd) / (2.0 * h);
                assert!((col - a.column(i)).amax() < 1e-6, "A col {i}: {col} vs {}", a.column(i));
            }
            for i in 0..CONTROL_DIM {
                let mut du = Vector6::zeros();
                du[i] = h;
                let fwd = step(&x, &ControlInput(u.0 + du), &inertia, dt).minus(&nominal);
                let bwd = step(&x, &ControlInput(u.0 - du), &inertia, dt).minus(&nominal);
                let col = (fwd - bwd) / (2.0 * h);
                assert!((col - b.column(i)).amax() < 1e-6, "B col {i}");
            }
        }
    }

    #[test]
    fn chart_round_trip() {
        let x = RigidBodyState::new(
            Pose::new(Vector3::new(0.1, 0.2, 0.3), Rotation::rot_y(0.4)),
            BodyVelocity::new(Vector3::new(1.0, 0.0, 0.5), Vector3::new(0.0, 0.2, 0.0)),
        );
        let d = Tangent::from_iterator((0..12).map(|i| 0.01 * (i as f64 - 5.0)));
        assert_relative_eq!(x.plus(&d).minus(&x), d, epsilon = 1e-12);
    }

    #[test]
    fn inertia_validation() {
        assert!(InertiaParams::default().validate().is_ok());
        assert_eq!(
            InertiaParams { mass: 0.0, moments: [1.0; 3] }.validate(),
            Err(InertiaError::Mass(0.0))
        );
        assert!(InertiaParams { mass: 1.0, moments: [1.0, -1.0, 1.0] }.validate().is_err());
    }
}
