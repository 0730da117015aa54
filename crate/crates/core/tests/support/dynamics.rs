//! Torque-free rigid-body invariants.

use cannula_core::dynamics::{angular_momentum, rotational_energy, step, ControlInput, InertiaParams, RigidBodyState};
use cannula_core::se3::{exp_so3, BodyVelocity, Pose};
use nalgebra::Vector3;

#[derive(Debug, Clone, Copy)]
pub struct Drift {
    /// Relative change of ½ωᵀJω.
    pub energy: f64,
    /// Relative change of ‖Jω‖.
    pub momentum: f64,
    pub orthonormality: f64,
}

/// Integrates a torque-free body and measures how far the conserved
/// quantities moved.
pub fn free_spin_drift(inertia: &InertiaParams, w0: Vector3<f64>, dt: f64, steps: usize) -> Drift {
    let e0 = rotational_energy(inertia, &w0);
    let l0 = angular_momentum(inertia, &w0).norm();
    let mut x = RigidBodyState::new(Pose::identity(), BodyVelocity::new(Vector3::zeros(), w0));
    let (mut de, mut dl) = (0.0f64, 0.0f64);
    for _ in 0..steps {
        x = step(&x, &ControlInput::zero(), inertia, dt);
        de = de.max((rotational_energy(inertia, &x.vel.w) - e0).abs() / e0);
        dl = dl.max((angular_momentum(inertia, &x.vel.w).norm() - l0).abs() / l0);
    }
    Drift { energy: de, momentum: dl, orthonormality: x.pose.r.orthonormality_error() }
}

/// Orthonormality error after composing `n` small rotations without
/// re-projection.
pub fn composition_drift(n: usize, w: Vector3<f64>, dt: f64) -> f64 {
    let inc = exp_so3(&(w * dt));
    let mut r = cannula_core::se3::Rotation::identity();
    for k in 0..n {
        // Vary the increment so the product is not a pure power.
        r = if k % 2 == 0 { r.compose(&inc) } else { r.compose(&exp_so3(&(w.yzx() * dt))) };
    }
    r.orthonormality_error()
}
