//! Kinematics oracles.

use cannula_core::kinematics::{body_jacobian, forward_kinematics, JointKind, RobotModel};
use cannula_core::se3::{log_so3, Pose};
use nalgebra::{DVector, Matrix4, Rotation3, Unit, Vector6};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn random_q(model: &RobotModel, rng: &mut ChaCha8Rng) -> DVector<f64> {
    DVector::from_iterator(
        model.dof(),
        model
            .joint_limits
            .iter()
            .map(|[lo, hi]| rng.random_range(lo * 0.9..hi * 0.9)),
    )
}

/// Homogeneous transform of one joint built from elementary translations
/// and an axis-angle rotation about a point on the joint axis.
pub fn joint_transform(model: &RobotModel, i: usize, qi: f64) -> Matrix4<f64> {
    let xi = model.twists[i];
    match model.kind(i) {
        JointKind::Prismatic => Matrix4::new_translation(&(xi.v * qi)),
        JointKind::Revolute => {
            // A point on the axis: ω × v for unit ω recovers the foot point.
            let point = xi.w.cross(&xi.v);
            let rot = Rotation3::from_axis_angle(&Unit::new_normalize(xi.w), qi).to_homogeneous();
            Matrix4::new_translation(&point) * rot * Matrix4::new_translation(&(-point))
        }
    }
}

/// Body-frame twist taking `a` to `b` per unit parameter, to first order.
pub fn body_difference(a: &Pose, b: &Pose, h: f64) -> Vector6<f64> {
    let v = a.r.matrix().transpose() * (b.p - a.p) / h;
    let w = log_so3(&a.r.transpose().compose(&b.r)) / h;
    Vector6::new(v.x, v.y, v.z, w.x, w.y, w.z)
}

/// Worst entry error of the body Jacobian against forward differences of
/// forward kinematics over `count` random configurations.
pub fn worst_jacobian_error(seed: u64, count: usize) -> f64 {
    let model = RobotModel::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let h = 1e-7;
    let mut worst: f64 = 0.0;
    for _ in 0..count {
        let q = random_q(&model, &mut rng);
        let jac = body_jacobian(&model, &q).unwrap();
        let g = forward_kinematics(&model, &q).unwrap();
        for i in 0..model.dof() {
            let mut qp = q.clone();
            qp[i] += h;
            let gp = forward_kinematics(&model, &qp).unwrap();
            worst = worst.max((body_difference(&g, &gp, h) - jac.column(i)).amax());
        }
    }
    worst
}
