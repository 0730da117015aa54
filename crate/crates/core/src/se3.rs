//! Rigid-body math on SO(3) and SE(3).
//!
//! Rotations are stored as plain 3×3 matrices. Twists and body velocities use
//! the `(v, ω)` ordering throughout, so a 6-vector's first three entries are
//! the translational part.

use nalgebra::{Matrix3, Matrix4, Matrix6, UnitQuaternion, Vector3, Vector6};
use serde::{Deserialize, Serialize};

/// Below this angle the closed forms switch to their Taylor expansions.
const SMALL_ANGLE: f64 = 1e-6;
/// Within this distance of π the logarithm extracts the axis from the
/// symmetric part instead of dividing by `sin θ`.
const NEAR_PI: f64 = 1e-3;

/// An element of SO(3).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Rotation(Matrix3<f64>);

impl Rotation {
    pub fn identity() -> Self {
        Rotation(Matrix3::identity())
    }

    /// Wraps a matrix without checking orthonormality.
    pub fn from_matrix_unchecked(m: Matrix3<f64>) -> Self {
        Rotation(m)
    }

    /// Projects an arbitrary matrix onto the closest rotation (polar decomposition).
    pub fn from_matrix_orthonormalized(m: Matrix3<f64>) -> Self {
        let svd = m.svd(true, true);
        let (u, vt) = (svd.u.unwrap(), svd.v_t.unwrap());
        let mut d = Matrix3::identity();
        if (u * vt).determinant() < 0.0 {
            d[(2, 2)] = -1.0;
        }
        Rotation(u * d * vt)
    }

    pub fn from_axis_angle(axis: &Vector3<f64>, angle: f64) -> Self {
        exp_so3(&(axis.normalize() * angle))
    }

    /// Rotation about world/body z.
    pub fn rot_z(angle: f64) -> Self {
        exp_so3(&Vector3::new(0.0, 0.0, angle))
    }

    pub fn rot_y(angle: f64) -> Self {
        exp_so3(&Vector3::new(0.0, angle, 0.0))
    }

    pub fn rot_x(angle: f64) -> Self {
        exp_so3(&Vector3::new(angle, 0.0, 0.0))
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.0
    }

    pub fn transpose(&self) -> Self {
        Rotation(self.0.transpose())
    }

    pub fn compose(&self, other: &Rotation) -> Self {
        Rotation(self.0 * other.0)
    }

    pub fn apply(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.0 * v
    }

    /// Third column: the tool's longitudinal axis expressed in the spatial frame.
    pub fn z_axis(&self) -> Vector3<f64> {
        self.0.column(2).into_owned()
    }

    /// Largest entry of `R·Rᵀ − I` in absolute value.
    pub fn orthonormality_error(&self) -> f64 {
        (self.0 * self.0.transpose() - Matrix3::identity()).abs().max()
    }

    /// Scalar-first unit quaternion `(w, x, y, z)`.
    pub fn to_quaternion(&self) -> [f64; 4] {
        let q = UnitQuaternion::from_matrix(&self.0);
        [q.w, q.i, q.j, q.k]
    }
}

impl Default for Rotation {
    fn default() -> Self {
        Rotation::identity()
    }
}

/// A rigid transformation `g = (p, R)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub p: Vector3<f64>,
    pub r: Rotation,
}

impl Pose {
    pub fn new(p: Vector3<f64>, r: Rotation) -> Self {
        Pose { p, r }
    }

    pub fn identity() -> Self {
        Pose {
            p: Vector3::zeros(),
            r: Rotation::identity(),
        }
    }

    pub fn from_translation(p: Vector3<f64>) -> Self {
        Pose {
            p,
            r: Rotation::identity(),
        }
    }

    pub fn compose(&self, other: &Pose) -> Pose {
        Pose {
            p: self.p + self.r.apply(&other.p),
            r: self.r.compose(&other.r),
        }
    }

    pub fn inverse(&self) -> Pose {
        let rt = self.r.transpose();
        Pose {
            p: -(rt.apply(&self.p)),
            r: rt,
        }
    }

    pub fn transform_point(&self, x: &Vector3<f64>) -> Vector3<f64> {
        self.p + self.r.apply(x)
    }

    pub fn to_homogeneous(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(self.r.matrix());
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.p);
        m
    }

    pub fn from_homogeneous(m: &Matrix4<f64>) -> Pose {
        Pose {
            p: m.fixed_view::<3, 1>(0, 3).into_owned(),
            r: Rotation::from_matrix_unchecked(m.fixed_view::<3, 3>(0, 0).into_owned()),
        }
    }
}

impl Default for Pose {
    fn default() -> Self {
        Pose::identity()
    }
}

/// Body-frame velocity `V = (v, ω)`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct BodyVelocity {
    pub v: Vector3<f64>,
    pub w: Vector3<f64>,
}

impl BodyVelocity {
    pub fn new(v: Vector3<f64>, w: Vector3<f64>) -> Self {
        BodyVelocity { v, w }
    }

    pub fn zero() -> Self {
        Self::default()
    }

    pub fn to_vector(&self) -> Vector6<f64> {
        stack(&self.v, &self.w)
    }

    pub fn from_vector(x: &Vector6<f64>) -> Self {
        BodyVelocity {
            v: x.fixed_rows::<3>(0).into_owned(),
            w: x.fixed_rows::<3>(3).into_owned(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.v.iter().chain(self.w.iter()).all(|x| x.is_finite())
    }
}

/// Screw coordinates `ξ = (v, ω)` of a one-parameter subgroup.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Twist {
    pub v: Vector3<f64>,
    pub w: Vector3<f64>,
}

impl Twist {
    pub fn new(v: Vector3<f64>, w: Vector3<f64>) -> Self {
        Twist { v, w }
    }

    /// Pure translation along `axis`.
    pub fn prismatic(axis: Vector3<f64>) -> Self {
        Twist {
            v: axis,
            w: Vector3::zeros(),
        }
    }

    /// Rotation about the line through `point` with direction `axis`.
    pub fn revolute(axis: Vector3<f64>, point: Vector3<f64>) -> Self {
        Twist {
            v: -axis.cross(&point),
            w: axis,
        }
    }

    pub fn to_vector(&self) -> Vector6<f64> {
        stack(&self.v, &self.w)
    }

    pub fn from_vector(x: &Vector6<f64>) -> Self {
        Twist {
            v: x.fixed_rows::<3>(0).into_owned(),
            w: x.fixed_rows::<3>(3).into_owned(),
        }
    }
}

fn stack(a: &Vector3<f64>, b: &Vector3<f64>) -> Vector6<f64> {
    Vector6::new(a.x, a.y, a.z, b.x, b.y, b.z)
}

/// Skew-symmetric matrix with `hat3(ω)·x = ω × x`.
pub fn hat3(w: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -w.z, w.y, w.z, 0.0, -w.x, -w.y, w.x, 0.0)
}

/// Inverse of [`hat3`]; reads the off-diagonal entries of a skew matrix.
pub fn vee3(m: &Matrix3<f64>) -> Vector3<f64> {
    Vector3::new(m[(2, 1)], m[(0, 2)], m[(1, 0)])
}

/// `[hat3(ω) v; 0 0]`.
pub fn hat6(vel: &BodyVelocity) -> Matrix4<f64> {
    let mut m = Matrix4::zeros();
    m.fixed_view_mut::<3, 3>(0, 0).copy_from(&hat3(&vel.w));
    m.fixed_view_mut::<3, 1>(0, 3).copy_from(&vel.v);
    m
}

/// Rodrigues' formula.
pub fn exp_so3(phi: &Vector3<f64>) -> Rotation {
    let theta2 = phi.norm_squared();
    let theta = theta2.sqrt();
    let k = hat3(phi);
    let (a, b) = if theta < SMALL_ANGLE {
        (1.0 - theta2 / 6.0, 0.5 - theta2 / 24.0)
    } else {
        (theta.sin() / theta, (1.0 - theta.cos()) / theta2)
    };
    Rotation(Matrix3::identity() + k * a + k * k * b)
}

/// Rotation vector of `R` with angle in `[0, π]`.
pub fn log_so3(r: &Rotation) -> Vector3<f64> {
    let m = r.matrix();
    let cos_theta = ((m.trace() - 1.0) * 0.5).clamp(-1.0, 1.0);
    let theta = cos_theta.acos();
    let skew = vee3(&(m - m.transpose())) * 0.5; // sin θ · axis
    if theta < SMALL_ANGLE {
        return skew * (1.0 + theta * theta / 6.0);
    }
    if std::f64::consts::PI - theta > NEAR_PI {
        return skew * (theta / theta.sin());
    }
    // (R + Rᵀ)/2 = cos θ·I + (1 − cos θ)·a·aᵀ
    let sym = (m + m.transpose()) * 0.5;
    let aat = (sym - Matrix3::identity() * cos_theta) / (1.0 - cos_theta);
    let i = (0..3)
        .max_by(|&a, &b| aat[(a, a)].total_cmp(&aat[(b, b)]))
        .unwrap();
    let mut axis = aat.column(i).into_owned() / aat[(i, i)].max(0.0).sqrt();
    axis.normalize_mut();
    if axis.dot(&skew) < 0.0 {
        axis = -axis;
    }
    axis * theta
}

/// Left Jacobian of SO(3): `exp(φ + δ) ≈ exp(J_l(φ)·δ)·exp(φ)`.
pub fn left_jacobian_so3(phi: &Vector3<f64>) -> Matrix3<f64> {
    let theta2 = phi.norm_squared();
    let theta = theta2.sqrt();
    let k = hat3(phi);
    let (a, b) = if theta < 1e-4 {
        (0.5 - theta2 / 24.0, 1.0 / 6.0 - theta2 / 120.0)
    } else {
        (
            (1.0 - theta.cos()) / theta2,
            (theta - theta.sin()) / (theta2 * theta),
        )
    };
    Matrix3::identity() + k * a + k * k * b
}

/// Right Jacobian of SO(3): `exp(φ + δ) ≈ exp(φ)·exp(J_r(φ)·δ)`.
pub fn right_jacobian_so3(phi: &Vector3<f64>) -> Matrix3<f64> {
    left_jacobian_so3(&(-phi))
}

/// Inverse of the right Jacobian: `log(exp(φ)·exp(δ)) ≈ φ + J_r⁻¹(φ)·δ`.
pub fn right_jacobian_inv_so3(phi: &Vector3<f64>) -> Matrix3<f64> {
    let theta2 = phi.norm_squared();
    let theta = theta2.sqrt();
    let k = hat3(phi);
    let c = if theta < 1e-4 {
        1.0 / 12.0 + theta2 / 720.0
    } else {
        1.0 / theta2 - (1.0 + theta.cos()) / (2.0 * theta * theta.sin())
    };
    Matrix3::identity() + k * 0.5 + k * k * c
}

/// Exponential of a body velocity integrated over `dt`:
/// `exp(hat6(V)·dt)` in closed form.
pub fn exp_se3(vel: &BodyVelocity, dt: f64) -> Pose {
    let phi = vel.w * dt;
    Pose {
        p: left_jacobian_so3(&phi) * (vel.v * dt),
        r: exp_so3(&phi),
    }
}

/// `exp(ξ̂·θ)`.
pub fn exp_twist(xi: &Twist, theta: f64) -> Pose {
    exp_se3(&BodyVelocity { v: xi.v, w: xi.w }, theta)
}

/// Adjoint map acting on `(v, ω)` twists.
pub fn adjoint(g: &Pose) -> Matrix6<f64> {
    let r = g.r.matrix();
    let mut m = Matrix6::zeros();
    m.fixed_view_mut::<3, 3>(0, 0).copy_from(r);
    m.fixed_view_mut::<3, 3>(0, 3).copy_from(&(hat3(&g.p) * r));
    m.fixed_view_mut::<3, 3>(3, 3).copy_from(r);
    m
}

/// `Ad_{g}⁻¹ = Ad_{g⁻¹}`, assembled directly from `(p, R)`.
pub fn adjoint_inverse(g: &Pose) -> Matrix6<f64> {
    let rt = g.r.matrix().transpose();
    let mut m = Matrix6::zeros();
    m.fixed_view_mut::<3, 3>(0, 0).copy_from(&rt);
    m.fixed_view_mut::<3, 3>(0, 3).copy_from(&(-rt * hat3(&g.p)));
    m.fixed_view_mut::<3, 3>(3, 3).copy_from(&rt);
    m
}

/// Smallest rotation taking unit vector `from` onto unit vector `to`.
pub fn rotation_between(from: &Vector3<f64>, to: &Vector3<f64>) -> Rotation {
    let (a, b) = (from.normalize(), to.normalize());
    let axis = a.cross(&b);
    let s = axis.norm();
    let c = a.dot(&b);
    if s < 1e-15 {
        if c > 0.0 {
            return Rotation::identity();
        }
        // Antiparallel: any perpendicular axis works.
        let helper = if a.x.abs() < 0.9 {
            Vector3::x()
        } else {
            Vector3::y()
        };
        return exp_so3(&(a.cross(&helper).normalize() * std::f64::consts::PI));
    }
    exp_so3(&(axis / s * s.atan2(c)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_vec(rng: &mut ChaCha8Rng, scale: f64) -> Vector3<f64> {
        Vector3::new(
            rng.random_range(-scale..scale),
            rng.random_range(-scale..scale),
            rng.random_range(-scale..scale),
        )
    }

    fn rand_pose(rng: &mut ChaCha8Rng) -> Pose {
        Pose::new(rand_vec(rng, 2.0), exp_so3(&rand_vec(rng, 1.5)))
    }

    #[test]
    fn hat3_layout_and_cross_product() {
        assert_eq!(hat3(&Vector3::zeros()), Matrix3::zeros());
        let m = hat3(&Vector3::new(0.0, 0.0, 1.0));
        assert_eq!(m, Matrix3::new(0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0));
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let a = rand_vec(&mut rng, 3.0);
            let b = rand_vec(&mut rng, 3.0);
            assert_relative_eq!(hat3(&a) * b, a.cross(&b), epsilon = 1e-12);
            assert_eq!(hat3(&a).transpose(), -hat3(&a));
        }
    }

    #[test]
    fn hat6_blocks() {
        assert_eq!(hat6(&BodyVelocity::zero()), Matrix4::zeros());
        let m = hat6(&BodyVelocity::new(Vector3::x(), Vector3::zeros()));
        let mut expected = Matrix4::zeros();
        expected[(0, 3)] = 1.0;
        assert_eq!(m, expected);

        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20 {
            let vel = BodyVelocity::new(rand_vec(&mut rng, 1.0), rand_vec(&mut rng, 1.0));
            let m = hat6(&vel);
            let (w, v) = (vel.w, vel.v);
            // independent entry-by-entry construction
            let expected = Matrix4::new(
                0.0, -w.z, w.y, v.x, w.z, 0.0, -w.x, v.y, -w.y, w.x, 0.0, v.z, 0.0, 0.0, 0.0, 0.0,
            );
            assert_eq!(m, expected);
        }
    }

    /// Truncated power series of a 4×4 matrix exponential.
    fn expm_series(a: &Matrix4<f64>, terms: usize) -> Matrix4<f64> {
        let mut sum = Matrix4::identity();
        let mut term = Matrix4::identity();
        for k in 1..terms {
            term = term * a / k as f64;
            sum += term;
        }
        sum
    }

    #[test]
    fn exp_twist_special_cases() {
        let xi = Twist::new(Vector3::new(1.0, 2.0, 3.0), Vector3::new(0.3, -0.1, 0.2));
        let g = exp_twist(&xi, 0.0);
        assert_eq!(g.p, Vector3::zeros());
        assert_relative_eq!(*g.r.matrix(), Matrix3::identity(), epsilon = 1e-15);

        let g = exp_twist(
            &Twist::new(Vector3::zeros(), Vector3::z()),
            std::f64::consts::FRAC_PI_2,
        );
        assert_relative_eq!(g.r.apply(&Vector3::x()), Vector3::y(), epsilon = 1e-15);
        assert_relative_eq!(g.p, Vector3::zeros(), epsilon = 1e-15);
    }

    #[test]
    fn exp_twist_matches_series() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let xi = Twist::new(rand_vec(&mut rng, 1.0), rand_vec(&mut rng, 1.0));
            let theta = rng.random_range(-1.0..1.0);
            let closed = exp_twist(&xi, theta).to_homogeneous();
            let series = expm_series(&(hat6(&BodyVelocity::new(xi.v, xi.w)) * theta), 20);
            assert!((closed - series).abs().max() < 1e-10);
        }
    }

    #[test]
    fn log_special_cases() {
        assert_eq!(log_so3(&Rotation::identity()), Vector3::zeros());
        assert_relative_eq!(
            log_so3(&Rotation::rot_z(0.3)),
            Vector3::new(0.0, 0.0, 0.3),
            epsilon = 1e-14
        );
        // Exactly π about a skewed axis.
        let axis = Vector3::new(1.0, -2.0, 0.5).normalize();
        let r = Rotation::from_axis_angle(&axis, std::f64::consts::PI);
        let w = log_so3(&r);
        assert_relative_eq!(w.norm(), std::f64::consts::PI, epsilon = 1e-9);
        assert!((exp_so3(&w).matrix() - r.matrix()).abs().max() < 1e-9);
        // Tiny angles go through the Taylor branch.
        let w = Vector3::new(1e-8, -3e-8, 2e-8);
        assert_relative_eq!(log_so3(&exp_so3(&w)), w, epsilon = 1e-20);
    }

    #[test]
    fn log_exp_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let max = std::f64::consts::PI - 1e-3;
        for _ in 0..1000 {
            let axis = rand_vec(&mut rng, 1.0).normalize();
            let w = axis * rng.random_range(1e-9..max);
            let back = log_so3(&exp_so3(&w));
            assert!((back - w).norm() < 1e-9, "{w:?} -> {back:?}");
            let angle = back.norm();
            assert!((0.0..=std::f64::consts::PI).contains(&angle));
        }
        // Angles inside the near-π band still reconstruct the rotation.
        for _ in 0..200 {
            let axis = rand_vec(&mut rng, 1.0).normalize();
            let r = exp_so3(&(axis * rng.random_range(max..std::f64::consts::PI)));
            assert!((exp_so3(&log_so3(&r)).matrix() - r.matrix()).abs().max() < 1e-9);
        }
    }

    #[test]
    fn adjoint_inverse_properties() {
        assert_eq!(adjoint_inverse(&Pose::identity()), Matrix6::identity());
        let g = Pose::from_translation(Vector3::x());
        let ad = adjoint_inverse(&g);
        let block = ad.fixed_view::<3, 3>(0, 3).into_owned();
        assert_eq!(block, -hat3(&Vector3::x()));

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..100 {
            let g1 = rand_pose(&mut rng);
            let g2 = rand_pose(&mut rng);
            assert!((adjoint(&g1) * adjoint_inverse(&g1) - Matrix6::identity()).abs().max() < 1e-10);
            assert!((adjoint_inverse(&g1) - adjoint(&g1.inverse())).abs().max() < 1e-12);
            let lhs = adjoint_inverse(&g1.compose(&g2));
            let rhs = adjoint_inverse(&g2) * adjoint_inverse(&g1);
            assert!((lhs - rhs).abs().max() < 1e-10);
        }
    }

    #[test]
    fn jacobians_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let h = 1e-6;
        for _ in 0..50 {
            let phi = rand_vec(&mut rng, 1.2);
            let jr = right_jacobian_so3(&phi);
            let jr_inv = right_jacobian_inv_so3(&phi);
            assert!((jr * jr_inv - Matrix3::identity()).abs().max() < 1e-10);
            for i in 0..3 {
                let mut d = Vector3::zeros();
                d[i] = h;
                // exp(φ)ᵀ exp(φ + δ) ≈ exp(J_r δ)
                let rel = exp_so3(&phi).transpose().compose(&exp_so3(&(phi + d)));
                let fd = log_so3(&rel) / h;
                assert!((fd - jr.column(i)).norm() < 1e-5);
            }
        }
    }

    #[test]
    fn long_composition_stays_orthonormal() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut r = Rotation::identity();
        for _ in 0..1000 {
            r = r.compose(&exp_so3(&rand_vec(&mut rng, 2.0)));
        }
        assert!(r.orthonormality_error() < 1e-6);
        let fixed = Rotation::from_matrix_orthonormalized(*r.matrix());
        assert!(fixed.orthonormality_error() < 1e-12);
        assert!((fixed.matrix() - r.matrix()).abs().max() < 1e-6);
    }

    #[test]
    fn rotation_between_aligns_axes() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..100 {
            let a = rand_vec(&mut rng, 1.0).normalize();
            let b = rand_vec(&mut rng, 1.0).normalize();
            let r = rotation_between(&a, &b);
            assert_relative_eq!(r.apply(&a), b, epsilon = 1e-12);
            // minimal: angle equals the angle between the vectors
            assert_relative_eq!(log_so3(&r).norm(), a.dot(&b).clamp(-1.0, 1.0).acos(), epsilon = 1e-9);
        }
        let r = rotation_between(&Vector3::z(), &-Vector3::z());
        assert_relative_eq!(r.apply(&Vector3::z()), -Vector3::z(), epsilon = 1e-12);
    }

    #[test]
    fn quaternion_is_unit() {
        let q = Rotation::rot_x(0.7).to_quaternion();
        let n: f64 = q.iter().map(|x| x * x).sum();
        assert_relative_eq!(n, 1.0, epsilon = 1e-14);
        assert_relative_eq!(q[0], (0.35f64).cos(), epsilon = 1e-14);
    }
}
