//! Rotation and extended-pose group operations.
//!
//! Conventions used across the crate:
//! - attitude perturbations are applied on the right, `C = Ĉ·Exp(δφ)`;
//! - extended-pose tangent vectors are ordered `[φ, ν, ρ]` (attitude, velocity, position);
//! - planar angles are wrapped to `(-π, π]`.

use std::f64::consts::PI;
use std::ops::Mul;

use nalgebra::{Matrix3, Matrix5, SVector, Vector3};
use serde::{Deserialize, Serialize};

pub type Vector9 = SVector<f64, 9>;

const SMALL_ANGLE: f64 = 1e-7;

/// Skew-symmetric cross-product matrix.
pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Wraps an angle to `(-π, π]`.
pub fn wrap_angle(angle: f64) -> f64 {
    let mut a = angle % (2.0 * PI);
    if a <= -PI {
        a += 2.0 * PI;
    } else if a > PI {
        a -= 2.0 * PI;
    }
    a
}

/// A direction cosine matrix in SO(3).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Rotation(Matrix3<f64>);

impl Default for Rotation {
    fn default() -> Self {
        Self::identity()
    }
}

impl Rotation {
    pub fn identity() -> Self {
        Rotation(Matrix3::identity())
    }

    /// Wraps a matrix without checking orthonormality.
    pub fn from_matrix_unchecked(m: Matrix3<f64>) -> Self {
        Rotation(m)
    }

    /// Projects an arbitrary matrix onto the nearest rotation (polar decomposition).
    pub fn from_matrix_projected(m: Matrix3<f64>) -> Self {
        let svd = m.svd(true, true);
        let u = svd.u.expect("svd u");
        let v_t = svd.v_t.expect("svd v_t");
        let mut d = Matrix3::identity();
        if (u * v_t).determinant() < 0.0 {
            d[(2, 2)] = -1.0;
        }
        Rotation(u * d * v_t)
    }

    /// Rotation about the map z-axis by `yaw`.
    pub fn from_yaw(yaw: f64) -> Self {
        exp_so3(&Vector3::new(0.0, 0.0, yaw))
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.0
    }

    pub fn transpose(&self) -> Self {
        Rotation(self.0.transpose())
    }

    /// Applies a right perturbation `self·Exp(δφ)`.
    pub fn perturb(&self, dphi: &Vector3<f64>) -> Self {
        let mut r = Rotation(self.0 * exp_so3(dphi).0);
        r.renormalize();
        r
    }

    /// Right-difference `log(otherᵀ·self)`, the inverse of [`Rotation::perturb`].
    pub fn minus(&self, other: &Rotation) -> Vector3<f64> {
        log_so3(&(other.transpose() * *self))
    }

    /// Heading of the body x-axis projected on the map xy-plane.
    pub fn yaw(&self) -> f64 {
        self.0[(1, 0)].atan2(self.0[(0, 0)])
    }

    /// Largest deviation of `CᵀC` from identity.
    pub fn orthonormality_error(&self) -> f64 {
        (self.0.transpose() * self.0 - Matrix3::identity()).amax()
    }

    /// Re-orthonormalizes through one Newton step of the polar iteration when drift is visible.
    pub fn renormalize(&mut self) {
        if self.orthonormality_error() > 1e-12 {
            let inv_t = self.0.try_inverse().map(|m| m.transpose());
            if let Some(inv_t) = inv_t {
                self.0 = 0.5 * (self.0 + inv_t);
            }
        }
    }
}

impl Mul for Rotation {
    type Output = Rotation;
    fn mul(self, rhs: Rotation) -> Rotation {
        Rotation(self.0 * rhs.0)
    }
}

impl Mul<Vector3<f64>> for Rotation {
    type Output = Vector3<f64>;
    fn mul(self, rhs: Vector3<f64>) -> Vector3<f64> {
        self.0 * rhs
    }
}

impl Mul<&Vector3<f64>> for &Rotation {
    type Output = Vector3<f64>;
    fn mul(self, rhs: &Vector3<f64>) -> Vector3<f64> {
        self.0 * rhs
    }
}

/// Rodrigues formula.
pub fn exp_so3(phi: &Vector3<f64>) -> Rotation {
    let angle = phi.norm();
    let k = skew(phi);
    if angle < SMALL_ANGLE {
        return Rotation(Matrix3::identity() + k + 0.5 * k * k);
    }
    let a = angle.sin() / angle;
    let b = (1.0 - angle.cos()) / (angle * angle);
    Rotation(Matrix3::identity() + a * k + b * k * k)
}

/// Inverse of [`exp_so3`], returning the rotation vector with angle in `[0, π]`.
pub fn log_so3(c: &Rotation) -> Vector3<f64> {
    let m = &c.0;
    let cos_angle = ((m.trace() - 1.0) / 2.0).clamp(-1.0, 1.0);
    let vee = Vector3::new(m[(2, 1)] - m[(1, 2)], m[(0, 2)] - m[(2, 0)], m[(1, 0)] - m[(0, 1)]);
    let sin_angle = 0.5 * vee.norm();
    let angle = sin_angle.atan2(cos_angle);
    if angle < SMALL_ANGLE {
        // vee/2 ≈ φ (1 - φ²/6)
        return 0.5 * vee * (1.0 + angle * angle / 6.0);
    }
    if PI - angle < 1e-6 {
        // Near π the antisymmetric part vanishes; take the axis from the symmetric part.
        let s = 0.5 * (m + m.transpose()) - cos_angle * Matrix3::identity();
        let diag = Vector3::new(s[(0, 0)], s[(1, 1)], s[(2, 2)]);
        let i = diag.imax();
        let mut axis = s.column(i).into_owned();
        axis /= axis.norm();
        // Resolve the sign from the residual antisymmetric part when it is informative.
        if axis.dot(&vee) < 0.0 {
            axis = -axis;
        }
        return angle * axis;
    }
    vee * (angle / (2.0 * sin_angle))
}

/// Right Jacobian of SO(3): `Exp(φ + δ) ≈ Exp(φ)·Exp(J_r(φ)·δ)`.
pub fn right_jacobian(phi: &Vector3<f64>) -> Matrix3<f64> {
    left_jacobian(&(-phi))
}

pub fn right_jacobian_inv(phi: &Vector3<f64>) -> Matrix3<f64> {
    left_jacobian_inv(&(-phi))
}

/// Left Jacobian of SO(3).
pub fn left_jacobian(phi: &Vector3<f64>) -> Matrix3<f64> {
    let angle = phi.norm();
    let k = skew(phi);
    if angle < 1e-5 {
        return Matrix3::identity() + 0.5 * k + k * k / 6.0;
    }
    let a2 = angle * angle;
    Matrix3::identity() + (1.0 - angle.cos()) / a2 * k + (angle - angle.sin()) / (a2 * angle) * k * k
}

pub fn left_jacobian_inv(phi: &Vector3<f64>) -> Matrix3<f64> {
    let angle = phi.norm();
    let k = skew(phi);
    if angle < 1e-5 {
        return Matrix3::identity() - 0.5 * k + k * k / 12.0;
    }
    let half = 0.5 * angle;
    let coef = (1.0 - half * half.cos() / half.sin()) / (angle * angle);
    Matrix3::identity() - 0.5 * k + coef * k * k
}

/// An element of SE₂(3): attitude, velocity and position.
#[derive(Clone, Copy, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct ExtendedPose {
    pub rotation: Rotation,
    pub velocity: Vector3<f64>,
    pub position: Vector3<f64>,
}

impl ExtendedPose {
    pub fn new(rotation: Rotation, velocity: Vector3<f64>, position: Vector3<f64>) -> Self {
        Self { rotation, velocity, position }
    }

    pub fn identity() -> Self {
        Self::default()
    }

    pub fn inverse(&self) -> Self {
        let ct = self.rotation.transpose();
        Self {
            rotation: ct,
            velocity: -(ct * self.velocity),
            position: -(ct * self.position),
        }
    }

    pub fn compose(&self, other: &ExtendedPose) -> Self {
        Self {
            rotation: self.rotation * other.rotation,
            velocity: self.rotation * other.velocity + self.velocity,
            position: self.rotation * other.position + self.position,
        }
    }

    /// 5×5 homogeneous embedding `[[C, v, r], [0, 1, 0], [0, 0, 1]]`.
    pub fn to_matrix(&self) -> Matrix5<f64> {
        let mut m = Matrix5::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(self.rotation.matrix());
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.velocity);
        m.fixed_view_mut::<3, 1>(0, 4).copy_from(&self.position);
        m
    }

    pub fn from_matrix(m: &Matrix5<f64>) -> Self {
        Self {
            rotation: Rotation(m.fixed_view::<3, 3>(0, 0).into_owned()),
            velocity: m.fixed_view::<3, 1>(0, 3).into_owned(),
            position: m.fixed_view::<3, 1>(0, 4).into_owned(),
        }
    }

    /// Group exponential of a tangent vector ordered `[φ, ν, ρ]`.
    pub fn exp(xi: &Vector9) -> Self {
        let phi = xi.fixed_rows::<3>(0).into_owned();
        let jl = left_jacobian(&phi);
        Self {
            rotation: exp_so3(&phi),
            velocity: jl * xi.fixed_rows::<3>(3),
            position: jl * xi.fixed_rows::<3>(6),
        }
    }

    /// Group logarithm, ordered `[φ, ν, ρ]`.
    pub fn log(&self) -> Vector9 {
        let phi = log_so3(&self.rotation);
        let jl_inv = left_jacobian_inv(&phi);
        let mut xi = Vector9::zeros();
        xi.fixed_rows_mut::<3>(0).copy_from(&phi);
        xi.fixed_rows_mut::<3>(3).copy_from(&(jl_inv * self.velocity));
        xi.fixed_rows_mut::<3>(6).copy_from(&(jl_inv * self.position));
        xi
    }
}

impl Mul for ExtendedPose {
    type Output = ExtendedPose;
    fn mul(self, rhs: ExtendedPose) -> ExtendedPose {
        self.compose(&rhs)
    }
}

/// `X_ref⁻¹·X`; the identity when both poses agree.
pub fn left_invariant_error(x_ref: &ExtendedPose, x: &ExtendedPose) -> ExtendedPose {
    x_ref.inverse().compose(x)
}

/// A planar heading, always stored wrapped to `(-π, π]`.
#[derive(Clone, Copy, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct Heading2D(f64);

impl Heading2D {
    pub fn new(angle: f64) -> Self {
        Heading2D(wrap_angle(angle))
    }

    pub fn angle(&self) -> f64 {
        self.0
    }

    /// Wrapped difference `self - other`.
    pub fn minus(&self, other: Heading2D) -> f64 {
        wrap_angle(self.0 - other.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn assert_mat_close(a: &Matrix3<f64>, b: &Matrix3<f64>, tol: f64) {
        assert!((a - b).amax() < tol, "{a} vs {b}");
    }

    #[test]
    fn exp_of_zero_is_identity() {
        assert_eq!(exp_so3(&Vector3::zeros()).matrix(), &Matrix3::identity());
    }

    #[test]
    fn quarter_turn_about_z_maps_x_to_y() {
        let c = exp_so3(&Vector3::new(0.0, 0.0, PI / 2.0));
        let y = c * Vector3::x();
        assert!((y - Vector3::y()).norm() < 1e-12);
    }

    #[test]
    fn log_of_identity_is_zero() {
        assert_eq!(log_so3(&Rotation::identity()), Vector3::zeros());
    }

    #[test]
    fn log_exp_fixed_vector() {
        let phi = Vector3::new(0.1, 0.2, 0.3);
        assert!((log_so3(&exp_so3(&phi)) - phi).norm() < 1e-10);
    }

    #[test]
    fn log_half_turn_about_z() {
        let c = Rotation::from_matrix_unchecked(Matrix3::new(
            -1.0, 0.0, 0.0, 0.0, -1.0, 0.0, 0.0, 0.0, 1.0,
        ));
        let phi = log_so3(&c);
        assert!((phi.abs() - Vector3::new(0.0, 0.0, PI)).norm() < 1e-9, "{phi}");
        assert_mat_close(exp_so3(&phi).matrix(), c.matrix(), 1e-9);
    }

    #[test]
    fn log_near_half_turn_keeps_sign() {
        let phi = Vector3::new(0.3, -0.5, 0.8).normalize() * (PI - 1e-7);
        let back = log_so3(&exp_so3(&phi));
        assert!((back - phi).norm() < 1e-6, "{back} vs {phi}");
    }

    #[test]
    fn jacobian_inverses() {
        let phi = Vector3::new(0.4, -0.3, 1.1);
        assert_mat_close(&(right_jacobian(&phi) * right_jacobian_inv(&phi)), &Matrix3::identity(), 1e-12);
        assert_mat_close(&(left_jacobian(&phi) * left_jacobian_inv(&phi)), &Matrix3::identity(), 1e-12);
    }

    #[test]
    fn right_jacobian_first_order() {
        let phi = Vector3::new(0.4, -0.3, 1.1);
        let d = Vector3::new(1e-6, -2e-6, 0.5e-6);
        let lhs = exp_so3(&(phi + d));
        let rhs = exp_so3(&phi).perturb(&(right_jacobian(&phi) * d));
        assert_mat_close(lhs.matrix(), rhs.matrix(), 1e-11);
    }

    #[test]
    fn error_of_equal_poses_is_identity() {
        let x = ExtendedPose::new(
            exp_so3(&Vector3::new(0.2, -0.1, 0.7)),
            Vector3::new(1.0, 2.0, 3.0),
            Vector3::new(-4.0, 5.0, 0.5),
        );
        let e = left_invariant_error(&x, &x);
        assert!(e.log().norm() < 1e-12);
        let from_identity = left_invariant_error(&ExtendedPose::identity(), &x);
        assert_mat_close(from_identity.rotation.matrix(), x.rotation.matrix(), 1e-15);
        assert!((from_identity.position - x.position).norm() < 1e-15);
        assert!((from_identity.velocity - x.velocity).norm() < 1e-15);
    }

    #[test]
    fn matrix_embedding_round_trip() {
        let x = ExtendedPose::new(exp_so3(&Vector3::new(0.2, -0.1, 0.7)), Vector3::new(1.0, 2.0, 3.0), Vector3::new(-4.0, 5.0, 0.5));
        let m = x.to_matrix();
        assert_eq!(m.fixed_view::<2, 2>(3, 3).into_owned(), nalgebra::Matrix2::identity());
        let y = ExtendedPose::from_matrix(&m);
        assert_eq!(x, y);
        let prod = x.compose(&x.inverse()).to_matrix();
        assert!((prod - Matrix5::identity()).amax() < 1e-12);
        assert!(((x * x).to_matrix() - m * m).amax() < 1e-12);
    }

    #[test]
    fn wrap_convention() {
        assert_eq!(wrap_angle(PI), PI);
        assert!((wrap_angle(-PI) - PI).abs() < 1e-15);
        assert!((wrap_angle(3.0 * PI / 2.0) + PI / 2.0).abs() < 1e-12);
        assert!((Heading2D::new(0.1).minus(Heading2D::new(2.0 * PI - 0.1)) - 0.2).abs() < 1e-12);
    }

    #[test]
    fn projected_rotation_is_orthonormal() {
        let m = exp_so3(&Vector3::new(0.3, 0.1, -0.2)).matrix() + Matrix3::from_element(1e-4);
        let r = Rotation::from_matrix_projected(m);
        assert!(r.orthonormality_error() < 1e-12);
        assert!((r.matrix().determinant() - 1.0).abs() < 1e-12);
    }
}
