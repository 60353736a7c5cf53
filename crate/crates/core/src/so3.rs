//! Rotation kernel shared by every Jacobian in the filter.
//!
//! A [`UnitQuaternion`] `q` stores the attitude of the IMU frame with respect
//! to the world frame: its rotation matrix `R(q)` maps world-frame vectors into
//! the IMU frame (`v_I = R v_W`). The error-state retraction is fixed as a
//! left-multiplicative perturbation of that map,
//!
//! ```text
//! R(q ⊞ δθ) = Exp(-δθ) · R(q) ≈ (I - [δθ]×) · R(q)
//! ```
//!
//! and gyro integration follows the matching kinematics `Ṙ = -[ω]× R`.

use nalgebra::{Matrix3, Quaternion, UnitQuaternion, Vector3};

use crate::error::{Error, Result};

pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;
pub type Quat = UnitQuaternion<f64>;

/// Cross-product matrix: `skew(v) * w == v.cross(&w)`.
pub fn skew(v: &Vec3) -> Mat3 {
    Mat3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Rotation matrix of a raw quaternion, rejecting inputs that are not unit norm.
pub fn quat_to_rot(q: &Quaternion<f64>) -> Result<Mat3> {
    let n = q.norm();
    if (n - 1.0).abs() > 1e-6 {
        return Err(Error::DegenerateRotation(format!(
            "quaternion norm {n} is not 1"
        )));
    }
    Ok(rot(&UnitQuaternion::new_unchecked(*q)))
}

/// `R(q)`, the world-to-IMU rotation matrix.
#[inline]
pub fn rot(q: &Quat) -> Mat3 {
    q.to_rotation_matrix().into_inner()
}

/// Exponential map from a rotation vector.
pub fn exp(phi: &Vec3) -> Quat {
    let theta = phi.norm();
    let half = 0.5 * theta;
    let (w, k) = if theta < 1e-8 {
        // sin(θ/2)/θ ≈ 1/2 - θ²/48
        (1.0 - theta * theta / 8.0, 0.5 - theta * theta / 48.0)
    } else {
        (half.cos(), half.sin() / theta)
    };
    UnitQuaternion::new_normalize(Quaternion::new(w, k * phi.x, k * phi.y, k * phi.z))
}

/// Logarithm map, returning a rotation vector with angle in `[0, π]`.
pub fn log(q: &Quat) -> Vec3 {
    let (mut w, mut v) = (q.w, q.imag());
    if w < 0.0 {
        w = -w;
        v = -v;
    }
    let vn = v.norm();
    if vn < 1e-12 {
        return v * (2.0 / w);
    }
    let theta = 2.0 * vn.atan2(w);
    v * (theta / vn)
}

/// Error-state retraction: applies `δθ` on the left of the world-to-IMU map.
pub fn boxplus(q: &Quat, dtheta: &Vec3) -> Quat {
    renormalize(exp(&(-dtheta)) * q)
}

/// Inverse of [`boxplus`]: returns `δθ` such that `boxplus(q2, δθ) == q1`.
pub fn boxminus(q1: &Quat, q2: &Quat) -> Result<Vec3> {
    let d = -log(&(q1 * q2.inverse()));
    if d.norm() >= std::f64::consts::PI - 1e-6 {
        return Err(Error::DegenerateRotation(format!(
            "relative angle {} is at the antipode",
            d.norm()
        )));
    }
    Ok(d)
}

/// Zeroth-order integration of `q̇ = ½Ω(ω)q` over `dt` with `ω` held constant.
pub fn integrate_gyro(q: &Quat, omega: &Vec3, dt: f64) -> Quat {
    renormalize(exp(&(-omega * dt)) * q)
}

/// SO(3) right Jacobian: `Exp(φ + δ) ≈ Exp(φ) Exp(Jr(φ) δ)`.
pub fn right_jacobian(phi: &Vec3) -> Mat3 {
    let theta2 = phi.norm_squared();
    let k = skew(phi);
    let (a, b) = if theta2 < 1e-10 {
        (0.5 - theta2 / 24.0, 1.0 / 6.0 - theta2 / 120.0)
    } else {
        let theta = theta2.sqrt();
        (
            (1.0 - theta.cos()) / theta2,
            (theta - theta.sin()) / (theta2 * theta),
        )
    };
    Mat3::identity() - k * a + k * k * b
}

/// Geodesic angle between two rotation matrices, via the trace formula.
pub fn geodesic_angle(r1: &Mat3, r2: &Mat3) -> f64 {
    let c = ((r1 * r2.transpose()).trace() - 1.0) * 0.5;
    c.clamp(-1.0, 1.0).acos()
}

fn renormalize(q: Quat) -> Quat {
    UnitQuaternion::new_normalize(q.into_inner())
}
