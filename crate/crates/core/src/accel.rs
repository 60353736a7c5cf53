//! Instantaneous accelerometer update.
//!
//! The accelerometer reads the specific force, which for a thrust-driven
//! vehicle is `a_m = T_m + F_ext + b_a + n_a`. With `T_m` known, every sample
//! observes `F_ext + b_a` directly at IMU rate.

use nalgebra::{DMatrix, DVector, SMatrix};

use crate::error::{Error, Result};
use crate::propagation::ForceFrame;
use crate::so3::{rot, skew, Mat3, Vec3};
use crate::state::{idx, FilterState, ImuState, UpdateOutcome};

pub type Mat3x18 = SMatrix<f64, 3, 18>;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AccelNoise {
    /// per-axis white noise, m/s²
    pub sigma_a: f64,
}

impl Default for AccelNoise {
    /// Matches the simulator's accelerometer and thrust noise combined.
    fn default() -> Self {
        Self { sigma_a: 0.018 }
    }
}

impl AccelNoise {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_a > 0.0 && self.sigma_a.is_finite()) {
            return Err(Error::config(
                "noise.sigma_a",
                format!("must be > 0, got {}", self.sigma_a),
            ));
        }
        Ok(())
    }
}

/// Residual `a_m − (T_m + F̂ + b̂_a)` and its Jacobian over the IMU error state.
pub fn accel_residual(x: &ImuState, a_m: &Vec3, thrust: &Vec3) -> (Vec3, Mat3x18) {
    accel_residual_in(x, a_m, thrust, ForceFrame::Body)
}

pub fn accel_residual_in(
    x: &ImuState,
    a_m: &Vec3,
    thrust: &Vec3,
    frame: ForceFrame,
) -> (Vec3, Mat3x18) {
    let mut h = Mat3x18::zeros();
    h.fixed_view_mut::<3, 3>(0, idx::BA)
        .copy_from(&Mat3::identity());
    let force_body = match frame {
        ForceFrame::Body => {
            h.fixed_view_mut::<3, 3>(0, idx::FORCE)
                .copy_from(&Mat3::identity());
            x.force
        }
        ForceFrame::World => {
            // R F_w with R = (I − [δθ]×) R̂ gives ∂/∂δθ = [R̂ F_w]×
            let r = rot(&x.q);
            let fb = r * x.force;
            h.fixed_view_mut::<3, 3>(0, idx::THETA).copy_from(&skew(&fb));
            h.fixed_view_mut::<3, 3>(0, idx::FORCE).copy_from(&r);
            fb
        }
    };
    let r = a_m - (thrust + force_body + x.ba);
    (r, h)
}

/// Accelerometer update at the current filter time; never gated.
pub fn update_with_accel(
    state: &mut FilterState,
    a_m: &Vec3,
    thrust: &Vec3,
    noise: &AccelNoise,
) -> Result<UpdateOutcome> {
    update_with_accel_in(state, a_m, thrust, noise, ForceFrame::Body, None)
}

pub fn update_with_accel_in(
    state: &mut FilterState,
    a_m: &Vec3,
    thrust: &Vec3,
    noise: &AccelNoise,
    frame: ForceFrame,
    gate: Option<f64>,
) -> Result<UpdateOutcome> {
    let (r, h) = accel_residual_in(&state.imu, a_m, thrust, frame);
    let d = state.dim();
    let mut hf = DMatrix::zeros(3, d);
    hf.view_mut((0, 0), (3, 18)).copy_from(&h);
    let rn = DMatrix::identity(3, 3) * noise.sigma_a.powi(2);
    state.apply_ekf_update(&hf, &DVector::from_column_slice(r.as_slice()), &rn, gate)
}
