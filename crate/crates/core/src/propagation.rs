//! IMU-state propagation driven by gyro and mass-normalized thrust.
//!
//! Continuous model:
//!
//! ```text
//! q̇ = ½ Ω(ω_m − b_ω) q
//! ṗ = v
//! v̇ = Rᵀ (T_m + F_ext) + g
//! ḃ_ω = n_bω,  ḃ_a = n_ba,  Ḟ_ext = n_F
//! ```
//!
//! Over one step the angular rate is held constant, so the attitude has a
//! closed form and the classic RK4 stages for `(p, v)` reduce to Simpson's
//! rule on the world acceleration `a(τ)`. The error-state transition is the
//! exact first-order Jacobian of that discrete map, which is what the
//! finite-difference suite checks.

use nalgebra::{DMatrix, SMatrix};

use crate::error::{Error, Result};
use crate::so3::{integrate_gyro, right_jacobian, rot, skew, Mat3, Vec3};
use crate::state::{idx, FilterState, ImuState, IMU_DIM};

pub type Mat18 = SMatrix<f64, 18, 18>;

/// Continuous-time noise densities of the process model.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProcessNoise {
    /// gyro white noise, rad/s/√Hz
    pub sigma_w: f64,
    /// gyro bias random walk, rad/s²/√Hz
    pub sigma_bw: f64,
    /// accel bias random walk, m/s³/√Hz
    pub sigma_ba: f64,
    /// external force random walk, m/s³/√Hz
    pub sigma_f: f64,
    /// thrust noise folded into the velocity equation, m/s²·√s
    pub sigma_t: f64,
}

impl Default for ProcessNoise {
    fn default() -> Self {
        Self {
            sigma_w: 1.0e-3,
            sigma_bw: 1.0e-4,
            sigma_ba: 1.0e-3,
            sigma_f: 2.0,
            sigma_t: 0.01,
        }
    }
}

impl ProcessNoise {
    pub fn validate(&self) -> Result<()> {
        let named = [
            ("noise.sigma_w", self.sigma_w),
            ("noise.sigma_bw", self.sigma_bw),
            ("noise.sigma_ba", self.sigma_ba),
            ("noise.sigma_f", self.sigma_f),
            ("noise.sigma_t", self.sigma_t),
        ];
        for (k, v) in named {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::config(k, format!("must be > 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// Gyro and thrust sample driving one propagation step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PropagationInput {
    pub omega: Vec3,
    pub thrust: Vec3,
    pub dt: f64,
}

impl PropagationInput {
    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0 && self.dt <= 0.1) {
            return Err(Error::precondition(
                "dynamic_propagation",
                format!("dt must be in (0, 0.1], got {}", self.dt),
            ));
        }
        Ok(())
    }
}

/// Which frame the external force lives in.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum ForceFrame {
    #[default]
    Body,
    World,
}

/// World-frame specific-force term and the body-frame vector that rotates with the vehicle.
fn body_vector(x: &ImuState, thrust: &Vec3, frame: ForceFrame) -> Vec3 {
    match frame {
        ForceFrame::Body => thrust + x.force,
        ForceFrame::World => *thrust,
    }
}

fn world_extra(x: &ImuState, frame: ForceFrame) -> Vec3 {
    match frame {
        ForceFrame::Body => Vec3::zeros(),
        ForceFrame::World => x.force,
    }
}

/// Mean propagation over `u.dt`.
pub fn propagate_mean(x: &ImuState, u: &PropagationInput, g: &Vec3) -> ImuState {
    propagate_mean_in(x, u, g, ForceFrame::Body)
}

pub fn propagate_mean_in(x: &ImuState, u: &PropagationInput, g: &Vec3, frame: ForceFrame) -> ImuState {
    let w = u.omega - x.bg;
    let dt = u.dt;
    let f = body_vector(x, &u.thrust, frame);
    let extra = world_extra(x, frame) + g;
    let accel_at = |tau: f64| -> Vec3 {
        let r = rot(&integrate_gyro(&x.q, &w, tau));
        r.transpose() * f + extra
    };
    let a0 = x.q.inverse_transform_vector(&f) + extra;
    let ah = accel_at(0.5 * dt);
    let q1 = integrate_gyro(&x.q, &w, dt);
    let a1 = rot(&q1).transpose() * f + extra;

    // RK4 on (p, v) with v̇ = a(τ): k1=(v0,a0), k2=(v0+dt/2·a0, ah),
    // k3=(v0+dt/2·ah, ah), k4=(v0+dt·ah, a1).
    let v1 = x.v + (a0 + ah * 4.0 + a1) * (dt / 6.0);
    let p1 = x.p + x.v * dt + (a0 + ah * 2.0) * (dt * dt / 6.0);
    ImuState {
        q: q1,
        p: p1,
        v: v1,
        bg: x.bg,
        ba: x.ba,
        force: x.force,
    }
}

/// Error-state transition and discrete process noise for one step.
pub fn compute_phi_qd(x: &ImuState, u: &PropagationInput, noise: &ProcessNoise) -> (Mat18, Mat18) {
    compute_phi_qd_in(x, u, noise, ForceFrame::Body)
}

pub fn compute_phi_qd_in(
    x: &ImuState,
    u: &PropagationInput,
    noise: &ProcessNoise,
    frame: ForceFrame,
) -> (Mat18, Mat18) {
    let dt = u.dt;
    let w = u.omega - x.bg;
    let f = body_vector(x, &u.thrust, frame);
    let r0t = x.q.to_rotation_matrix().into_inner().transpose();

    let mut phi = Mat18::identity();

    // attitude
    let e = rot(&crate::so3::exp(&(-w * dt)));
    let jr = right_jacobian(&(-w * dt));
    set3(&mut phi, idx::THETA, idx::THETA, &e);
    set3(&mut phi, idx::THETA, idx::BG, &(-(e * jr) * dt));

    // δa(τ) = A_θ(τ) δθ0 + A_b(τ) δbω + A_F(τ) δF
    let stage = |tau: f64| -> (Mat3, Mat3, Mat3) {
        let rot_tau = rot(&crate::so3::exp(&(w * tau)));
        let rt = r0t * rot_tau;
        let a_theta = -r0t * skew(&(rot_tau * f));
        let a_b = rt * skew(&f) * right_jacobian(&(w * tau)) * tau;
        let a_f = match frame {
            ForceFrame::Body => rt,
            ForceFrame::World => Mat3::identity(),
        };
        (a_theta, a_b, a_f)
    };
    let (t0, b0, f0) = stage(0.0);
    let (th, bh, fh) = stage(0.5 * dt);
    let (t1, b1, f1) = stage(dt);

    let wv = dt / 6.0;
    let wp = dt * dt / 6.0;
    set3(&mut phi, idx::VEL, idx::THETA, &((t0 + th * 4.0 + t1) * wv));
    set3(&mut phi, idx::VEL, idx::BG, &((b0 + bh * 4.0 + b1) * wv));
    set3(&mut phi, idx::VEL, idx::FORCE, &((f0 + fh * 4.0 + f1) * wv));
    set3(&mut phi, idx::POS, idx::VEL, &(Mat3::identity() * dt));
    set3(&mut phi, idx::POS, idx::THETA, &((t0 + th * 2.0) * wp));
    set3(&mut phi, idx::POS, idx::BG, &((b0 + bh * 2.0) * wp));
    set3(&mut phi, idx::POS, idx::FORCE, &((f0 + fh * 2.0) * wp));

    // First-order discrete noise G Qc Gᵀ dt; the velocity noise enters as
    // Rᵀ n_T, whose covariance is isotropic.
    let mut qd = Mat18::zeros();
    let diag = [
        (idx::THETA, noise.sigma_w),
        (idx::VEL, noise.sigma_t),
        (idx::BG, noise.sigma_bw),
        (idx::BA, noise.sigma_ba),
        (idx::FORCE, noise.sigma_f),
    ];
    for (off, sigma) in diag {
        for i in 0..3 {
            qd[(off + i, off + i)] = sigma * sigma * dt;
        }
    }
    (phi, qd)
}

fn set3(m: &mut Mat18, r: usize, c: usize, b: &Mat3) {
    m.fixed_view_mut::<3, 3>(r, c).copy_from(b);
}

/// Propagates mean and covariance; clone and landmark blocks only pick up
/// cross-terms with the IMU block.
pub fn propagate(
    state: &mut FilterState,
    u: &PropagationInput,
    noise: &ProcessNoise,
    g: &Vec3,
) -> Result<()> {
    propagate_in(state, u, noise, g, ForceFrame::Body)
}

pub fn propagate_in(
    state: &mut FilterState,
    u: &PropagationInput,
    noise: &ProcessNoise,
    g: &Vec3,
    frame: ForceFrame,
) -> Result<()> {
    u.validate()?;
    let (phi, qd) = compute_phi_qd_in(&state.imu, u, noise, frame);
    let d = state.dim();
    let phi_d = DMatrix::from_column_slice(IMU_DIM, IMU_DIM, phi.as_slice());

    let p_ii = state.cov.view((0, 0), (IMU_DIM, IMU_DIM)).into_owned();
    let new_ii = &phi_d * &p_ii * phi_d.transpose()
        + DMatrix::from_column_slice(IMU_DIM, IMU_DIM, qd.as_slice());
    state
        .cov
        .view_mut((0, 0), (IMU_DIM, IMU_DIM))
        .copy_from(&new_ii);
    if d > IMU_DIM {
        let rest = d - IMU_DIM;
        let p_ix = state.cov.view((0, IMU_DIM), (IMU_DIM, rest)).into_owned();
        let new_ix = &phi_d * p_ix;
        state
            .cov
            .view_mut((IMU_DIM, 0), (rest, IMU_DIM))
            .copy_from(&new_ix.transpose());
        state
            .cov
            .view_mut((0, IMU_DIM), (IMU_DIM, rest))
            .copy_from(&new_ix);
    }
    state.symmetrize();
    state.imu = propagate_mean_in(&state.imu, u, g, frame);
    state.time += u.dt;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::EstimatorConfig;
    use crate::so3::{boxminus, Quat};
    use nalgebra::{Quaternion, SymmetricEigen, UnitQuaternion};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const G: Vec3 = Vec3::new(0.0, 0.0, -9.81);

    fn rv(rng: &mut ChaCha8Rng, s: f64) -> Vec3 {
        Vec3::new(
            rng.random_range(-s..s),
            rng.random_range(-s..s),
            rng.random_range(-s..s),
        )
    }

    fn random_state(rng: &mut ChaCha8Rng) -> ImuState {
        ImuState {
            q: UnitQuaternion::new_normalize(Quaternion::new(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            )),
            p: rv(rng, 5.0),
            v: rv(rng, 2.0),
            bg: rv(rng, 0.05),
            ba: rv(rng, 0.2),
            force: rv(rng, 3.0),
        }
    }

    /// Error vector `a ⊟ b` over the 18-dim IMU state.
    pub(crate) fn imu_boxminus(a: &ImuState, b: &ImuState) -> [f64; 18] {
        let mut out = [0.0; 18];
        let blocks = [
            boxminus(&a.q, &b.q).unwrap(),
            a.p - b.p,
            a.v - b.v,
            a.bg - b.bg,
            a.ba - b.ba,
            a.force - b.force,
        ];
        for (k, v) in blocks.iter().enumerate() {
            out[3 * k..3 * k + 3].copy_from_slice(v.as_slice());
        }
        out
    }

    #[test]
    fn hover_is_a_fixed_point() {
        let x = ImuState::new(Quat::identity(), Vec3::new(1.0, 2.0, 3.0), Vec3::zeros());
        for dt in [1e-4, 0.005, 0.01, 0.1] {
            let u = PropagationInput {
                omega: Vec3::zeros(),
                thrust: Vec3::new(0.0, 0.0, 9.81),
                dt,
            };
            let y = propagate_mean(&x, &u, &G);
            assert!((y.p - x.p).amax() <= 1e-12);
            assert!((y.v - x.v).amax() <= 1e-12);
            assert!(boxminus(&y.q, &x.q).unwrap().amax() <= 1e-12);
        }
    }

    #[test]
    fn free_fall_and_force_coupling() {
        let x = ImuState::new(Quat::identity(), Vec3::zeros(), Vec3::zeros());
        let u = PropagationInput {
            omega: Vec3::zeros(),
            thrust: Vec3::zeros(),
            dt: 0.01,
        };
        let y = propagate_mean(&x, &u, &G);
        assert!((y.v - Vec3::new(0.0, 0.0, -0.0981)).amax() < 1e-15);
        assert!((y.p - Vec3::new(0.0, 0.0, -4.905e-4)).amax() < 1e-15);

        let mut x = x;
        x.force = Vec3::new(1.0, 0.0, 0.0);
        let u = PropagationInput {
            thrust: Vec3::new(0.0, 0.0, 9.81),
            ..u
        };
        let y = propagate_mean(&x, &u, &G);
        assert!((y.v - Vec3::new(0.01, 0.0, 0.0)).amax() < 1e-15);
    }

    #[test]
    fn rk4_matches_fine_euler() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..50 {
            let x = random_state(&mut rng);
            let u = PropagationInput {
                omega: rv(&mut rng, 0.15) + x.bg,
                thrust: Vec3::new(0.0, 0.0, 9.81) + rv(&mut rng, 1.0),
                dt: 0.01,
            };
            let y = propagate_mean(&x, &u, &G);
            let n = 1000;
            let h = u.dt / n as f64;
            let w = u.omega - x.bg;
            let (mut q, mut p, mut v) = (x.q, x.p, x.v);
            for _ in 0..n {
                let qm = integrate_gyro(&q, &w, 0.5 * h);
                let a = rot(&qm).transpose() * (u.thrust + x.force) + G;
                p += v * h + a * (0.5 * h * h);
                v += a * h;
                q = integrate_gyro(&q, &w, h);
            }
            assert!((y.p - p).amax() < 1e-7, "p err {}", (y.p - p).amax());
            assert!((y.v - v).amax() < 1e-7, "v err {}", (y.v - v).amax());
        }
    }

    fn fd_check(frame: ForceFrame, seed: u64) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let eps = 1e-6;
        let mut worst: f64 = 0.0;
        for _ in 0..100 {
            let x = random_state(&mut rng);
            let u = PropagationInput {
                omega: rv(&mut rng, 2.0),
                thrust: Vec3::new(0.0, 0.0, 9.81) + rv(&mut rng, 3.0),
                dt: 0.005,
            };
            let (phi, _) = compute_phi_qd_in(&x, &u, &ProcessNoise::default(), frame);
            for i in 0..18 {
                let mut e = [0.0; 18];
                e[i] = eps;
                let plus = propagate_mean_in(&x.boxplus(&e), &u, &G, frame);
                e[i] = -eps;
                let minus = propagate_mean_in(&x.boxplus(&e), &u, &G, frame);
                let col = imu_boxminus(&plus, &minus);
                for r in 0..18 {
                    let fd = col[r] / (2.0 * eps);
                    worst = worst.max((fd - phi[(r, i)]).abs());
                }
            }
        }
        worst
    }

    #[test]
    fn phi_matches_finite_differences() {
        let worst = fd_check(ForceFrame::Body, 22);
        assert!(worst <= 1e-4, "worst {worst}");
    }

    #[test]
    fn phi_matches_finite_differences_world_force() {
        let worst = fd_check(ForceFrame::World, 23);
        assert!(worst <= 1e-4, "worst {worst}");
    }

    #[test]
    fn phi_limits_and_structure() {
        let mut rng = ChaCha8Rng::seed_from_u64(24);
        let x = random_state(&mut rng);
        let u = PropagationInput {
            omega: rv(&mut rng, 1.0),
            thrust: Vec3::new(0.0, 0.0, 9.81),
            dt: 1e-13,
        };
        let noise = ProcessNoise::default();
        let (phi, _) = compute_phi_qd(&x, &u, &noise);
        assert!((phi - Mat18::identity()).amax() < 1e-9);

        let u = PropagationInput { dt: 0.005, ..u };
        let (phi, qd) = compute_phi_qd(&x, &u, &noise);
        let rt = rot(&x.q).transpose();
        let dv_df = phi.fixed_view::<3, 3>(idx::VEL, idx::FORCE).into_owned();
        assert!((dv_df - rt * u.dt).amax() < 1e-4);
        for off in [idx::BG, idx::BA, idx::FORCE] {
            assert_eq!(phi.fixed_view::<3, 3>(off, off).into_owned(), Mat3::identity());
        }
        assert_eq!(qd, qd.transpose());
        let ev = SymmetricEigen::new(qd).eigenvalues;
        assert!(ev.min() >= 0.0);
        let qf = qd.fixed_view::<3, 3>(idx::FORCE, idx::FORCE).into_owned();
        assert!((qf - Mat3::identity() * noise.sigma_f.powi(2) * u.dt).amax() < 1e-15);
    }

    fn test_state() -> FilterState {
        FilterState::new(
            &EstimatorConfig::default(),
            Quat::identity(),
            Vec3::zeros(),
            Vec3::zeros(),
            0.0,
        )
        .unwrap()
    }

    #[test]
    fn propagate_keeps_clone_blocks() {
        let mut s = test_state();
        s.clone_pose(0.0).unwrap();
        let before = s.cov.clone();
        let u = PropagationInput {
            omega: Vec3::new(0.1, -0.2, 0.3),
            thrust: Vec3::new(0.2, 0.1, 9.7),
            dt: 0.005,
        };
        propagate(&mut s, &u, &ProcessNoise::default(), &G).unwrap();
        let d = s.dim();
        let rest = d - IMU_DIM;
        assert_eq!(
            s.cov.view((IMU_DIM, IMU_DIM), (rest, rest)),
            before.view((IMU_DIM, IMU_DIM), (rest, rest))
        );
        assert!((s.time - 0.005).abs() < 1e-15);
        let ev = SymmetricEigen::new(s.cov.clone()).eigenvalues;
        assert!(ev.min() >= -1e-9 * s.cov.trace());
    }

    #[test]
    fn force_variance_grows_as_random_walk() {
        let mut s = test_state();
        let noise = ProcessNoise::default();
        let before = s.block3(idx::FORCE);
        let u = PropagationInput {
            omega: Vec3::zeros(),
            thrust: Vec3::new(0.0, 0.0, 9.81),
            dt: 0.005,
        };
        for _ in 0..200 {
            propagate(&mut s, &u, &noise, &G).unwrap();
        }
        let growth = s.block3(idx::FORCE) - before;
        for i in 0..3 {
            assert!((growth[(i, i)] - noise.sigma_f.powi(2) * 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn rejects_bad_dt() {
        let mut s = test_state();
        let u = PropagationInput {
            omega: Vec3::zeros(),
            thrust: Vec3::zeros(),
            dt: -0.01,
        };
        assert!(propagate(&mut s, &u, &ProcessNoise::default(), &G).is_err());
    }

    #[test]
    fn zero_noise_keeps_psd() {
        let mut rng = ChaCha8Rng::seed_from_u64(25);
        let mut s = test_state();
        let noise = ProcessNoise {
            sigma_w: 1e-30,
            sigma_bw: 1e-30,
            sigma_ba: 1e-30,
            sigma_f: 1e-30,
            sigma_t: 1e-30,
        };
        for _ in 0..500 {
            let u = PropagationInput {
                omega: rv(&mut rng, 1.0),
                thrust: Vec3::new(0.0, 0.0, 9.81) + rv(&mut rng, 2.0),
                dt: 0.005,
            };
            propagate(&mut s, &u, &noise, &G).unwrap();
        }
        let ev = SymmetricEigen::new(s.cov.clone()).eigenvalues;
        assert!(ev.min() >= -1e-9 * s.cov.trace());
    }
}
