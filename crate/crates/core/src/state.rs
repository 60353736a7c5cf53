//! Filter state: current IMU state, sliding window of pose clones, optional
//! in-state landmarks, and the joint error-state covariance.
//!
//! Error-state layout (columns of `cov`):
//!
//! ```text
//! [ δθ δp δv δbω δba δF | clone_0 (δθ δp) ... clone_{N-1} | landmark_0 (δp) ... ]
//!   0  3  6  9   12  15   18                                18 + 6N
//! ```

use nalgebra::{DMatrix, DVector, Matrix3};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::config::{EstimatorConfig, InitialSigmas};
use crate::error::{Error, Result};
use crate::so3::{boxplus, Quat, Vec3};

pub const IMU_DIM: usize = 18;
pub const CLONE_DIM: usize = 6;
pub const LANDMARK_DIM: usize = 3;

/// Offsets of the sub-blocks inside the 18-dim IMU error state.
pub mod idx {
    pub const THETA: usize = 0;
    pub const POS: usize = 3;
    pub const VEL: usize = 6;
    pub const BG: usize = 9;
    pub const BA: usize = 12;
    pub const FORCE: usize = 15;
}

/// Current vehicle state. `force` is the mass-normalized external force,
/// expressed in the IMU frame unless the filter runs in world-force mode.
#[derive(Clone, Debug, PartialEq)]
pub struct ImuState {
    pub q: Quat,
    pub p: Vec3,
    pub v: Vec3,
    pub bg: Vec3,
    pub ba: Vec3,
    pub force: Vec3,
}

impl ImuState {
    pub fn new(q: Quat, p: Vec3, v: Vec3) -> Self {
        Self {
            q,
            p,
            v,
            bg: Vec3::zeros(),
            ba: Vec3::zeros(),
            force: Vec3::zeros(),
        }
    }

    /// Applies an 18-dim error vector.
    pub fn boxplus(&self, dx: &[f64]) -> Self {
        let seg = |i: usize| Vec3::new(dx[i], dx[i + 1], dx[i + 2]);
        Self {
            q: boxplus(&self.q, &seg(idx::THETA)),
            p: self.p + seg(idx::POS),
            v: self.v + seg(idx::VEL),
            bg: self.bg + seg(idx::BG),
            ba: self.ba + seg(idx::BA),
            force: self.force + seg(idx::FORCE),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PoseClone {
    pub q: Quat,
    pub p: Vec3,
    pub t: f64,
}

/// Landmark kept in the state (global xyz).
#[derive(Clone, Debug, PartialEq)]
pub struct Landmark {
    pub id: u64,
    pub p: Vec3,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FilterState {
    pub imu: ImuState,
    pub clones: Vec<PoseClone>,
    pub landmarks: Vec<Landmark>,
    pub cov: DMatrix<f64>,
    pub time: f64,
}

/// Result of a gated update.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum UpdateOutcome {
    Accepted { chi2: f64 },
    Rejected { chi2: f64, threshold: f64 },
}

impl UpdateOutcome {
    pub fn accepted(&self) -> bool {
        matches!(self, UpdateOutcome::Accepted { .. })
    }
}

/// Upper `prob` quantile of the chi-square distribution with `dof` degrees of freedom.
pub fn chi2_quantile(prob: f64, dof: usize) -> f64 {
    ChiSquared::new(dof as f64)
        .expect("dof > 0")
        .inverse_cdf(prob)
}

impl FilterState {
    /// Builds the initial state from a pose and velocity; biases and force start at zero.
    pub fn new(cfg: &EstimatorConfig, q: Quat, p: Vec3, v: Vec3, t0: f64) -> Result<Self> {
        let s = &cfg.init;
        s.validate()?;
        let mut cov = DMatrix::zeros(IMU_DIM, IMU_DIM);
        let blocks = [
            (idx::THETA, s.theta),
            (idx::POS, s.position),
            (idx::VEL, s.velocity),
            (idx::BG, s.gyro_bias),
            (idx::BA, s.accel_bias),
            (idx::FORCE, s.force),
        ];
        for (off, sigma) in blocks {
            for i in 0..3 {
                cov[(off + i, off + i)] = sigma * sigma;
            }
        }
        Ok(Self {
            imu: ImuState::new(q, p, v),
            clones: Vec::new(),
            landmarks: Vec::new(),
            cov,
            time: t0,
        })
    }

    pub fn dim(&self) -> usize {
        IMU_DIM + CLONE_DIM * self.clones.len() + LANDMARK_DIM * self.landmarks.len()
    }

    pub fn clone_offset(&self, i: usize) -> usize {
        IMU_DIM + CLONE_DIM * i
    }

    pub fn landmark_offset(&self, j: usize) -> usize {
        IMU_DIM + CLONE_DIM * self.clones.len() + LANDMARK_DIM * j
    }

    pub fn clone_index(&self, t: f64) -> Option<usize> {
        self.clones.iter().position(|c| (c.t - t).abs() < 1e-9)
    }

    /// 3×3 covariance of the IMU-state sub-block starting at `off`.
    pub fn block3(&self, off: usize) -> Matrix3<f64> {
        self.cov.fixed_view::<3, 3>(off, off).into_owned()
    }

    /// Appends a clone of the current attitude and position at time `t`.
    pub fn clone_pose(&mut self, t: f64) -> Result<()> {
        if (self.time - t).abs() > 1e-9 {
            return Err(Error::precondition(
                "filter_state",
                format!("clone at t={t} but filter clock is {}", self.time),
            ));
        }
        if let Some(last) = self.clones.last() {
            if t <= last.t {
                return Err(Error::precondition(
                    "filter_state",
                    format!("clone at t={t} not newer than {}", last.t),
                ));
            }
        }
        let at = self.clone_offset(self.clones.len());
        // Rows of the duplication Jacobian are unit rows on δθ, δp.
        let src: Vec<usize> = (idx::THETA..idx::THETA + 3)
            .chain(idx::POS..idx::POS + 3)
            .collect();
        self.insert_copied_rows(at, &src);
        self.clones.push(PoseClone {
            q: self.imu.q,
            p: self.imu.p,
            t,
        });
        Ok(())
    }

    /// Grows the covariance by duplicating the state directions `src` at `at`:
    /// the augmented covariance is `J P Jᵀ` where `J` stacks the identity with
    /// unit rows selecting `src`.
    fn insert_copied_rows(&mut self, at: usize, src: &[usize]) {
        let d = self.cov.nrows();
        let k = src.len();
        let map = |i: usize| -> usize {
            if i < at {
                i
            } else if i < at + k {
                // new row → source row in the old matrix
                src[i - at]
            } else {
                i - k
            }
        };
        let old = &self.cov;
        let mut cov = DMatrix::zeros(d + k, d + k);
        for c in 0..d + k {
            let oc = map(c);
            for r in 0..d + k {
                cov[(r, c)] = old[(map(r), oc)];
            }
        }
        self.cov = cov;
    }

    /// Deletes `len` rows and columns starting at `at`.
    fn remove_rows(&mut self, at: usize, len: usize) {
        let cov = std::mem::replace(&mut self.cov, DMatrix::zeros(0, 0));
        self.cov = cov.remove_rows(at, len).remove_columns(at, len);
    }

    /// Drops the oldest clone once the window holds `window + 1` clones.
    pub fn marginalize_oldest_clone(&mut self, window: usize) -> Result<()> {
        if self.clones.len() != window + 1 {
            return Err(Error::precondition(
                "filter_state",
                format!(
                    "marginalize needs {} clones, have {}",
                    window + 1,
                    self.clones.len()
                ),
            ));
        }
        let at = self.clone_offset(0);
        self.remove_rows(at, CLONE_DIM);
        self.clones.remove(0);
        Ok(())
    }

    pub fn remove_landmark(&mut self, j: usize) {
        let at = self.landmark_offset(j);
        self.remove_rows(at, LANDMARK_DIM);
        self.landmarks.remove(j);
    }

    /// Appends a landmark with covariance `pff` and cross-covariance `pfx`
    /// (3 × d) against the existing state.
    pub fn augment_landmark(&mut self, lm: Landmark, pfx: &DMatrix<f64>, pff: &Matrix3<f64>) {
        let d = self.dim();
        let mut cov = DMatrix::zeros(d + 3, d + 3);
        cov.view_mut((0, 0), (d, d)).copy_from(&self.cov);
        cov.view_mut((d, 0), (3, d)).copy_from(pfx);
        cov.view_mut((0, d), (d, 3)).copy_from(&pfx.transpose());
        cov.view_mut((d, d), (3, 3)).copy_from(pff);
        self.cov = cov;
        self.landmarks.push(lm);
        self.symmetrize();
    }

    pub fn symmetrize(&mut self) {
        let t = self.cov.transpose();
        self.cov += t;
        self.cov *= 0.5;
    }

    /// Applies a full-dimension error vector to every state block.
    pub fn correct(&mut self, dx: &DVector<f64>) {
        debug_assert_eq!(dx.len(), self.dim());
        let s = dx.as_slice();
        self.imu = self.imu.boxplus(&s[..IMU_DIM]);
        for (i, c) in self.clones.iter_mut().enumerate() {
            let o = IMU_DIM + CLONE_DIM * i;
            c.q = boxplus(&c.q, &Vec3::new(s[o], s[o + 1], s[o + 2]));
            c.p += Vec3::new(s[o + 3], s[o + 4], s[o + 5]);
        }
        let base = IMU_DIM + CLONE_DIM * self.clones.len();
        for (j, l) in self.landmarks.iter_mut().enumerate() {
            let o = base + LANDMARK_DIM * j;
            l.p += Vec3::new(s[o], s[o + 1], s[o + 2]);
        }
    }

    /// Gated EKF update with measurement Jacobian `h` (rows × d), residual
    /// `r = z - h(x̂)` and noise covariance `noise`.
    ///
    /// With `gate_prob = Some(p)` the update is rejected, leaving the state
    /// untouched, when the Mahalanobis distance exceeds the chi-square
    /// `p`-quantile. The covariance is updated in Joseph form.
    pub fn apply_ekf_update(
        &mut self,
        h: &DMatrix<f64>,
        r: &DVector<f64>,
        noise: &DMatrix<f64>,
        gate_prob: Option<f64>,
    ) -> Result<UpdateOutcome> {
        let d = self.dim();
        if h.ncols() != d || h.nrows() != r.len() || noise.shape() != (r.len(), r.len()) {
            return Err(Error::precondition(
                "filter_state",
                format!(
                    "update shapes H {:?}, r {}, R {:?} against d={d}",
                    h.shape(),
                    r.len(),
                    noise.shape()
                ),
            ));
        }
        let hp = h * &self.cov;
        let mut s = &hp * h.transpose() + noise;
        s = (&s + s.transpose()) * 0.5;
        let chol = s
            .clone()
            .cholesky()
            .ok_or_else(|| Error::numerical("filter_state", "innovation covariance not positive definite"))?;
        let chi2 = r.dot(&chol.solve(r));
        if !chi2.is_finite() {
            return Err(Error::numerical("filter_state", "non-finite innovation"));
        }
        if let Some(p) = gate_prob {
            let threshold = chi2_quantile(p, r.len());
            if chi2 > threshold {
                return Ok(UpdateOutcome::Rejected { chi2, threshold });
            }
        }
        // Kᵀ = S⁻¹ H P
        let kt = chol.solve(&hp);
        let k = kt.transpose();
        let dx = &k * r;

        // Joseph form (I-KH) P (I-KH)ᵀ + K R Kᵀ, expanded so that it costs
        // O(d² m) instead of O(d³): P - K HP - (K HP)ᵀ + K S Kᵀ.
        let khp = &k * &hp;
        let ks = &k * &s;
        let mut cov = &self.cov - &khp - khp.transpose() + &ks * &kt;
        cov = (&cov + cov.transpose()) * 0.5;
        if cov.iter().any(|v| !v.is_finite()) {
            return Err(Error::numerical("filter_state", "covariance became non-finite"));
        }
        self.cov = cov;
        self.correct(&dx);
        Ok(UpdateOutcome::Accepted { chi2 })
    }
}

impl InitialSigmas {
    pub fn validate(&self) -> Result<()> {
        let named = [
            ("init.sigma_theta", self.theta),
            ("init.sigma_p", self.position),
            ("init.sigma_v", self.velocity),
            ("init.sigma_bw", self.gyro_bias),
            ("init.sigma_ba", self.accel_bias),
            ("init.sigma_f", self.force),
        ];
        for (key, v) in named {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::config(key, format!("initial sigma must be > 0, got {v}")));
            }
        }
        Ok(())
    }
}
