//! Reprojection Jacobians and landmark elimination.

use nalgebra::{DMatrix, DVector, Matrix2x3, Vector2};

use super::camera::CameraModel;
use crate::error::{Error, Result};
use crate::so3::{rot, skew, Mat3, Vec3};
use crate::state::FilterState;

/// Where each stacked observation's pose lives in the error state.
#[derive(Clone, Copy, Debug)]
pub struct ObsRef {
    pub clone: usize,
    pub uv: Vector2<f64>,
}

#[derive(Clone, Debug)]
pub struct FeatureJacobians {
    pub h_x: DMatrix<f64>,
    pub h_f: DMatrix<f64>,
    pub r: DVector<f64>,
}

/// Stacked pixel residuals `z − h(x̂, p_f)` over the observations and their
/// Jacobians with respect to the clone poses and the landmark position.
pub fn feature_linearize(
    state: &FilterState,
    p_f: &Vec3,
    obs: &[ObsRef],
    cam: &CameraModel,
) -> FeatureJacobians {
    let d = state.dim();
    let m = obs.len();
    let mut h_x = DMatrix::zeros(2 * m, d);
    let mut h_f = DMatrix::zeros(2 * m, 3);
    let mut r = DVector::zeros(2 * m);
    for (k, o) in obs.iter().enumerate() {
        let c = &state.clones[o.clone];
        let rwi = rot(&c.q);
        let p_i = rwi * (p_f - c.p);
        let pc = cam.r_ic * (p_i - cam.p_ic);
        let iz = 1.0 / pc.z;
        let dproj = Matrix2x3::new(
            cam.fx * iz,
            0.0,
            -cam.fx * pc.x * iz * iz,
            0.0,
            cam.fy * iz,
            -cam.fy * pc.y * iz * iz,
        );
        let pred = Vector2::new(cam.fx * pc.x * iz + cam.cx, cam.fy * pc.y * iz + cam.cy);
        let res = o.uv - pred;
        r[2 * k] = res.x;
        r[2 * k + 1] = res.y;

        // p_I = (I − [δθ]×) R̂ (p_f − p) ⇒ ∂p_I/∂δθ = [p̂_I]×
        let d_theta: Matrix2x3<f64> = dproj * cam.r_ic * skew(&p_i);
        let d_pos: Matrix2x3<f64> = -(dproj * cam.r_ic * rwi);
        let d_f: Matrix2x3<f64> = dproj * cam.r_ic * rwi;
        let off = state.clone_offset(o.clone);
        h_x.view_mut((2 * k, off), (2, 3)).copy_from(&d_theta);
        h_x.view_mut((2 * k, off + 3), (2, 3)).copy_from(&d_pos);
        h_f.view_mut((2 * k, 0), (2, 3)).copy_from(&d_f);
    }
    FeatureJacobians { h_x, h_f, r }
}

/// Result of an in-place Givens QR of the landmark Jacobian.
pub struct GivensSplit {
    /// upper-triangular 3×3 landmark block of the first three rows
    pub h_f1: Mat3,
    pub h_x1: DMatrix<f64>,
    pub r1: DVector<f64>,
    /// rows orthogonal to the landmark Jacobian
    pub h_x2: DMatrix<f64>,
    pub r2: DVector<f64>,
}

/// Rotates `[H_x | H_f | r]` with Givens rotations until `H_f` is upper
/// triangular; the trailing `2m − 3` rows then span the left nullspace of `H_f`.
pub fn givens_split(f: &FeatureJacobians) -> Result<GivensSplit> {
    let n = f.h_f.nrows();
    if n <= 3 {
        return Err(Error::precondition(
            "vision_update",
            format!("need more than 3 rows to eliminate a landmark, have {n}"),
        ));
    }
    let mut hx = f.h_x.clone();
    let mut hf = f.h_f.clone();
    let mut r = f.r.clone();
    let scale = hf.amax().max(1e-300);
    for c in 0..3 {
        for i in (c + 1..n).rev() {
            let a = hf[(i - 1, c)];
            let b = hf[(i, c)];
            if b == 0.0 {
                continue;
            }
            let h = a.hypot(b);
            let (cs, sn) = (a / h, b / h);
            rotate_rows(&mut hf, i - 1, i, cs, sn);
            rotate_rows(&mut hx, i - 1, i, cs, sn);
            let (ra, rb) = (r[i - 1], r[i]);
            r[i - 1] = cs * ra + sn * rb;
            r[i] = -sn * ra + cs * rb;
        }
    }
    for c in 0..3 {
        if hf[(c, c)].abs() <= 1e-9 * scale {
            return Err(Error::numerical(
                "vision_update",
                "landmark Jacobian is rank deficient",
            ));
        }
    }
    let d = hx.ncols();
    Ok(GivensSplit {
        h_f1: hf.fixed_view::<3, 3>(0, 0).into_owned(),
        h_x1: hx.rows(0, 3).into_owned(),
        r1: r.rows(0, 3).into_owned(),
        h_x2: hx.view((3, 0), (n - 3, d)).into_owned(),
        r2: r.rows(3, n - 3).into_owned(),
    })
}

fn rotate_rows(m: &mut DMatrix<f64>, i: usize, j: usize, cs: f64, sn: f64) {
    for c in 0..m.ncols() {
        let a = m[(i, c)];
        let b = m[(j, c)];
        m[(i, c)] = cs * a + sn * b;
        m[(j, c)] = -sn * a + cs * b;
    }
}

/// Projects the measurement onto the left nullspace of `H_f`.
pub fn nullspace_project(f: &FeatureJacobians) -> Result<(DMatrix<f64>, DVector<f64>)> {
    let s = givens_split(f)?;
    Ok((s.h_x2, s.r2))
}

/// Replaces a tall stacked system by its `d`-row QR equivalent.
pub fn compress(h: DMatrix<f64>, r: DVector<f64>) -> (DMatrix<f64>, DVector<f64>) {
    if h.nrows() <= h.ncols() {
        return (h, r);
    }
    let qr = h.qr();
    let q = qr.q();
    let rr = qr.r();
    let r2 = q.transpose() * r;
    (rr, r2)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::EstimatorConfig;
    use crate::so3::{exp, Quat};
    use crate::state::{PoseClone, IMU_DIM};
    use crate::vision::camera::project_pinhole;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rv(rng: &mut ChaCha8Rng, s: f64) -> Vec3 {
        Vec3::new(
            rng.random_range(-s..s),
            rng.random_range(-s..s),
            rng.random_range(-s..s),
        )
    }

    fn scene(rng: &mut ChaCha8Rng, m: usize) -> (FilterState, CameraModel, Vec3, Vec<ObsRef>) {
        let cam = CameraModel::default();
        let mut s = FilterState::new(
            &EstimatorConfig::default(),
            Quat::identity(),
            Vec3::zeros(),
            Vec3::zeros(),
            0.0,
        )
        .unwrap();
        let pf = Vec3::new(0.0, 0.0, 0.0) + rv(rng, 0.5);
        let mut obs = Vec::new();
        for k in 0..m {
            let q = exp(&rv(rng, 0.15));
            let p = Vec3::new(0.0, 0.0, 2.5) + rv(rng, 0.5);
            s.clones.push(PoseClone { q, p, t: k as f64 });
            let uv = project_pinhole(&pf, &q, &p, &cam).unwrap();
            obs.push(ObsRef { clone: k, uv });
        }
        let d = s.dim();
        s.cov = DMatrix::identity(d, d);
        (s, cam, pf, obs)
    }

    #[test]
    fn perfect_geometry_has_zero_residual() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let (s, cam, pf, obs) = scene(&mut rng, 4);
        let f = feature_linearize(&s, &pf, &obs, &cam);
        assert!(f.r.amax() < 1e-9);
        assert_eq!(f.h_x.shape(), (8, IMU_DIM + 24));
    }

    #[test]
    fn jacobians_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let eps = 1e-6;
        let mut worst: f64 = 0.0;
        for _ in 0..100 {
            let (s, cam, pf, mut obs) = scene(&mut rng, 3);
            for o in obs.iter_mut() {
                o.uv += nalgebra::Vector2::new(rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0));
            }
            let f = feature_linearize(&s, &pf, &obs, &cam);
            for i in 0..3 {
                let mut e = Vec3::zeros();
                e[i] = eps;
                let rp = feature_linearize(&s, &(pf + e), &obs, &cam).r;
                let rm = feature_linearize(&s, &(pf - e), &obs, &cam).r;
                let fd = -(rp - rm) / (2.0 * eps);
                worst = worst.max((fd - f.h_f.column(i)).amax());
            }
            for col in IMU_DIM..s.dim() {
                let mut dx = DVector::zeros(s.dim());
                dx[col] = eps;
                let mut sp = s.clone();
                sp.correct(&dx);
                dx[col] = -eps;
                let mut sm = s.clone();
                sm.correct(&dx);
                let rp = feature_linearize(&sp, &pf, &obs, &cam).r;
                let rm = feature_linearize(&sm, &pf, &obs, &cam).r;
                let fd = -(rp - rm) / (2.0 * eps);
                worst = worst.max((fd - f.h_x.column(col)).amax());
            }
        }
        assert!(worst <= 1e-4, "worst {worst}");
    }

    #[test]
    fn nullspace_projection_properties() {
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        for m in 2..8 {
            let n = 2 * m;
            let f = FeatureJacobians {
                h_x: DMatrix::from_fn(n, 30, |_, _| rng.random_range(-1.0..1.0)),
                h_f: DMatrix::from_fn(n, 3, |_, _| rng.random_range(-1.0..1.0)),
                r: DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0)),
            };
            let split = givens_split(&f).unwrap();
            assert_eq!(split.h_x2.nrows(), n - 3);
            assert!(split.r2.norm() <= f.r.norm() + 1e-12);
            // Recover the orthonormal basis by projecting the identity.
            let basis = nullspace_project(&FeatureJacobians {
                h_x: DMatrix::identity(n, n),
                h_f: f.h_f.clone(),
                r: DVector::zeros(n),
            })
            .unwrap()
            .0;
            assert!((&basis * &f.h_f).amax() <= 1e-10);
            assert!((&basis * &f.h_x - &split.h_x2).amax() < 1e-10);
            let gram = &basis * basis.transpose();
            assert!((gram - DMatrix::identity(n - 3, n - 3)).amax() < 1e-12);
        }
    }

    #[test]
    fn two_observations_leave_one_row() {
        let mut rng = ChaCha8Rng::seed_from_u64(44);
        let (s, cam, pf, obs) = scene(&mut rng, 2);
        let f = feature_linearize(&s, &pf, &obs, &cam);
        let (h, r) = nullspace_project(&f).unwrap();
        assert_eq!((h.nrows(), r.len()), (1, 1));
    }

    #[test]
    fn rank_deficient_landmark_jacobian_fails() {
        let f = FeatureJacobians {
            h_x: DMatrix::zeros(6, 10),
            h_f: DMatrix::from_fn(6, 3, |r, _| r as f64),
            r: DVector::zeros(6),
        };
        assert!(givens_split(&f).is_err());
    }

    #[test]
    fn compression_preserves_normal_equations() {
        let mut rng = ChaCha8Rng::seed_from_u64(45);
        let h = DMatrix::from_fn(40, 12, |_, _| rng.random_range(-1.0..1.0));
        let r = DVector::from_fn(40, |_, _| rng.random_range(-1.0..1.0));
        let (hc, rc) = compress(h.clone(), r.clone());
        assert_eq!(hc.nrows(), 12);
        assert!((hc.transpose() * &hc - h.transpose() * &h).amax() < 1e-10);
        assert!((hc.transpose() * &rc - h.transpose() * &r).amax() < 1e-10);
    }
}
