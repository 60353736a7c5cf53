//! Force RMSE, absolute trajectory error and NEES.

use nalgebra::{DMatrix, DVector, Matrix3};

use crate::error::{Error, Result};
use crate::so3::Vec3;

/// Ground-truth pose matches must be this close in time.
pub const ATE_MATCH_TOLERANCE: f64 = 0.01;
pub const ATE_MIN_MATCHES: usize = 10;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Alignment {
    /// rotation and translation, no scale
    #[default]
    Rigid,
    /// rotation about world z and translation
    YawOnly,
}

fn interpolate(series: &[(f64, Vec3)], t: f64) -> Option<Vec3> {
    let first = series.first()?;
    let last = series.last()?;
    if t < first.0 || t > last.0 {
        return None;
    }
    let k = series.partition_point(|s| s.0 <= t);
    if k == 0 {
        return Some(first.1);
    }
    if k == series.len() {
        return Some(last.1);
    }
    let (t0, a) = series[k - 1];
    let (t1, b) = series[k];
    if t1 == t0 {
        return Some(a);
    }
    let w = (t - t0) / (t1 - t0);
    Some(a + (b - a) * w)
}

/// `sqrt(mean ‖F̂ − F_gt‖²)` with ground truth linearly interpolated to the
/// estimate timestamps. Returns the RMSE and the number of samples used.
pub fn force_rmse(est: &[(f64, Vec3)], gt: &[(f64, Vec3)]) -> Result<(f64, usize)> {
    let (Some(e0), Some(e1), Some(g0), Some(g1)) = (est.first(), est.last(), gt.first(), gt.last()) else {
        return Err(Error::Evaluation("force_rmse: empty series".into()));
    };
    let span = e1.0 - e0.0;
    let overlap = e1.0.min(g1.0) - e0.0.max(g0.0);
    if span > 0.0 && overlap < 0.5 * span || span <= 0.0 && overlap < 0.0 {
        return Err(Error::Evaluation(format!(
            "force_rmse: ground truth covers {:.3} s of a {:.3} s estimate, less than half",
            overlap.max(0.0),
            span
        )));
    }
    let mut sum = 0.0;
    let mut n = 0usize;
    for (t, f) in est {
        if let Some(g) = interpolate(gt, *t) {
            sum += (f - g).norm_squared();
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::Evaluation("force_rmse: no overlapping samples".into()));
    }
    Ok(((sum / n as f64).sqrt(), n))
}

/// Pairs each estimate with the nearest ground-truth sample within
/// [`ATE_MATCH_TOLERANCE`].
pub fn match_positions(est: &[(f64, Vec3)], gt: &[(f64, Vec3)]) -> Vec<(Vec3, Vec3)> {
    let mut out = Vec::new();
    for (t, p) in est {
        let k = gt.partition_point(|s| s.0 < *t);
        let best = [k.checked_sub(1), Some(k)]
            .into_iter()
            .flatten()
            .filter(|&i| i < gt.len())
            .min_by(|&a, &b| (gt[a].0 - t).abs().total_cmp(&(gt[b].0 - t).abs()));
        if let Some(i) = best {
            if (gt[i].0 - t).abs() <= ATE_MATCH_TOLERANCE {
                out.push((*p, gt[i].1));
            }
        }
    }
    out
}

/// Rotation and translation minimizing `Σ ‖R·e + t − g‖²`.
pub fn align(pairs: &[(Vec3, Vec3)], mode: Alignment) -> (Matrix3<f64>, Vec3) {
    let n = pairs.len() as f64;
    let me = pairs.iter().map(|p| p.0).sum::<Vec3>() / n;
    let mg = pairs.iter().map(|p| p.1).sum::<Vec3>() / n;
    let r = match mode {
        Alignment::Rigid => {
            let mut h = Matrix3::zeros();
            for (e, g) in pairs {
                h += (g - mg) * (e - me).transpose();
            }
            let svd = h.svd(true, true);
            let (u, vt) = (svd.u.unwrap(), svd.v_t.unwrap());
            let mut d = Matrix3::identity();
            if (u * vt).determinant() < 0.0 {
                d[(2, 2)] = -1.0;
            }
            u * d * vt
        }
        Alignment::YawOnly => {
            let (mut s, mut c) = (0.0, 0.0);
            for (e, g) in pairs {
                let (a, b) = (e - me, g - mg);
                c += a.x * b.x + a.y * b.y;
                s += a.x * b.y - a.y * b.x;
            }
            let yaw = s.atan2(c);
            let (sn, cs) = yaw.sin_cos();
            Matrix3::new(cs, -sn, 0.0, sn, cs, 0.0, 0.0, 0.0, 1.0)
        }
    };
    (r, mg - r * me)
}

/// Position RMSE after aligning the estimate onto ground truth. Returns the
/// ATE and the number of matched poses.
pub fn ate(est: &[(f64, Vec3)], gt: &[(f64, Vec3)], mode: Alignment) -> Result<(f64, usize)> {
    let pairs = match_positions(est, gt);
    if pairs.len() < ATE_MIN_MATCHES {
        return Err(Error::Evaluation(format!(
            "ate: only {} poses matched within {} s, need {ATE_MIN_MATCHES}",
            pairs.len(),
            ATE_MATCH_TOLERANCE
        )));
    }
    let (r, t) = align(&pairs, mode);
    let sum: f64 = pairs.iter().map(|(e, g)| (r * e + t - g).norm_squared()).sum();
    Ok(((sum / pairs.len() as f64).sqrt(), pairs.len()))
}

/// `eᵀ P⁻¹ e`.
pub fn nees(err: &DVector<f64>, cov: &DMatrix<f64>) -> Result<f64> {
    let chol = cov
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Evaluation("nees: covariance block is not positive definite".into()))?;
    Ok(err.dot(&chol.solve(err)))
}

pub fn mean(xs: impl IntoIterator<Item = f64>) -> Option<f64> {
    let mut n = 0usize;
    let mut s = 0.0;
    for x in xs {
        s += x;
        n += 1;
    }
    (n > 0).then(|| s / n as f64)
}

/// Two-sided acceptance band for the average NEES over `runs` independent
/// runs of a `dof`-dimensional error at confidence `prob`.
pub fn nees_bounds(dof: usize, runs: usize, prob: f64) -> (f64, f64) {
    use statrs::distribution::{ChiSquared, ContinuousCDF};
    let n = (dof * runs) as f64;
    let chi = ChiSquared::new(n).expect("positive degrees of freedom");
    let a = 0.5 * (1.0 - prob);
    (chi.inverse_cdf(a) / runs as f64, chi.inverse_cdf(1.0 - a) / runs as f64)
}

/// Aggregate results of one evaluated run.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricsReport {
    pub force_rmse: f64,
    pub force_samples: usize,
    pub ate: f64,
    pub ate_matches: usize,
    pub nees_mean: Option<f64>,
    pub nees_samples: usize,
}

impl MetricsReport {
    pub fn rows(&self) -> Vec<(String, f64)> {
        let mut v = vec![
            ("force_rmse".to_string(), self.force_rmse),
            ("force_samples".to_string(), self.force_samples as f64),
            ("ate".to_string(), self.ate),
            ("ate_matches".to_string(), self.ate_matches as f64),
        ];
        if let Some(m) = self.nees_mean {
            v.push(("force_nees_mean".to_string(), m));
            v.push(("force_nees_samples".to_string(), self.nees_samples as f64));
        }
        v
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::so3::exp;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn series(n: usize, f: impl Fn(f64) -> Vec3) -> Vec<(f64, Vec3)> {
        (0..n).map(|k| (k as f64 * 0.01, f(k as f64 * 0.01))).collect()
    }

    fn curve(t: f64) -> Vec3 {
        Vec3::new(t.sin() * 3.0, (2.0 * t).cos(), 0.3 * t)
    }

    #[test]
    fn force_rmse_examples() {
        let gt = series(500, curve);
        assert_eq!(force_rmse(&gt, &gt).unwrap().0, 0.0);
        let est: Vec<_> = gt.iter().map(|(t, f)| (*t, f + Vec3::new(0.1, 0.0, 0.0))).collect();
        assert!((force_rmse(&est, &gt).unwrap().0 - 0.1).abs() < 1e-12);
    }

    #[test]
    fn force_rmse_interpolates_and_is_shift_invariant() {
        let lin = |t: f64| Vec3::new(t, -2.0 * t, 1.0);
        let gt = series(101, lin);
        let est: Vec<_> = (0..50).map(|k| (0.005 + 0.02 * k as f64, lin(0.005 + 0.02 * k as f64))).collect();
        assert!(force_rmse(&est, &gt).unwrap().0 < 1e-12);

        let gt = series(300, curve);
        let est: Vec<_> = (0..150).map(|k| (0.013 * k as f64, curve(0.013 * k as f64) * 1.1)).collect();
        let base = force_rmse(&est, &gt).unwrap().0;
        let shift = |s: &[(f64, Vec3)]| s.iter().map(|(t, f)| (t + 12.5, *f)).collect::<Vec<_>>();
        let shifted = force_rmse(&shift(&est), &shift(&gt)).unwrap().0;
        assert!((base - shifted).abs() < 1e-9);
    }

    #[test]
    fn force_rmse_needs_overlap() {
        let gt = series(100, curve);
        let est: Vec<_> = (0..100).map(|k| (0.7 + 0.01 * k as f64, Vec3::zeros())).collect();
        assert!(force_rmse(&est, &gt).is_err());
        assert!(force_rmse(&[], &gt).is_err());
    }

    #[test]
    fn ate_identity_and_alignment_invariance() {
        let gt = series(200, curve);
        assert!(ate(&gt, &gt, Alignment::Rigid).unwrap().0 < 1e-12);

        let yaw90 = Matrix3::new(0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0);
        let moved: Vec<_> = gt.iter().map(|(t, p)| (*t, yaw90 * p + Vec3::new(5.0, -3.0, 1.0))).collect();
        for mode in [Alignment::Rigid, Alignment::YawOnly] {
            assert!(ate(&moved, &gt, mode).unwrap().0 < 1e-9);
        }

        let r = exp(&Vec3::new(0.4, -0.7, 2.0)).to_rotation_matrix().into_inner();
        let noisy: Vec<_> = gt
            .iter()
            .enumerate()
            .map(|(k, (t, p))| (*t, p + Vec3::new(0.01, -0.02, 0.005) * ((k % 7) as f64 - 3.0)))
            .collect();
        let base = ate(&noisy, &gt, Alignment::Rigid).unwrap().0;
        let rigid: Vec<_> = noisy.iter().map(|(t, p)| (*t, r * p + Vec3::new(1.0, 2.0, 3.0))).collect();
        assert!((ate(&rigid, &gt, Alignment::Rigid).unwrap().0 - base).abs() < 1e-9);
    }

    #[test]
    fn ate_requires_matches() {
        let gt = series(200, curve);
        let est: Vec<_> = gt.iter().take(9).cloned().collect();
        assert!(ate(&est, &gt, Alignment::Rigid).is_err());
        let far: Vec<_> = gt.iter().map(|(t, p)| (t + 100.0, *p)).collect();
        assert!(ate(&far, &gt, Alignment::Rigid).is_err());
    }

    #[test]
    fn nees_zero_error_and_singular() {
        let p = DMatrix::identity(3, 3) * 0.5;
        assert_eq!(nees(&DVector::zeros(3), &p).unwrap(), 0.0);
        assert!((nees(&DVector::from_vec(vec![1.0, 0.0, 0.0]), &p).unwrap() - 2.0).abs() < 1e-12);
        assert!(nees(&DVector::zeros(3), &DMatrix::zeros(3, 3)).is_err());
    }

    /// Exact Kalman filter on `x_{k+1} = x_k + w`, `z = x + v`.
    fn scalar_kf_nees(rng: &mut ChaCha8Rng, steps: usize) -> Vec<f64> {
        let (q, r) = (0.01_f64, 0.25_f64);
        let wn = Normal::new(0.0, q.sqrt()).unwrap();
        let vn = Normal::new(0.0, r.sqrt()).unwrap();
        let p0 = 1.0_f64;
        let mut x = Normal::new(0.0, p0.sqrt()).unwrap().sample(rng);
        let (mut xh, mut p) = (0.0, p0);
        let mut out = Vec::with_capacity(steps);
        for _ in 0..steps {
            x += wn.sample(rng);
            p += q;
            let z = x + vn.sample(rng);
            let k = p / (p + r);
            xh += k * (z - xh);
            p *= 1.0 - k;
            out.push((x - xh).powi(2) / p);
        }
        out
    }

    #[test]
    fn exact_kalman_filter_is_consistent() {
        let mut rng = ChaCha8Rng::seed_from_u64(61);
        let m = mean(scalar_kf_nees(&mut rng, 10_000)).unwrap();
        assert!((0.9..=1.1).contains(&m), "mean NEES {m}");
    }

    #[test]
    fn monte_carlo_band() {
        let (lo, hi) = nees_bounds(3, 25, 0.95);
        assert!((lo - 2.12).abs() < 0.01 && (hi - 4.03).abs() < 0.01, "{lo} {hi}");
        assert!(lo >= 2.1 && hi <= 4.1);

        // 25 runs of three independent exact filters land in the band.
        let mut rng = ChaCha8Rng::seed_from_u64(62);
        let per_run: Vec<f64> = (0..25)
            .map(|_| {
                let axes: Vec<Vec<f64>> = (0..3).map(|_| scalar_kf_nees(&mut rng, 1)).collect();
                axes.iter().map(|a| a[0]).sum::<f64>()
            })
            .collect();
        let avg = mean(per_run).unwrap();
        assert!(avg >= lo && avg <= hi, "average NEES {avg}");
    }
}
