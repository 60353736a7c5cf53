//! Multi-view point triangulation: linear initialization over bearing rays,
//! then Gauss-Newton on normalized reprojection error.

use nalgebra::{Matrix2x3, Matrix3, Vector2};

use super::camera::CameraModel;
use crate::so3::{Quat, Vec3};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TriangulationParams {
    pub min_baseline_ratio: f64,
    pub min_depth: f64,
    pub max_depth: f64,
    pub max_iterations: usize,
    pub step_tolerance: f64,
}

impl Default for TriangulationParams {
    fn default() -> Self {
        Self {
            min_baseline_ratio: 0.02,
            min_depth: 0.1,
            max_depth: 60.0,
            max_iterations: 10,
            step_tolerance: 1e-8,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TriangulationFailure {
    TooFewObservations,
    SmallBaseline,
    Singular,
    DepthOutOfRange,
    Diverged,
}

/// One view of a feature: body pose and measured pixel.
#[derive(Clone, Copy, Debug)]
pub struct View {
    pub q: Quat,
    pub p: Vec3,
    pub uv: Vector2<f64>,
}

struct Ray {
    center: Vec3,
    bearing: Vec3,
}

fn cost(views: &[View], cam: &CameraModel, pf: &Vec3) -> Option<f64> {
    let mut c = 0.0;
    for v in views {
        let pc = cam.to_camera(&v.q, &v.p, pf);
        if pc.z <= 1e-9 {
            return None;
        }
        let n = cam.pixel_to_normalized(&v.uv);
        c += (Vector2::new(pc.x / pc.z, pc.y / pc.z) - n).norm_squared();
    }
    Some(c)
}

pub fn triangulate(
    views: &[View],
    cam: &CameraModel,
    params: &TriangulationParams,
) -> Result<Vec3, TriangulationFailure> {
    if views.len() < 2 {
        return Err(TriangulationFailure::TooFewObservations);
    }
    let rays: Vec<Ray> = views
        .iter()
        .map(|v| {
            let n = cam.pixel_to_normalized(&v.uv);
            Ray {
                center: cam.center(&v.q, &v.p),
                bearing: (cam.r_wc(&v.q) * Vec3::new(n.x, n.y, 1.0)).normalize(),
            }
        })
        .collect();

    let mut baseline: f64 = 0.0;
    for i in 0..rays.len() {
        for j in i + 1..rays.len() {
            baseline = baseline.max((rays[i].center - rays[j].center).norm());
        }
    }
    if baseline < 1e-9 {
        return Err(TriangulationFailure::SmallBaseline);
    }

    // Σ (I − b bᵀ)(p − c) = 0
    let mut a = Matrix3::zeros();
    let mut rhs = Vec3::zeros();
    for ray in &rays {
        let proj = Matrix3::identity() - ray.bearing * ray.bearing.transpose();
        a += proj;
        rhs += proj * ray.center;
    }
    let svd = a.svd(false, false);
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    if smin <= 1e-12 * smax {
        return Err(TriangulationFailure::Singular);
    }
    let mut pf = a
        .lu()
        .solve(&rhs)
        .ok_or(TriangulationFailure::Singular)?;

    let mut current = cost(views, cam, &pf).ok_or(TriangulationFailure::DepthOutOfRange)?;
    let mut increases = 0;
    for _ in 0..params.max_iterations {
        let mut jtj = Matrix3::zeros();
        let mut jtr = Vec3::zeros();
        for v in views {
            let rcw = cam.r_ic * crate::so3::rot(&v.q);
            let pc = cam.to_camera(&v.q, &v.p, &pf);
            let iz = 1.0 / pc.z;
            let dproj = Matrix2x3::new(iz, 0.0, -pc.x * iz * iz, 0.0, iz, -pc.y * iz * iz);
            let jac = dproj * rcw;
            let n = cam.pixel_to_normalized(&v.uv);
            let res = n - Vector2::new(pc.x * iz, pc.y * iz);
            jtj += jac.transpose() * jac;
            jtr += jac.transpose() * res;
        }
        let step = match jtj.lu().solve(&jtr) {
            Some(s) => s,
            None => return Err(TriangulationFailure::Singular),
        };
        let candidate = pf + step;
        match cost(views, cam, &candidate) {
            Some(c) if c <= current * (1.0 + 1e-12) + 1e-24 => {
                pf = candidate;
                current = c;
            }
            _ => {
                increases += 1;
                if increases >= 2 {
                    return Err(TriangulationFailure::Diverged);
                }
                continue;
            }
        }
        if step.norm() < params.step_tolerance * (1.0 + pf.norm()) {
            break;
        }
    }

    let mut mean_depth = 0.0;
    for v in views {
        let z = cam.to_camera(&v.q, &v.p, &pf).z;
        if !(z >= params.min_depth && z <= params.max_depth) {
            return Err(TriangulationFailure::DepthOutOfRange);
        }
        mean_depth += z;
    }
    mean_depth /= views.len() as f64;
    if baseline / mean_depth < params.min_baseline_ratio {
        return Err(TriangulationFailure::SmallBaseline);
    }
    Ok(pf)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::so3::Mat3;
    use crate::vision::camera::project_pinhole;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn body_cam() -> CameraModel {
        CameraModel {
            fx: 400.0,
            fy: 400.0,
            cx: 320.0,
            cy: 240.0,
            r_ic: Mat3::identity(),
            p_ic: Vec3::zeros(),
            width: 640,
            height: 480,
        }
    }

    fn view(cam: &CameraModel, p: Vec3, pf: &Vec3) -> View {
        let q = Quat::identity();
        View {
            q,
            p,
            uv: project_pinhole(pf, &q, &p, cam).unwrap(),
        }
    }

    #[test]
    fn two_view_noiseless() {
        let cam = body_cam();
        let pf = Vec3::new(0.5, 0.0, 5.0);
        let views = [view(&cam, Vec3::zeros(), &pf), view(&cam, Vec3::x(), &pf)];
        let est = triangulate(&views, &cam, &TriangulationParams::default()).unwrap();
        assert!((est - pf).amax() < 1e-9);
    }

    #[test]
    fn zero_baseline_fails() {
        let cam = body_cam();
        let pf = Vec3::new(0.5, 0.0, 5.0);
        let views = [view(&cam, Vec3::zeros(), &pf), view(&cam, Vec3::zeros(), &pf)];
        assert_eq!(
            triangulate(&views, &cam, &TriangulationParams::default()),
            Err(TriangulationFailure::SmallBaseline)
        );
        assert_eq!(
            triangulate(&views[..1], &cam, &TriangulationParams::default()),
            Err(TriangulationFailure::TooFewObservations)
        );
    }

    #[test]
    fn too_far_fails_depth_check() {
        let cam = body_cam();
        let pf = Vec3::new(0.5, 0.0, 80.0);
        let views = [view(&cam, Vec3::zeros(), &pf), view(&cam, Vec3::x() * 3.0, &pf)];
        assert_eq!(
            triangulate(&views, &cam, &TriangulationParams::default()),
            Err(TriangulationFailure::DepthOutOfRange)
        );
    }

    #[test]
    fn noisy_six_view_accuracy() {
        let cam = body_cam();
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let px = Normal::new(0.0, 1.0).unwrap();
        let pf = Vec3::new(0.3, -0.2, 5.0);
        // clones 0.5 m apart; first-order depth std z²σ/(f·√Σ(x−x̄)²)
        let xs: Vec<f64> = (0..6).map(|k| 0.5 * k as f64).collect();
        let xm = xs.iter().sum::<f64>() / 6.0;
        let spread = xs.iter().map(|x| (x - xm).powi(2)).sum::<f64>().sqrt();
        let sigma_z = pf.z * pf.z / (cam.fx * spread);
        let mut errs = Vec::new();
        for _ in 0..100 {
            let views: Vec<View> = (0..6)
                .map(|k| {
                    let p = Vec3::new(xs[k], 0.0, 0.0);
                    let mut v = view(&cam, p, &pf);
                    v.uv.x += px.sample(&mut rng);
                    v.uv.y += px.sample(&mut rng);
                    v
                })
                .collect();
            let est = triangulate(&views, &cam, &TriangulationParams::default()).unwrap();
            errs.push((est - pf).norm());
        }
        errs.sort_by(f64::total_cmp);
        assert!(errs[94] < 0.2, "95th percentile {}", errs[94]);
        assert!(errs[94] < 3.0 * sigma_z, "95th percentile {} vs σ_z {sigma_z}", errs[94]);
    }
}
