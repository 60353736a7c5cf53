use nalgebra::Vector2;

use crate::error::{Error, Result};
use crate::so3::{Mat3, Quat, Vec3};

/// Undistorted pinhole camera rigidly mounted on the IMU.
#[derive(Clone, Debug, PartialEq)]
pub struct CameraModel {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    /// rotation taking IMU-frame vectors into the camera frame
    pub r_ic: Mat3,
    /// camera position expressed in the IMU frame
    pub p_ic: Vec3,
    pub width: u32,
    pub height: u32,
}

impl Default for CameraModel {
    /// Downward-looking 640×480 camera with a 90° horizontal field of view.
    fn default() -> Self {
        Self {
            fx: 320.0,
            fy: 320.0,
            cx: 320.0,
            cy: 240.0,
            r_ic: Mat3::new(1.0, 0.0, 0.0, 0.0, -1.0, 0.0, 0.0, 0.0, -1.0),
            p_ic: Vec3::new(0.05, 0.0, -0.02),
            width: 640,
            height: 480,
        }
    }
}

impl CameraModel {
    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(Error::config("camera.fx", "focal lengths must be > 0"));
        }
        if (self.r_ic * self.r_ic.transpose() - Mat3::identity()).amax() > 1e-6
            || (self.r_ic.determinant() - 1.0).abs() > 1e-6
        {
            return Err(Error::config("camera.r_ic", "not a rotation matrix"));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::config("camera.width", "image size must be > 0"));
        }
        Ok(())
    }

    /// World point expressed in the camera frame of a body pose.
    pub fn to_camera(&self, q: &Quat, p: &Vec3, p_f: &Vec3) -> Vec3 {
        self.r_ic * (q.transform_vector(&(p_f - p)) - self.p_ic)
    }

    /// Camera center in the world frame.
    pub fn center(&self, q: &Quat, p: &Vec3) -> Vec3 {
        p + q.inverse_transform_vector(&self.p_ic)
    }

    /// Rotation from camera frame to world frame.
    pub fn r_wc(&self, q: &Quat) -> Mat3 {
        crate::so3::rot(q).transpose() * self.r_ic.transpose()
    }

    pub fn pixel_to_normalized(&self, uv: &Vector2<f64>) -> Vector2<f64> {
        Vector2::new((uv.x - self.cx) / self.fx, (uv.y - self.cy) / self.fy)
    }

    pub fn in_image(&self, uv: &Vector2<f64>) -> bool {
        uv.x >= 0.0 && uv.y >= 0.0 && uv.x < self.width as f64 && uv.y < self.height as f64
    }

    pub fn project_camera_point(&self, pc: &Vec3) -> Option<Vector2<f64>> {
        if pc.z <= 1e-6 {
            return None;
        }
        Some(Vector2::new(
            self.fx * pc.x / pc.z + self.cx,
            self.fy * pc.y / pc.z + self.cy,
        ))
    }
}

/// Pixel location of `p_f` seen from body pose `(q, p)`; `None` when the
/// point is behind the camera.
pub fn project_pinhole(p_f: &Vec3, q: &Quat, p: &Vec3, cam: &CameraModel) -> Option<Vector2<f64>> {
    cam.project_camera_point(&cam.to_camera(q, p, p_f))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn body_cam() -> CameraModel {
        CameraModel {
            fx: 400.0,
            fy: 400.0,
            cx: 320.0,
            cy: 320.0,
            r_ic: Mat3::identity(),
            p_ic: Vec3::zeros(),
            width: 640,
            height: 640,
        }
    }

    #[test]
    fn principal_point_and_offset() {
        let cam = body_cam();
        let q = Quat::identity();
        let uv = project_pinhole(&Vec3::new(0.0, 0.0, 5.0), &q, &Vec3::zeros(), &cam).unwrap();
        assert_eq!(uv, Vector2::new(320.0, 320.0));
        let uv = project_pinhole(&Vec3::new(0.5, 0.0, 5.0), &q, &Vec3::zeros(), &cam).unwrap();
        assert!((uv - Vector2::new(360.0, 320.0)).amax() < 1e-12);
        assert!(project_pinhole(&Vec3::new(0.0, 0.0, -1.0), &q, &Vec3::zeros(), &cam).is_none());
    }

    #[test]
    fn default_camera_looks_down() {
        let cam = CameraModel::default();
        cam.validate().unwrap();
        let q = Quat::identity();
        let p = Vec3::new(0.0, 0.0, 2.0);
        let pc = cam.to_camera(&q, &p, &Vec3::new(0.05, 0.0, 0.0));
        assert!((pc - Vec3::new(0.0, 0.0, 1.98)).amax() < 1e-12);
        let c = cam.center(&q, &p);
        assert!((c - Vec3::new(0.05, 0.0, 1.98)).amax() < 1e-12);
    }

    #[test]
    fn rejects_non_rotation_extrinsics() {
        let mut cam = CameraModel::default();
        cam.r_ic = Mat3::identity() * 2.0;
        assert!(cam.validate().is_err());
    }
}
