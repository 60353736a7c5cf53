//! Synthetic flights with an elastic-rope disturbance, and the measurement
//! streams a multirotor would record along them.

use std::f64::consts::TAU;

use nalgebra::Rotation3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::config::{RopeParams, SimConfig, TrajectoryKind};
use crate::dataset::{DatasetStreams, GroundTruth, ImuSample, ThrustSample};
use crate::error::{Error, Result};
use crate::so3::{log, rot, Mat3, Quat, Vec3};
use crate::vision::{project_pinhole, CameraFrame, CameraModel, FeatureObservation};

/// True vehicle state at one instant.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SimRecord {
    pub t: f64,
    /// rotates world vectors into the IMU frame
    pub q: Quat,
    pub p: Vec3,
    pub v: Vec3,
    pub a_w: Vec3,
    /// body angular rate
    pub omega: Vec3,
    /// external force, IMU frame
    pub force_body: Vec3,
    /// mass-normalized thrust, IMU frame
    pub thrust: Vec3,
}

/// Dataset plus the noise-free truth it was generated from.
#[derive(Clone, Debug)]
pub struct SimOutput {
    pub streams: DatasetStreams,
    pub records: Vec<SimRecord>,
    pub landmarks: Vec<Vec3>,
    /// true biases at each IMU sample
    pub gyro_bias: Vec<Vec3>,
    pub accel_bias: Vec<Vec3>,
}

/// Spring force toward `anchor` once the rope is stretched beyond its rest
/// length, world frame.
pub fn rope_force(p: &Vec3, rope: &RopeParams) -> Result<Vec3> {
    if rope.stiffness == 0.0 {
        return Ok(Vec3::zeros());
    }
    let d = p - rope.anchor;
    let len = d.norm();
    if len < 1e-9 {
        if rope.rest_length > 0.0 {
            return Ok(Vec3::zeros());
        }
        return Err(Error::precondition("simulator", "rope direction undefined at the anchor"));
    }
    let stretch = (len - rope.rest_length).max(0.0);
    Ok(-rope.stiffness * stretch * d / len)
}

/// Position, velocity and acceleration at `t`, closed form.
pub fn kinematics(cfg: &SimConfig, t: f64) -> (Vec3, Vec3, Vec3) {
    let c = cfg.center;
    if cfg.trajectory == TrajectoryKind::Hover {
        return (c, Vec3::zeros(), Vec3::zeros());
    }
    let w = TAU / cfg.period;
    let a = cfg.amplitude;
    let (s1, c1) = (w * t).sin_cos();
    let (mut p, mut v, mut acc) = match cfg.trajectory {
        TrajectoryKind::Circle => (
            Vec3::new(a * c1, a * s1, 0.0),
            Vec3::new(-a * w * s1, a * w * c1, 0.0),
            Vec3::new(-a * w * w * c1, -a * w * w * s1, 0.0),
        ),
        _ => {
            let (s2, c2) = (2.0 * w * t).sin_cos();
            (
                Vec3::new(a * s1, 0.5 * a * s2, 0.0),
                Vec3::new(a * w * c1, a * w * c2, 0.0),
                Vec3::new(-a * w * w * s1, -2.0 * a * w * w * s2, 0.0),
            )
        }
    };
    if cfg.vertical_amplitude != 0.0 && cfg.vertical_period > 0.0 {
        let wz = TAU / cfg.vertical_period;
        let (sz, cz) = (wz * t).sin_cos();
        p.z += cfg.vertical_amplitude * sz;
        v.z += cfg.vertical_amplitude * wz * cz;
        acc.z -= cfg.vertical_amplitude * wz * wz * sz;
    }
    (p + c, v, acc)
}

fn yaw(cfg: &SimConfig, t: f64) -> (f64, f64) {
    if cfg.trajectory == TrajectoryKind::Hover || cfg.yaw_period <= 0.0 {
        return (0.0, 0.0);
    }
    let w = TAU / cfg.yaw_period;
    (
        cfg.yaw_amplitude * (w * t).sin(),
        cfg.yaw_amplitude * w * (w * t).cos(),
    )
}

/// Body-to-world rotation at `t`.
fn body_to_world(cfg: &SimConfig, g: &Vec3, t: f64) -> Result<Mat3> {
    let (psi, _) = yaw(cfg, t);
    if !cfg.flatness {
        return Ok(*Rotation3::from_axis_angle(&Vec3::z_axis(), psi).matrix());
    }
    let (p, _, a) = kinematics(cfg, t);
    let f = rope_force(&p, &cfg.rope)?;
    let zb = (a - g - f).normalize();
    let xc = Vec3::new(psi.cos(), psi.sin(), 0.0);
    let yb = zb.cross(&xc).normalize();
    let xb = yb.cross(&zb);
    Ok(Mat3::from_columns(&[xb, yb, zb]))
}

fn record(cfg: &SimConfig, g: &Vec3, t: f64) -> Result<SimRecord> {
    let (p, v, a_w) = kinematics(cfg, t);
    let r_wb = body_to_world(cfg, g, t)?;
    let omega = if cfg.flatness {
        let h = 1e-4;
        let r0 = body_to_world(cfg, g, t - h)?;
        let r1 = body_to_world(cfg, g, t + h)?;
        let rel = Quat::from_matrix(&(r0.transpose() * r1));
        log(&rel) / (2.0 * h)
    } else {
        Vec3::new(0.0, 0.0, yaw(cfg, t).1)
    };
    let q = Quat::from_matrix(&r_wb.transpose());
    let r = rot(&q);
    let force_body = r * rope_force(&p, &cfg.rope)?
        + if t >= cfg.step_time { cfg.step_force } else { Vec3::zeros() };
    let thrust = r * (a_w - g) - force_body;
    Ok(SimRecord {
        t,
        q,
        p,
        v,
        a_w,
        omega,
        force_body,
        thrust,
    })
}

/// Ground truth sampled at the IMU rate from `t = 0` through `duration`.
pub fn gen_trajectory(cfg: &SimConfig, g: &Vec3) -> Result<Vec<SimRecord>> {
    cfg.validate()?;
    let n = (cfg.duration * cfg.imu_rate).round() as usize;
    (0..=n).map(|k| record(cfg, g, k as f64 / cfg.imu_rate)).collect()
}

/// Uniformly scattered landmarks inside the configured box.
pub fn gen_landmarks(cfg: &SimConfig) -> Vec<Vec3> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x6c61_6e64_6d61_726b);
    (0..cfg.landmark_count)
        .map(|_| {
            Vec3::from_fn(|i, _| {
                let (lo, hi) = (cfg.landmark_min[i], cfg.landmark_max[i]);
                if hi > lo {
                    rng.random_range(lo..hi)
                } else {
                    lo
                }
            })
        })
        .collect()
}

fn gauss3(rng: &mut ChaCha8Rng, sigma: f64) -> Vec3 {
    let mut v = Vec3::zeros();
    for i in 0..3 {
        let n: f64 = StandardNormal.sample(rng);
        v[i] = sigma * n;
    }
    v
}

/// Generates truth, landmarks, and noisy IMU, thrust and camera streams.
pub fn synthesize(cfg: &SimConfig, cam: &CameraModel, g: &Vec3) -> Result<SimOutput> {
    let records = gen_trajectory(cfg, g)?;
    let landmarks = gen_landmarks(cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let nz = &cfg.noise;
    let dt = 1.0 / cfg.imu_rate;

    let mut bg = gauss3(&mut rng, nz.gyro_bias_init);
    let mut ba = gauss3(&mut rng, nz.accel_bias_init);
    let mut imu = Vec::with_capacity(records.len());
    let mut thrust = Vec::with_capacity(records.len());
    let mut gyro_bias = Vec::with_capacity(records.len());
    let mut accel_bias = Vec::with_capacity(records.len());
    for (k, r) in records.iter().enumerate() {
        if k > 0 {
            bg += gauss3(&mut rng, nz.gyro_bias_walk * dt.sqrt());
            ba += gauss3(&mut rng, nz.accel_bias_walk * dt.sqrt());
        }
        gyro_bias.push(bg);
        accel_bias.push(ba);
        imu.push(ImuSample {
            t: r.t,
            gyro: r.omega + bg + gauss3(&mut rng, nz.gyro / dt.sqrt()),
            accel: r.thrust + r.force_body + ba + gauss3(&mut rng, nz.accel),
        });
        thrust.push(ThrustSample {
            t: r.t,
            thrust: r.thrust + gauss3(&mut rng, nz.thrust),
        });
    }

    let n_frames = (cfg.duration * cfg.camera_rate).floor() as usize;
    let mut frames = Vec::with_capacity(n_frames + 1);
    let mut pixel_rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x9e37_79b9_7f4a_7c15));
    for j in 0..=n_frames {
        let t = j as f64 / cfg.camera_rate;
        if t > cfg.duration {
            break;
        }
        let r = record(cfg, g, t)?;
        let mut observations = Vec::new();
        for (id, lm) in landmarks.iter().enumerate() {
            let depth = cam.to_camera(&r.q, &r.p, lm).z;
            if !(0.1..=60.0).contains(&depth) {
                continue;
            }
            let Some(uv) = project_pinhole(lm, &r.q, &r.p, cam) else { continue };
            let noise = gauss3(&mut pixel_rng, nz.pixel);
            let uv = uv + noise.xy();
            if cam.in_image(&uv) {
                observations.push(FeatureObservation { id: id as u64, uv });
            }
        }
        if !observations.is_empty() {
            frames.push(CameraFrame { t, observations });
        }
    }

    let groundtruth = records
        .iter()
        .map(|r| GroundTruth {
            t: r.t,
            q: r.q,
            p: r.p,
            v: r.v,
            force: r.force_body,
        })
        .collect();
    Ok(SimOutput {
        streams: DatasetStreams {
            imu,
            thrust,
            frames,
            groundtruth: Some(groundtruth),
        },
        records,
        landmarks,
        gyro_bias,
        accel_bias,
    })
}
