//! Estimator and simulator configuration, and the flat `section.key = value`
//! text format they are read from.
//!
//! Lines are `section.key = value`; `#` starts a comment; blank lines are
//! ignored. Vectors are comma-separated (`0, 0, -9.81`), matrices are nine
//! comma-separated values in row-major order. Every key is optional; unknown
//! keys are rejected.

use std::fs;
use std::path::Path;

use crate::accel::AccelNoise;
use crate::error::{Error, Result};
use crate::propagation::{ForceFrame, ProcessNoise};
use crate::so3::{Mat3, Vec3};
use crate::vision::{CameraModel, TriangulationParams};

/// Initial standard deviations of the IMU-state blocks.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct InitialSigmas {
    pub theta: f64,
    pub position: f64,
    pub velocity: f64,
    pub gyro_bias: f64,
    pub accel_bias: f64,
    pub force: f64,
}

impl Default for InitialSigmas {
    fn default() -> Self {
        Self {
            theta: 1e-3,
            position: 1e-3,
            velocity: 1e-2,
            gyro_bias: 2e-3,
            accel_bias: 1e-2,
            force: 1.0,
        }
    }
}

/// How often `estimate.csv` gets a row.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum OutputCadence {
    /// after every IMU sample (propagation + accelerometer update)
    #[default]
    Imu,
    /// after every camera update
    Camera,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EstimatorConfig {
    pub gravity: Vec3,
    pub window_size: usize,
    pub max_slam_features: usize,
    pub process: ProcessNoise,
    pub accel: AccelNoise,
    pub sigma_px: f64,
    pub init: InitialSigmas,
    /// chi-square gate for camera updates
    pub vision_gate: f64,
    /// chi-square gate for accelerometer updates; `None` disables gating
    pub accel_gate: Option<f64>,
    pub camera: CameraModel,
    pub triangulation: TriangulationParams,
    pub use_accel_update: bool,
    pub use_vision: bool,
    pub force_frame: ForceFrame,
    pub output_cadence: OutputCadence,
    /// thrust samples further than this from the IMU stamp are interpolated
    pub thrust_sync_tolerance: f64,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        Self {
            gravity: Vec3::new(0.0, 0.0, -9.81),
            window_size: 11,
            max_slam_features: 0,
            process: ProcessNoise::default(),
            accel: AccelNoise::default(),
            sigma_px: 1.0,
            init: InitialSigmas::default(),
            vision_gate: 0.95,
            accel_gate: None,
            camera: CameraModel::default(),
            triangulation: TriangulationParams::default(),
            use_accel_update: true,
            use_vision: true,
            force_frame: ForceFrame::Body,
            output_cadence: OutputCadence::Imu,
            thrust_sync_tolerance: 1e-3,
        }
    }
}

impl EstimatorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window_size < 3 {
            return Err(Error::config(
                "filter.window_size",
                format!("must be >= 3, got {}", self.window_size),
            ));
        }
        let gn = self.gravity.norm();
        if !(9.0..=10.5).contains(&gn) {
            return Err(Error::config(
                "filter.gravity",
                format!("norm {gn} outside [9.0, 10.5]"),
            ));
        }
        self.process.validate()?;
        self.accel.validate()?;
        self.init.validate()?;
        if !(self.sigma_px > 0.0) {
            return Err(Error::config("noise.sigma_px", "must be > 0"));
        }
        for (key, p) in [("gate.vision", Some(self.vision_gate)), ("gate.accel", self.accel_gate)] {
            if let Some(p) = p {
                if !(p > 0.0 && p < 1.0) {
                    return Err(Error::config(key, format!("probability {p} outside (0, 1)")));
                }
            }
        }
        let t = &self.triangulation;
        if !(t.min_depth > 0.0 && t.max_depth > t.min_depth) {
            return Err(Error::config("vision.min_depth", "need 0 < min_depth < max_depth"));
        }
        self.camera.validate()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TrajectoryKind {
    Hover,
    Circle,
    Lemniscate,
}

/// Elastic rope pulling the vehicle toward an anchor once stretched.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RopeParams {
    pub anchor: Vec3,
    pub rest_length: f64,
    /// m/s² of mass-normalized force per metre of stretch; 0 disables the rope
    pub stiffness: f64,
}

/// Noise injected by the simulator.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SimNoise {
    /// gyro white noise density, rad/s/√Hz
    pub gyro: f64,
    /// gyro bias random walk density, rad/s²/√Hz
    pub gyro_bias_walk: f64,
    /// accelerometer white noise, m/s² per sample
    pub accel: f64,
    /// accelerometer bias random walk density, m/s³/√Hz
    pub accel_bias_walk: f64,
    /// thrust measurement noise, m/s² per sample
    pub thrust: f64,
    /// pixel noise, px
    pub pixel: f64,
    /// standard deviation of the initial gyro bias
    pub gyro_bias_init: f64,
    /// standard deviation of the initial accelerometer bias
    pub accel_bias_init: f64,
}

impl Default for SimNoise {
    fn default() -> Self {
        Self {
            gyro: 1.0e-3,
            gyro_bias_walk: 1.0e-4,
            accel: 0.015,
            accel_bias_walk: 1.0e-3,
            thrust: 0.01,
            pixel: 1.0,
            gyro_bias_init: 2e-3,
            accel_bias_init: 1e-2,
        }
    }
}

impl SimNoise {
    pub fn zero() -> Self {
        Self {
            gyro: 0.0,
            gyro_bias_walk: 0.0,
            accel: 0.0,
            accel_bias_walk: 0.0,
            thrust: 0.0,
            pixel: 0.0,
            gyro_bias_init: 0.0,
            accel_bias_init: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SimConfig {
    pub trajectory: TrajectoryKind,
    /// circle radius or lemniscate half-width, m
    pub amplitude: f64,
    pub period: f64,
    /// hover point and trajectory center
    pub center: Vec3,
    pub vertical_amplitude: f64,
    pub vertical_period: f64,
    pub yaw_amplitude: f64,
    pub yaw_period: f64,
    /// thrust along body z with tilt from the required specific force
    pub flatness: bool,
    pub duration: f64,
    pub imu_rate: f64,
    pub camera_rate: f64,
    pub rope: RopeParams,
    /// extra body-frame force switched on at `step_time`
    pub step_force: Vec3,
    pub step_time: f64,
    pub landmark_count: usize,
    pub landmark_min: Vec3,
    pub landmark_max: Vec3,
    pub noise: SimNoise,
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            trajectory: TrajectoryKind::Lemniscate,
            amplitude: 2.0,
            period: 12.0,
            center: Vec3::new(0.0, 0.0, 2.0),
            vertical_amplitude: 0.3,
            vertical_period: 7.0,
            yaw_amplitude: 0.6,
            yaw_period: 9.0,
            flatness: false,
            duration: 60.0,
            imu_rate: 200.0,
            camera_rate: 20.0,
            rope: RopeParams {
                anchor: Vec3::new(0.0, 0.0, 1.0),
                rest_length: 1.5,
                stiffness: 4.0,
            },
            step_force: Vec3::zeros(),
            step_time: 0.0,
            landmark_count: 150,
            landmark_min: Vec3::new(-4.5, -3.5, -0.5),
            landmark_max: Vec3::new(4.5, 3.5, 0.5),
            noise: SimNoise::default(),
            seed: 1,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.imu_rate > 0.0 && self.camera_rate > 0.0) {
            return Err(Error::config("sim.imu_rate", "rates must be > 0"));
        }
        if !(self.duration > 0.0) {
            return Err(Error::config("sim.duration", "must be > 0"));
        }
        if self.rope.stiffness < 0.0 {
            return Err(Error::config("sim.rope_stiffness", "must be >= 0"));
        }
        if self.trajectory != TrajectoryKind::Hover && !(self.period > 0.0) {
            return Err(Error::config("sim.period", "must be > 0"));
        }
        if (0..3).any(|i| self.landmark_min[i] > self.landmark_max[i]) {
            return Err(Error::config("sim.landmark_min", "box min exceeds max"));
        }
        Ok(())
    }
}

/// Everything a config file can set.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Config {
    pub estimator: EstimatorConfig,
    pub sim: SimConfig,
}

fn parse_f64(key: &str, v: &str) -> Result<f64> {
    v.trim()
        .parse::<f64>()
        .ok()
        .filter(|x| x.is_finite())
        .ok_or_else(|| Error::config(key, format!("expected a finite number, got `{v}`")))
}

fn parse_list(key: &str, v: &str, n: usize) -> Result<Vec<f64>> {
    let parts: Vec<&str> = v.split(',').collect();
    if parts.len() != n {
        return Err(Error::config(key, format!("expected {n} comma-separated values, got `{v}`")));
    }
    parts.iter().map(|p| parse_f64(key, p)).collect()
}

fn parse_vec3(key: &str, v: &str) -> Result<Vec3> {
    let l = parse_list(key, v, 3)?;
    Ok(Vec3::new(l[0], l[1], l[2]))
}

fn parse_usize(key: &str, v: &str) -> Result<usize> {
    v.trim()
        .parse()
        .map_err(|_| Error::config(key, format!("expected a non-negative integer, got `{v}`")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v.trim() {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::config(key, format!("expected a boolean, got `{v}`"))),
    }
}

impl Config {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Config::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::config(
                    format!("line {}", n + 1),
                    format!("malformed line `{raw}`"),
                ));
            };
            cfg.set(key.trim(), value.trim())?;
        }
        cfg.estimator.validate()?;
        cfg.sim.validate()?;
        Ok(cfg)
    }

    fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let e = &mut self.estimator;
        let s = &mut self.sim;
        match key {
            "filter.gravity" => e.gravity = parse_vec3(key, v)?,
            "filter.window_size" => e.window_size = parse_usize(key, v)?,
            "filter.max_slam_features" => e.max_slam_features = parse_usize(key, v)?,
            "filter.use_accel_update" => e.use_accel_update = parse_bool(key, v)?,
            "filter.use_vision" => e.use_vision = parse_bool(key, v)?,
            "filter.world_frame_force" => {
                e.force_frame = if parse_bool(key, v)? { ForceFrame::World } else { ForceFrame::Body }
            }
            "filter.output_cadence" => {
                e.output_cadence = match v {
                    "imu" => OutputCadence::Imu,
                    "camera" => OutputCadence::Camera,
                    _ => return Err(Error::config(key, format!("expected imu|camera, got `{v}`"))),
                }
            }
            "filter.thrust_sync_tolerance" => e.thrust_sync_tolerance = parse_f64(key, v)?,
            "noise.sigma_w" => e.process.sigma_w = parse_f64(key, v)?,
            "noise.sigma_bw" => e.process.sigma_bw = parse_f64(key, v)?,
            "noise.sigma_ba" => e.process.sigma_ba = parse_f64(key, v)?,
            "noise.sigma_f" => e.process.sigma_f = parse_f64(key, v)?,
            "noise.sigma_t" => e.process.sigma_t = parse_f64(key, v)?,
            "noise.sigma_a" => e.accel.sigma_a = parse_f64(key, v)?,
            "noise.sigma_px" => e.sigma_px = parse_f64(key, v)?,
            "init.sigma_theta" => e.init.theta = parse_f64(key, v)?,
            "init.sigma_p" => e.init.position = parse_f64(key, v)?,
            "init.sigma_v" => e.init.velocity = parse_f64(key, v)?,
            "init.sigma_bw" => e.init.gyro_bias = parse_f64(key, v)?,
            "init.sigma_ba" => e.init.accel_bias = parse_f64(key, v)?,
            "init.sigma_f" => e.init.force = parse_f64(key, v)?,
            "gate.vision" => e.vision_gate = parse_f64(key, v)?,
            "gate.accel" => {
                let p = parse_f64(key, v)?;
                e.accel_gate = (p > 0.0).then_some(p);
            }
            "camera.fx" => e.camera.fx = parse_f64(key, v)?,
            "camera.fy" => e.camera.fy = parse_f64(key, v)?,
            "camera.cx" => e.camera.cx = parse_f64(key, v)?,
            "camera.cy" => e.camera.cy = parse_f64(key, v)?,
            "camera.width" => e.camera.width = parse_usize(key, v)? as u32,
            "camera.height" => e.camera.height = parse_usize(key, v)? as u32,
            "camera.r_ic" => e.camera.r_ic = Mat3::from_row_slice(&parse_list(key, v, 9)?),
            "camera.p_ic" => e.camera.p_ic = parse_vec3(key, v)?,
            "vision.min_baseline_ratio" => e.triangulation.min_baseline_ratio = parse_f64(key, v)?,
            "vision.min_depth" => e.triangulation.min_depth = parse_f64(key, v)?,
            "vision.max_depth" => e.triangulation.max_depth = parse_f64(key, v)?,
            "vision.max_iterations" => e.triangulation.max_iterations = parse_usize(key, v)?,
            "sim.trajectory" => {
                s.trajectory = match v {
                    "hover" => TrajectoryKind::Hover,
                    "circle" => TrajectoryKind::Circle,
                    "lemniscate" => TrajectoryKind::Lemniscate,
                    _ => {
                        return Err(Error::config(
                            key,
                            format!("expected hover|circle|lemniscate, got `{v}`"),
                        ))
                    }
                }
            }
            "sim.amplitude" => s.amplitude = parse_f64(key, v)?,
            "sim.period" => s.period = parse_f64(key, v)?,
            "sim.center" => s.center = parse_vec3(key, v)?,
            "sim.vertical_amplitude" => s.vertical_amplitude = parse_f64(key, v)?,
            "sim.vertical_period" => s.vertical_period = parse_f64(key, v)?,
            "sim.yaw_amplitude" => s.yaw_amplitude = parse_f64(key, v)?,
            "sim.yaw_period" => s.yaw_period = parse_f64(key, v)?,
            "sim.flatness" => s.flatness = parse_bool(key, v)?,
            "sim.duration" => s.duration = parse_f64(key, v)?,
            "sim.imu_rate" => s.imu_rate = parse_f64(key, v)?,
            "sim.camera_rate" => s.camera_rate = parse_f64(key, v)?,
            "sim.rope_anchor" => s.rope.anchor = parse_vec3(key, v)?,
            "sim.rope_rest_length" => s.rope.rest_length = parse_f64(key, v)?,
            "sim.rope_stiffness" => s.rope.stiffness = parse_f64(key, v)?,
            "sim.step_force" => s.step_force = parse_vec3(key, v)?,
            "sim.step_time" => s.step_time = parse_f64(key, v)?,
            "sim.landmark_count" => s.landmark_count = parse_usize(key, v)?,
            "sim.landmark_min" => s.landmark_min = parse_vec3(key, v)?,
            "sim.landmark_max" => s.landmark_max = parse_vec3(key, v)?,
            "sim.seed" => {
                s.seed = v
                    .parse()
                    .map_err(|_| Error::config(key, format!("expected an unsigned integer, got `{v}`")))?
            }
            "sim.noise_gyro" => s.noise.gyro = parse_f64(key, v)?,
            "sim.noise_gyro_bias_walk" => s.noise.gyro_bias_walk = parse_f64(key, v)?,
            "sim.noise_accel" => s.noise.accel = parse_f64(key, v)?,
            "sim.noise_accel_bias_walk" => s.noise.accel_bias_walk = parse_f64(key, v)?,
            "sim.noise_thrust" => s.noise.thrust = parse_f64(key, v)?,
            "sim.noise_pixel" => s.noise.pixel = parse_f64(key, v)?,
            "sim.gyro_bias_init" => s.noise.gyro_bias_init = parse_f64(key, v)?,
            "sim.accel_bias_init" => s.noise.accel_bias_init = parse_f64(key, v)?,
            _ => return Err(Error::config(key, "unknown key")),
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let cfg = Config::parse("").unwrap();
        assert_eq!(cfg.estimator.window_size, 11);
        assert_eq!(cfg.estimator.gravity, Vec3::new(0.0, 0.0, -9.81));
        assert_eq!(cfg, Config::default());
    }

    #[test]
    fn window_size_invariant() {
        let err = Config::parse("filter.window_size = 2").unwrap_err();
        assert!(matches!(err, Error::Config { ref key, .. } if key == "filter.window_size"));
    }

    #[test]
    fn parses_values_and_comments() {
        let cfg = Config::parse(
            "# tuning\nnoise.sigma_f = 2.0\n\nfilter.gravity = 0, 0, -9.8  # local g\nsim.trajectory = circle\ncamera.r_ic = 1,0,0, 0,1,0, 0,0,1\n",
        )
        .unwrap();
        assert_eq!(cfg.estimator.process.sigma_f, 2.0);
        assert_eq!(cfg.estimator.gravity.z, -9.8);
        assert_eq!(cfg.sim.trajectory, TrajectoryKind::Circle);
        assert_eq!(cfg.estimator.camera.r_ic, Mat3::identity());
    }

    #[test]
    fn rejects_unknown_and_malformed() {
        let err = Config::parse("noise.sigma_q = 1").unwrap_err();
        assert!(err.to_string().contains("noise.sigma_q"));
        assert!(Config::parse("filter.window_size 12").is_err());
        assert!(Config::parse("noise.sigma_a = abc").is_err());
        assert!(Config::parse("noise.sigma_a = -1").is_err());
        assert!(Config::parse("filter.gravity = 0, 0, -3").is_err());
        assert!(Config::parse("gate.vision = 1.5").is_err());
    }

    #[test]
    fn missing_file_is_io_error() {
        assert!(matches!(
            Config::load("/nonexistent/forcekf.cfg"),
            Err(Error::Io { .. })
        ));
    }
}
