//! Time-ordered fusion of IMU, thrust and camera streams.
//!
//! For each IMU sample the filter propagates over the elapsed interval with
//! the interval-mean gyro and thrust, then applies the accelerometer update.
//! A camera frame inside an interval splits it: the filter propagates to the
//! frame time, clones and runs the camera update, then finishes the interval.
//! When a frame and an IMU sample share a timestamp (within 1 µs) the IMU
//! sample goes first.

use log::{debug, warn};
use nalgebra::{DMatrix, DVector};

use crate::accel::update_with_accel_in;
use crate::config::{EstimatorConfig, OutputCadence};
use crate::dataset::{DatasetStreams, EstimateRow, GroundTruth, ThrustSample};
use crate::error::{Error, Result};
use crate::eval::nees;
use crate::propagation::{propagate_in, ForceFrame, PropagationInput};
use crate::so3::{rot, Quat, Vec3};
use crate::state::{idx, FilterState, ImuState};
use crate::vision::{CameraFrame, FrameReport, VisionUpdater};

/// Timestamps closer than this are treated as simultaneous.
pub const TIME_EPS: f64 = 1e-6;
const MAX_STEP: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EventKind {
    Propagate,
    Accel,
    Camera,
}

/// Counters accumulated over a run.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunStats {
    pub imu_samples: usize,
    pub accel_updates: usize,
    pub frames: usize,
    pub frames_skipped: usize,
    pub features_used: usize,
    pub features_gated: usize,
    pub triangulation_failures: usize,
    pub slam_promoted: usize,
}

#[derive(Clone, Debug, Default)]
pub struct RunOutput {
    pub estimates: Vec<EstimateRow>,
    /// force-block NEES against ground truth at each IMU sample
    pub nees: Vec<(f64, f64)>,
    pub stats: RunStats,
    /// `(filter time, event)` in processing order, filled when requested
    pub audit: Vec<(f64, EventKind)>,
}

/// Mass-normalized thrust at `t`: the nearest sample when within `tol`,
/// otherwise linear interpolation, clamped at the ends.
pub fn thrust_at(thrust: &[ThrustSample], t: f64, tol: f64) -> Vec3 {
    let k = thrust.partition_point(|s| s.t < t);
    let near = [k.checked_sub(1), Some(k)]
        .into_iter()
        .flatten()
        .filter(|&i| i < thrust.len())
        .min_by(|&a, &b| (thrust[a].t - t).abs().total_cmp(&(thrust[b].t - t).abs()));
    let Some(i) = near else { return Vec3::zeros() };
    if (thrust[i].t - t).abs() <= tol || k == 0 || k == thrust.len() {
        return thrust[i].thrust;
    }
    let (a, b) = (&thrust[k - 1], &thrust[k]);
    let w = (t - a.t) / (b.t - a.t);
    a.thrust + (b.thrust - a.thrust) * w
}

fn gt_at(gt: &[GroundTruth], t: f64) -> Option<&GroundTruth> {
    let k = gt.partition_point(|g| g.t < t - TIME_EPS);
    gt.get(k).filter(|g| (g.t - t).abs() <= TIME_EPS)
}

/// Initial pose: ground truth at the first IMU sample when available,
/// otherwise level with the measured specific force at the origin.
fn initial_pose(ds: &DatasetStreams) -> (Quat, Vec3, Vec3) {
    let t0 = ds.imu[0].t;
    if let Some(gt) = &ds.groundtruth {
        let k = gt.partition_point(|g| g.t < t0);
        let cand = [k.checked_sub(1), Some(k)]
            .into_iter()
            .flatten()
            .filter(|&i| i < gt.len())
            .min_by(|&a, &b| (gt[a].t - t0).abs().total_cmp(&(gt[b].t - t0).abs()));
        if let Some(i) = cand {
            if (gt[i].t - t0).abs() <= 0.01 {
                return (gt[i].q, gt[i].p, gt[i].v);
            }
        }
        warn!("no ground truth within 10 ms of the first IMU sample, initializing level");
    }
    let a = ds.imu[0].accel;
    let q = if a.norm() > 1e-6 {
        // a_m ≈ R·(−g): rotate the measured up direction onto world z
        Quat::rotation_between(&a, &Vec3::z()).unwrap_or_else(Quat::identity)
    } else {
        Quat::identity()
    };
    (q, Vec3::zeros(), Vec3::zeros())
}

struct Runner<'a> {
    cfg: &'a EstimatorConfig,
    state: FilterState,
    vision: VisionUpdater,
    out: RunOutput,
    record_audit: bool,
}

impl Runner<'_> {
    fn audit(&mut self, kind: EventKind, t: f64) -> Result<()> {
        if t < self.state.time - 1e-9 {
            return Err(Error::precondition(
                "pipeline",
                format!("{kind:?} at t={t} precedes filter clock {}", self.state.time),
            ));
        }
        debug!(target: "forcekf::audit", "t={t:.6} {kind:?}");
        if self.record_audit {
            self.out.audit.push((t, kind));
        }
        Ok(())
    }

    fn propagate_to(&mut self, t: f64, omega: &Vec3, thrust: &Vec3) -> Result<()> {
        self.audit(EventKind::Propagate, t)?;
        while t - self.state.time > 1e-12 {
            let dt = (t - self.state.time).min(MAX_STEP);
            let end = if dt < MAX_STEP { t } else { self.state.time + dt };
            let u = PropagationInput {
                omega: *omega,
                thrust: *thrust,
                dt,
            };
            propagate_in(
                &mut self.state,
                &u,
                &self.cfg.process,
                &self.cfg.gravity,
                self.cfg.force_frame,
            )?;
            self.state.time = end;
        }
        self.state.time = t;
        Ok(())
    }

    fn camera(&mut self, frame: &CameraFrame) -> Result<()> {
        self.audit(EventKind::Camera, frame.t)?;
        let f = CameraFrame {
            t: self.state.time,
            observations: frame.observations.clone(),
        };
        let r: FrameReport = self.vision.update_with_frame(&mut self.state, &f, self.cfg)?;
        let s = &mut self.out.stats;
        s.frames += 1;
        s.features_used += r.used;
        s.features_gated += r.gated_out;
        s.triangulation_failures += r.triangulation_failures;
        s.slam_promoted += r.slam_promoted;
        if self.cfg.output_cadence == OutputCadence::Camera {
            self.emit();
        }
        Ok(())
    }

    /// Estimated force in the IMU frame.
    fn force_body(&self) -> Vec3 {
        match self.cfg.force_frame {
            ForceFrame::Body => self.state.imu.force,
            ForceFrame::World => rot(&self.state.imu.q) * self.state.imu.force,
        }
    }

    fn emit(&mut self) {
        let mut imu: ImuState = self.state.imu.clone();
        imu.force = self.force_body();
        let mut cov_diag = [0.0; 18];
        for (i, c) in cov_diag.iter_mut().enumerate() {
            *c = self.state.cov[(i, i)].max(0.0);
        }
        self.out.estimates.push(EstimateRow {
            t: self.state.time,
            imu,
            cov_diag,
        });
    }

    fn record_nees(&mut self, gt: &GroundTruth) -> Result<()> {
        let f_true = match self.cfg.force_frame {
            ForceFrame::Body => gt.force,
            ForceFrame::World => rot(&gt.q).transpose() * gt.force,
        };
        let e = f_true - self.state.imu.force;
        let p = self.state.cov.view((idx::FORCE, idx::FORCE), (3, 3)).into_owned();
        let v = nees(&DVector::from_column_slice(e.as_slice()), &DMatrix::from(p))?;
        self.out.nees.push((self.state.time, v));
        Ok(())
    }
}

/// Runs the estimator over a whole dataset.
pub fn run(ds: &DatasetStreams, cfg: &EstimatorConfig) -> Result<RunOutput> {
    run_with_audit(ds, cfg, false)
}

pub fn run_with_audit(ds: &DatasetStreams, cfg: &EstimatorConfig, record_audit: bool) -> Result<RunOutput> {
    run_observed(ds, cfg, record_audit, |_| {})
}

/// Like [`run_with_audit`], calling `observer` with the filter state after
/// every IMU sample has been fully processed.
pub fn run_observed(
    ds: &DatasetStreams,
    cfg: &EstimatorConfig,
    record_audit: bool,
    mut observer: impl FnMut(&FilterState),
) -> Result<RunOutput> {
    cfg.validate()?;
    if ds.imu.is_empty() || ds.thrust.is_empty() {
        return Err(Error::precondition("pipeline", "dataset has no IMU or thrust samples"));
    }
    let (q, p, v) = initial_pose(ds);
    let t0 = ds.imu[0].t;
    let mut r = Runner {
        cfg,
        state: FilterState::new(cfg, q, p, v, t0)?,
        vision: VisionUpdater::new(),
        out: RunOutput::default(),
        record_audit,
    };
    let tol = cfg.thrust_sync_tolerance;
    let gt = ds.groundtruth.as_deref();

    let mut frames = ds.frames.iter().peekable();
    while let Some(f) = frames.next_if(|f| f.t < t0 - TIME_EPS) {
        warn!("camera frame at t={} precedes the first IMU sample, skipped", f.t);
        r.out.stats.frames_skipped += 1;
    }
    // A frame simultaneous with the first IMU sample is handled after it.
    let mut prev_gyro = ds.imu[0].gyro;
    let mut prev_thrust = thrust_at(&ds.thrust, t0, tol);
    for (k, s) in ds.imu.iter().enumerate() {
        let thrust = thrust_at(&ds.thrust, s.t, tol);
        if k > 0 {
            let omega = 0.5 * (prev_gyro + s.gyro);
            let tm = 0.5 * (prev_thrust + thrust);
            while let Some(f) = frames.next_if(|f| f.t < s.t - TIME_EPS) {
                if cfg.use_vision {
                    r.propagate_to(f.t, &omega, &tm)?;
                    r.camera(f)?;
                }
            }
            r.propagate_to(s.t, &omega, &tm)?;
        }
        r.out.stats.imu_samples += 1;
        if cfg.use_accel_update {
            r.audit(EventKind::Accel, s.t)?;
            let outcome = update_with_accel_in(
                &mut r.state,
                &s.accel,
                &thrust,
                &cfg.accel,
                cfg.force_frame,
                cfg.accel_gate,
            )?;
            if outcome.accepted() {
                r.out.stats.accel_updates += 1;
            }
        }
        if let Some(g) = gt.and_then(|g| gt_at(g, s.t)) {
            r.record_nees(g)?;
        }
        if cfg.output_cadence == OutputCadence::Imu {
            r.emit();
        }
        while let Some(f) = frames.next_if(|f| f.t <= s.t + TIME_EPS) {
            if cfg.use_vision {
                r.camera(f)?;
            }
        }
        observer(&r.state);
        prev_gyro = s.gyro;
        prev_thrust = thrust;
    }
    for f in frames {
        warn!("camera frame at t={} is after the last IMU sample, skipped", f.t);
        r.out.stats.frames_skipped += 1;
    }
    Ok(r.out)
}
