//! CSV dataset and result files.
//!
//! All files have a header row and use `,` as separator. Floats are written
//! with the shortest representation that parses back to the same bits, so a
//! write followed by a load is lossless.
//!
//! | file              | columns                                                    |
//! |-------------------|------------------------------------------------------------|
//! | `imu.csv`         | `t,wx,wy,wz,ax,ay,az`                                      |
//! | `thrust.csv`      | `t,Tx,Ty,Tz`                                               |
//! | `features.csv`    | `t,feature_id,u,v`                                         |
//! | `groundtruth.csv` | `t,qw,qx,qy,qz,px,py,pz,vx,vy,vz,Fx,Fy,Fz` (optional)      |
//! | `estimate.csv`    | `t`, quaternion, p, v, bw, ba, F, 18 covariance diagonals  |
//!
//! Quaternions rotate world-frame vectors into the IMU frame.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use nalgebra::{Quaternion, Vector2};

use crate::error::{Error, Result};
use crate::so3::{Quat, Vec3};
use crate::state::ImuState;
use crate::vision::{CameraFrame, FeatureObservation};

pub const IMU_HEADER: [&str; 7] = ["t", "wx", "wy", "wz", "ax", "ay", "az"];
pub const THRUST_HEADER: [&str; 4] = ["t", "Tx", "Ty", "Tz"];
pub const FEATURES_HEADER: [&str; 4] = ["t", "feature_id", "u", "v"];
pub const GROUNDTRUTH_HEADER: [&str; 14] = [
    "t", "qw", "qx", "qy", "qz", "px", "py", "pz", "vx", "vy", "vz", "Fx", "Fy", "Fz",
];
pub const ESTIMATE_HEADER: [&str; 38] = [
    "t", "qw", "qx", "qy", "qz", "px", "py", "pz", "vx", "vy", "vz", "bwx", "bwy", "bwz", "bax",
    "bay", "baz", "Fx", "Fy", "Fz", "P_thx", "P_thy", "P_thz", "P_px", "P_py", "P_pz", "P_vx",
    "P_vy", "P_vz", "P_bwx", "P_bwy", "P_bwz", "P_bax", "P_bay", "P_baz", "P_Fx", "P_Fy", "P_Fz",
];

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ImuSample {
    pub t: f64,
    pub gyro: Vec3,
    pub accel: Vec3,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ThrustSample {
    pub t: f64,
    pub thrust: Vec3,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GroundTruth {
    pub t: f64,
    pub q: Quat,
    pub p: Vec3,
    pub v: Vec3,
    /// external force in the IMU frame
    pub force: Vec3,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct DatasetStreams {
    pub imu: Vec<ImuSample>,
    pub thrust: Vec<ThrustSample>,
    pub frames: Vec<CameraFrame>,
    pub groundtruth: Option<Vec<GroundTruth>>,
}

/// One row of `estimate.csv`.
#[derive(Clone, Debug, PartialEq)]
pub struct EstimateRow {
    pub t: f64,
    pub imu: ImuState,
    pub cov_diag: [f64; 18],
}

struct Table {
    file: PathBuf,
    rows: Vec<(usize, Vec<f64>)>,
}

fn read_table(path: &Path, header: &[&str]) -> Result<Table> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .flexible(true)
        .comment(None)
        .from_reader(file);
    let mut rows = Vec::new();
    let mut first = true;
    for rec in rdr.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map(|p| p.line() as usize).unwrap_or(0);
            Error::load(path, line, e.to_string())
        })?;
        let line = rec.position().map(|p| p.line() as usize).unwrap_or(0);
        if first {
            first = false;
            let got: Vec<&str> = rec.iter().collect();
            if got != header {
                return Err(Error::load(
                    path,
                    line,
                    format!("expected header `{}`, got `{}`", header.join(","), got.join(",")),
                ));
            }
            continue;
        }
        if rec.len() == 1 && rec[0].is_empty() {
            continue;
        }
        if rec.len() != header.len() {
            return Err(Error::load(
                path,
                line,
                format!("expected {} fields, got {}", header.len(), rec.len()),
            ));
        }
        let mut vals = Vec::with_capacity(rec.len());
        for (name, field) in header.iter().zip(rec.iter()) {
            let v: f64 = field
                .parse()
                .map_err(|_| Error::load(path, line, format!("column `{name}`: cannot parse `{field}`")))?;
            if !v.is_finite() {
                return Err(Error::load(path, line, format!("column `{name}`: non-finite value")));
            }
            vals.push(v);
        }
        rows.push((line, vals));
    }
    if first {
        return Err(Error::load(path, 1, "missing header row"));
    }
    Ok(Table {
        file: path.to_path_buf(),
        rows,
    })
}

impl Table {
    /// Timestamps must increase strictly, or weakly when `allow_equal`.
    fn check_monotonic(&self, allow_equal: bool) -> Result<()> {
        for w in self.rows.windows(2) {
            let (t0, t1) = (w[0].1[0], w[1].1[0]);
            if t1 < t0 || (!allow_equal && t1 == t0) {
                return Err(Error::load(
                    &self.file,
                    w[1].0,
                    format!("timestamp {t1} is not after previous timestamp {t0}"),
                ));
            }
        }
        Ok(())
    }
}

fn v3(r: &[f64], i: usize) -> Vec3 {
    Vec3::new(r[i], r[i + 1], r[i + 2])
}

fn mean_rate(ts: impl Iterator<Item = f64>) -> Option<f64> {
    let ts: Vec<f64> = ts.collect();
    (ts.len() >= 2).then(|| (ts.len() - 1) as f64 / (ts[ts.len() - 1] - ts[0]))
}

pub fn load_imu(path: &Path) -> Result<Vec<ImuSample>> {
    let tab = read_table(path, &IMU_HEADER)?;
    tab.check_monotonic(false)?;
    Ok(tab
        .rows
        .iter()
        .map(|(_, r)| ImuSample {
            t: r[0],
            gyro: v3(r, 1),
            accel: v3(r, 4),
        })
        .collect())
}

pub fn load_thrust(path: &Path) -> Result<Vec<ThrustSample>> {
    let tab = read_table(path, &THRUST_HEADER)?;
    tab.check_monotonic(false)?;
    Ok(tab
        .rows
        .iter()
        .map(|(_, r)| ThrustSample { t: r[0], thrust: v3(r, 1) })
        .collect())
}

pub fn load_features(path: &Path) -> Result<Vec<CameraFrame>> {
    let tab = read_table(path, &FEATURES_HEADER)?;
    tab.check_monotonic(true)?;
    let mut frames: Vec<CameraFrame> = Vec::new();
    for (line, r) in &tab.rows {
        let id = r[1];
        if id < 0.0 || id.fract() != 0.0 || id > u64::MAX as f64 {
            return Err(Error::load(path, *line, format!("feature_id `{id}` is not a non-negative integer")));
        }
        let obs = FeatureObservation {
            id: id as u64,
            uv: Vector2::new(r[2], r[3]),
        };
        match frames.last_mut() {
            Some(f) if f.t == r[0] => {
                if f.observations.iter().any(|o| o.id == obs.id) {
                    return Err(Error::load(path, *line, format!("feature {} repeated in frame", obs.id)));
                }
                f.observations.push(obs)
            }
            _ => frames.push(CameraFrame {
                t: r[0],
                observations: vec![obs],
            }),
        }
    }
    Ok(frames)
}

pub fn load_groundtruth(path: &Path) -> Result<Vec<GroundTruth>> {
    let tab = read_table(path, &GROUNDTRUTH_HEADER)?;
    tab.check_monotonic(false)?;
    let mut out = Vec::with_capacity(tab.rows.len());
    for (line, r) in &tab.rows {
        let q = Quaternion::new(r[1], r[2], r[3], r[4]);
        if (q.norm() - 1.0).abs() > 1e-6 {
            return Err(Error::load(path, *line, format!("quaternion norm {} is not 1", q.norm())));
        }
        out.push(GroundTruth {
            t: r[0],
            q: Quat::new_unchecked(q),
            p: v3(r, 5),
            v: v3(r, 8),
            force: v3(r, 11),
        });
    }
    Ok(out)
}

/// Loads `imu.csv`, `thrust.csv`, `features.csv` and, when present,
/// `groundtruth.csv` from `dir`.
pub fn load_dataset(dir: impl AsRef<Path>) -> Result<DatasetStreams> {
    let dir = dir.as_ref();
    let imu_path = dir.join("imu.csv");
    let thrust_path = dir.join("thrust.csv");
    let imu = load_imu(&imu_path)?;
    let thrust = load_thrust(&thrust_path)?;
    let frames = load_features(&dir.join("features.csv"))?;
    let gt_path = dir.join("groundtruth.csv");
    let groundtruth = if gt_path.exists() {
        Some(load_groundtruth(&gt_path)?)
    } else {
        None
    };
    if imu.is_empty() {
        return Err(Error::load(imu_path, 2, "no samples"));
    }
    if thrust.is_empty() {
        return Err(Error::load(thrust_path, 2, "no samples"));
    }
    if let (Some(ri), Some(rt)) = (
        mean_rate(imu.iter().map(|s| s.t)),
        mean_rate(thrust.iter().map(|s| s.t)),
    ) {
        if (rt - ri).abs() > 0.05 * ri {
            return Err(Error::load(
                thrust_path,
                1,
                format!("thrust rate {rt:.3} Hz differs from IMU rate {ri:.3} Hz by more than 5%"),
            ));
        }
    }
    Ok(DatasetStreams {
        imu,
        thrust,
        frames,
        groundtruth,
    })
}

struct CsvOut {
    path: PathBuf,
    w: BufWriter<File>,
}

impl CsvOut {
    fn create(path: &Path, header: &[&str]) -> Result<Self> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut out = Self {
            path: path.to_path_buf(),
            w: BufWriter::new(file),
        };
        let line = header.join(",");
        out.line(&line)?;
        Ok(out)
    }

    fn line(&mut self, s: &str) -> Result<()> {
        writeln!(self.w, "{s}").map_err(|e| Error::io(&self.path, e))
    }

    fn row(&mut self, vals: &[f64]) -> Result<()> {
        let s: Vec<String> = vals.iter().map(|v| format!("{v}")).collect();
        self.line(&s.join(","))
    }

    fn finish(mut self) -> Result<()> {
        self.w.flush().map_err(|e| Error::io(&self.path, e))
    }
}

fn quat_fields(q: &Quat) -> [f64; 4] {
    [q.w, q.i, q.j, q.k]
}

pub fn write_dataset(dir: impl AsRef<Path>, ds: &DatasetStreams) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;

    let mut w = CsvOut::create(&dir.join("imu.csv"), &IMU_HEADER)?;
    for s in &ds.imu {
        w.row(&[s.t, s.gyro.x, s.gyro.y, s.gyro.z, s.accel.x, s.accel.y, s.accel.z])?;
    }
    w.finish()?;

    let mut w = CsvOut::create(&dir.join("thrust.csv"), &THRUST_HEADER)?;
    for s in &ds.thrust {
        w.row(&[s.t, s.thrust.x, s.thrust.y, s.thrust.z])?;
    }
    w.finish()?;

    let mut w = CsvOut::create(&dir.join("features.csv"), &FEATURES_HEADER)?;
    for f in &ds.frames {
        for o in &f.observations {
            w.line(&format!("{},{},{},{}", f.t, o.id, o.uv.x, o.uv.y))?;
        }
    }
    w.finish()?;

    let gt_path = dir.join("groundtruth.csv");
    match &ds.groundtruth {
        Some(gt) => {
            let mut w = CsvOut::create(&gt_path, &GROUNDTRUTH_HEADER)?;
            for g in gt {
                let q = quat_fields(&g.q);
                w.row(&[
                    g.t, q[0], q[1], q[2], q[3], g.p.x, g.p.y, g.p.z, g.v.x, g.v.y, g.v.z, g.force.x,
                    g.force.y, g.force.z,
                ])?;
            }
            w.finish()?;
        }
        None => {
            if gt_path.exists() {
                fs::remove_file(&gt_path).map_err(|e| Error::io(&gt_path, e))?;
            }
        }
    }
    Ok(())
}

/// Incremental writer for `estimate.csv`.
pub struct EstimateWriter {
    out: CsvOut,
    last_t: f64,
}

impl EstimateWriter {
    pub fn create(path: impl AsRef<Path>) -> Result<Self> {
        Ok(Self {
            out: CsvOut::create(path.as_ref(), &ESTIMATE_HEADER)?,
            last_t: f64::NEG_INFINITY,
        })
    }

    /// Appends a row; rows at a time not after the previous one are skipped.
    pub fn push(&mut self, row: &EstimateRow) -> Result<()> {
        if row.t <= self.last_t {
            return Ok(());
        }
        self.last_t = row.t;
        let x = &row.imu;
        let mut vals = Vec::with_capacity(38);
        vals.push(row.t);
        vals.extend_from_slice(&quat_fields(&x.q));
        for v in [&x.p, &x.v, &x.bg, &x.ba, &x.force] {
            vals.extend_from_slice(v.as_slice());
        }
        vals.extend_from_slice(&row.cov_diag);
        self.out.row(&vals)
    }

    pub fn finish(self) -> Result<()> {
        self.out.finish()
    }
}

pub fn write_states(path: impl AsRef<Path>, rows: &[EstimateRow]) -> Result<()> {
    let mut w = EstimateWriter::create(path)?;
    for r in rows {
        w.push(r)?;
    }
    w.finish()
}

pub fn load_states(path: impl AsRef<Path>) -> Result<Vec<EstimateRow>> {
    let path = path.as_ref();
    let tab = read_table(path, &ESTIMATE_HEADER)?;
    tab.check_monotonic(false)?;
    let mut out = Vec::with_capacity(tab.rows.len());
    for (line, r) in &tab.rows {
        let q = Quaternion::new(r[1], r[2], r[3], r[4]);
        if (q.norm() - 1.0).abs() > 1e-6 {
            return Err(Error::load(path, *line, "quaternion is not unit norm"));
        }
        let mut imu = ImuState::new(Quat::new_unchecked(q), v3(r, 5), v3(r, 8));
        imu.bg = v3(r, 11);
        imu.ba = v3(r, 14);
        imu.force = v3(r, 17);
        let mut cov_diag = [0.0; 18];
        cov_diag.copy_from_slice(&r[20..38]);
        out.push(EstimateRow { t: r[0], imu, cov_diag });
    }
    Ok(out)
}

/// `metric,value` rows.
pub fn write_metrics(path: impl AsRef<Path>, metrics: &[(String, f64)]) -> Result<()> {
    let mut w = CsvOut::create(path.as_ref(), &["metric", "value"])?;
    for (k, v) in metrics {
        w.line(&format!("{k},{v}"))?;
    }
    w.finish()
}

/// `t,nees` rows.
pub fn write_nees(path: impl AsRef<Path>, series: &[(f64, f64)]) -> Result<()> {
    let mut w = CsvOut::create(path.as_ref(), &["t", "nees"])?;
    for (t, v) in series {
        w.row(&[*t, *v])?;
    }
    w.finish()
}

pub fn load_nees(path: impl AsRef<Path>) -> Result<Vec<(f64, f64)>> {
    let path = path.as_ref();
    let tab = read_table(path, &["t", "nees"])?;
    Ok(tab.rows.into_iter().map(|(_, r)| (r[0], r[1])).collect())
}

pub fn load_metrics(path: impl AsRef<Path>) -> Result<Vec<(String, f64)>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate().skip(1) {
        let Some((k, v)) = line.split_once(',') else {
            return Err(Error::load(path, n + 1, "expected `metric,value`"));
        };
        let v = v
            .trim()
            .parse()
            .map_err(|_| Error::load(path, n + 1, format!("cannot parse `{v}`")))?;
        out.push((k.trim().to_string(), v));
    }
    Ok(out)
}
