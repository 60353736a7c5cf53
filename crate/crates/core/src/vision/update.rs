//! Sliding-window camera update.

use std::collections::{BTreeMap, BTreeSet};

use nalgebra::{DMatrix, DVector, Vector2};

use super::linearize::{compress, feature_linearize, givens_split, FeatureJacobians, ObsRef};
use super::triangulation::{triangulate, View};
use crate::config::EstimatorConfig;
use crate::error::Result;
use crate::so3::Vec3;
use crate::state::{chi2_quantile, FilterState, Landmark};

/// One pixel observation of a feature in a camera frame.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FeatureObservation {
    pub id: u64,
    pub uv: Vector2<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CameraFrame {
    pub t: f64,
    pub observations: Vec<FeatureObservation>,
}

/// Observations of one feature, keyed to clone timestamps.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureTrack {
    pub id: u64,
    pub observations: Vec<(f64, Vector2<f64>)>,
}

/// Bookkeeping for one processed frame.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct FrameReport {
    pub candidates: usize,
    pub triangulation_failures: usize,
    pub gated_out: usize,
    pub used: usize,
    pub rows: usize,
    pub slam_updates: usize,
    pub slam_promoted: usize,
    pub slam_removed: usize,
}

/// Owns the feature-track database and performs camera updates on a
/// [`FilterState`].
#[derive(Clone, Debug, Default)]
pub struct VisionUpdater {
    tracks: BTreeMap<u64, FeatureTrack>,
    chi2: Vec<f64>,
}

impl VisionUpdater {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn tracks(&self) -> impl Iterator<Item = &FeatureTrack> {
        self.tracks.values()
    }

    fn gate_threshold(cache: &mut Vec<f64>, prob: f64, dof: usize) -> f64 {
        if cache.len() <= dof {
            let start = cache.len().max(1);
            cache.resize(dof + 1, f64::NAN);
            for k in start..=dof {
                cache[k] = chi2_quantile(prob, k);
            }
        }
        cache[dof]
    }

    /// Clones the pose at the frame time, updates with every track that ended
    /// or reached the oldest clone, manages in-state landmarks, and
    /// marginalizes the clone that overflowed the window.
    pub fn update_with_frame(
        &mut self,
        state: &mut FilterState,
        frame: &CameraFrame,
        cfg: &EstimatorConfig,
    ) -> Result<FrameReport> {
        let mut report = FrameReport::default();
        state.clone_pose(frame.t)?;

        let slam_ids: BTreeSet<u64> = state.landmarks.iter().map(|l| l.id).collect();
        let mut seen = BTreeSet::new();
        let mut slam_obs = BTreeMap::new();
        for o in &frame.observations {
            seen.insert(o.id);
            if slam_ids.contains(&o.id) {
                slam_obs.insert(o.id, o.uv);
            } else {
                self.tracks
                    .entry(o.id)
                    .or_insert_with(|| FeatureTrack {
                        id: o.id,
                        observations: Vec::new(),
                    })
                    .observations
                    .push((frame.t, o.uv));
            }
        }

        let overflow = state.clones.len() > cfg.window_size;
        let oldest = state.clones[0].t;
        let mut selected: Vec<u64> = self
            .tracks
            .values()
            .filter(|tr| {
                !seen.contains(&tr.id)
                    || (overflow && tr.observations.first().map(|o| o.0) == Some(oldest))
            })
            .map(|tr| tr.id)
            .collect();

        // Longest live tracks become in-state landmarks when budget allows.
        let mut promote = Vec::new();
        if cfg.max_slam_features > state.landmarks.len() {
            let mut live: Vec<(usize, u64)> = selected
                .iter()
                .filter(|id| seen.contains(id))
                .map(|id| (self.tracks[id].observations.len(), *id))
                .collect();
            live.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
            let budget = cfg.max_slam_features - state.landmarks.len();
            promote = live.into_iter().take(budget).map(|(_, id)| id).collect();
            selected.retain(|id| !promote.contains(id));
        }

        report.candidates = selected.len();
        self.msckf_update(state, &selected, cfg, &mut report)?;
        if !slam_obs.is_empty() {
            self.slam_update(state, &slam_obs, cfg, &mut report)?;
        }
        for id in &promote {
            if let Some(tr) = self.tracks.get(id).cloned() {
                if self.promote(state, &tr, cfg)? {
                    report.slam_promoted += 1;
                }
            }
        }

        for id in selected.iter().chain(promote.iter()) {
            self.tracks.remove(id);
        }
        let mut j = 0;
        while j < state.landmarks.len() {
            let id = state.landmarks[j].id;
            if seen.contains(&id) {
                j += 1;
            } else {
                state.remove_landmark(j);
                report.slam_removed += 1;
            }
        }

        if overflow {
            state.marginalize_oldest_clone(cfg.window_size)?;
            for tr in self.tracks.values_mut() {
                tr.observations.retain(|o| o.0 > oldest + 1e-9);
            }
            self.tracks.retain(|_, tr| !tr.observations.is_empty());
        }
        Ok(report)
    }

    fn views(state: &FilterState, tr: &FeatureTrack) -> (Vec<View>, Vec<ObsRef>) {
        let mut views = Vec::with_capacity(tr.observations.len());
        let mut refs = Vec::with_capacity(tr.observations.len());
        for (t, uv) in &tr.observations {
            if let Some(i) = state.clone_index(*t) {
                let c = &state.clones[i];
                views.push(View { q: c.q, p: c.p, uv: *uv });
                refs.push(ObsRef { clone: i, uv: *uv });
            }
        }
        (views, refs)
    }

    fn linearize_track(
        state: &FilterState,
        tr: &FeatureTrack,
        cfg: &EstimatorConfig,
    ) -> Option<(Vec3, FeatureJacobians)> {
        let (views, refs) = Self::views(state, tr);
        if refs.len() < 2 {
            return None;
        }
        let pf = triangulate(&views, &cfg.camera, &cfg.triangulation).ok()?;
        Some((pf, feature_linearize(state, &pf, &refs, &cfg.camera)))
    }

    fn innovation_chi2(state: &FilterState, h: &DMatrix<f64>, r: &DVector<f64>, var: f64) -> Option<f64> {
        let mut s = h * &state.cov * h.transpose();
        for i in 0..s.nrows() {
            s[(i, i)] += var;
        }
        s.cholesky().map(|c| r.dot(&c.solve(r)))
    }

    fn msckf_update(
        &mut self,
        state: &mut FilterState,
        ids: &[u64],
        cfg: &EstimatorConfig,
        report: &mut FrameReport,
    ) -> Result<()> {
        let var = cfg.sigma_px * cfg.sigma_px;
        let d = state.dim();
        let mut blocks: Vec<(DMatrix<f64>, DVector<f64>)> = Vec::new();
        for id in ids {
            let tr = &self.tracks[id];
            let n_obs = tr.observations.len();
            if n_obs < 2 {
                continue;
            }
            let Some((_, f)) = Self::linearize_track(state, tr, cfg) else {
                report.triangulation_failures += 1;
                continue;
            };
            let Ok(split) = givens_split(&f) else {
                report.triangulation_failures += 1;
                continue;
            };
            let rows = split.r2.len();
            let Some(chi2) = Self::innovation_chi2(state, &split.h_x2, &split.r2, var) else {
                report.gated_out += 1;
                continue;
            };
            if chi2 > Self::gate_threshold(&mut self.chi2, cfg.vision_gate, rows) {
                report.gated_out += 1;
                continue;
            }
            blocks.push((split.h_x2, split.r2));
        }
        if blocks.is_empty() {
            return Ok(());
        }
        let rows: usize = blocks.iter().map(|b| b.1.len()).sum();
        let mut h = DMatrix::zeros(rows, d);
        let mut r = DVector::zeros(rows);
        let mut at = 0;
        for (hb, rb) in &blocks {
            let n = rb.len();
            h.view_mut((at, 0), (n, d)).copy_from(hb);
            r.rows_mut(at, n).copy_from(rb);
            at += n;
        }
        report.used = blocks.len();
        let (h, r) = compress(h, r);
        report.rows = r.len();
        let noise = DMatrix::identity(r.len(), r.len()) * var;
        state.apply_ekf_update(&h, &r, &noise, None)?;
        Ok(())
    }

    fn slam_update(
        &mut self,
        state: &mut FilterState,
        obs: &BTreeMap<u64, Vector2<f64>>,
        cfg: &EstimatorConfig,
        report: &mut FrameReport,
    ) -> Result<()> {
        let var = cfg.sigma_px * cfg.sigma_px;
        let newest = state.clones.len() - 1;
        let d = state.dim();
        let mut blocks = Vec::new();
        for (j, lm) in state.landmarks.iter().enumerate() {
            let Some(uv) = obs.get(&lm.id) else { continue };
            let pc = cfg.camera.to_camera(&state.clones[newest].q, &state.clones[newest].p, &lm.p);
            if pc.z <= cfg.triangulation.min_depth {
                continue;
            }
            let f = feature_linearize(state, &lm.p, &[ObsRef { clone: newest, uv: *uv }], &cfg.camera);
            let mut h = f.h_x;
            h.view_mut((0, state.landmark_offset(j)), (2, 3)).copy_from(&f.h_f);
            let Some(chi2) = Self::innovation_chi2(state, &h, &f.r, var) else { continue };
            if chi2 > Self::gate_threshold(&mut self.chi2, cfg.vision_gate, 2) {
                continue;
            }
            blocks.push((h, f.r));
        }
        if blocks.is_empty() {
            return Ok(());
        }
        let rows = 2 * blocks.len();
        let mut h = DMatrix::zeros(rows, d);
        let mut r = DVector::zeros(rows);
        for (k, (hb, rb)) in blocks.iter().enumerate() {
            h.view_mut((2 * k, 0), (2, d)).copy_from(hb);
            r.rows_mut(2 * k, 2).copy_from(rb);
        }
        report.slam_updates = blocks.len();
        let (h, r) = compress(h, r);
        let noise = DMatrix::identity(r.len(), r.len()) * var;
        state.apply_ekf_update(&h, &r, &noise, None)?;
        Ok(())
    }

    /// Delayed initialization: update with the landmark-free rows, then
    /// augment the state with the landmark from the invertible rows.
    fn promote(&mut self, state: &mut FilterState, tr: &FeatureTrack, cfg: &EstimatorConfig) -> Result<bool> {
        let var = cfg.sigma_px * cfg.sigma_px;
        let Some((_, f)) = Self::linearize_track(state, tr, cfg) else { return Ok(false) };
        let Ok(split) = givens_split(&f) else { return Ok(false) };
        let Some(chi2) = Self::innovation_chi2(state, &split.h_x2, &split.r2, var) else {
            return Ok(false);
        };
        if chi2 > Self::gate_threshold(&mut self.chi2, cfg.vision_gate, split.r2.len()) {
            return Ok(false);
        }
        let noise = DMatrix::identity(split.r2.len(), split.r2.len()) * var;
        state.apply_ekf_update(&split.h_x2, &split.r2, &noise, None)?;

        // Re-linearize at the corrected state for the landmark prior.
        let Some((pf, f)) = Self::linearize_track(state, tr, cfg) else { return Ok(false) };
        let Ok(split) = givens_split(&f) else { return Ok(false) };
        let Some(hf_inv) = split.h_f1.try_inverse() else { return Ok(false) };
        let a = DMatrix::from_column_slice(3, 3, hf_inv.as_slice()) * &split.h_x1;
        let pfx = -(&a * &state.cov);
        let pff_d = &pfx * a.transpose() * -1.0;
        let pff = nalgebra::Matrix3::from_column_slice(pff_d.as_slice())
            + hf_inv * hf_inv.transpose() * var;
        let r1 = Vec3::new(split.r1[0], split.r1[1], split.r1[2]);
        let p = pf + hf_inv * r1;
        state.augment_landmark(Landmark { id: tr.id, p }, &pfx, &pff);
        Ok(true)
    }

    /// RMS pixel reprojection error of the given tracks after re-triangulating
    /// each one against the current clone poses.
    pub fn reprojection_rms(state: &FilterState, tracks: &[FeatureTrack], cfg: &EstimatorConfig) -> Option<f64> {
        let mut sum = 0.0;
        let mut n = 0usize;
        for tr in tracks {
            if let Some((_, f)) = Self::linearize_track(state, tr, cfg) {
                sum += f.r.norm_squared();
                n += f.r.len();
            }
        }
        (n > 0).then(|| (sum / n as f64).sqrt())
    }
}
