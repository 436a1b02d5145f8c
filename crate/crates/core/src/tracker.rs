//! Frame-to-frame association: constant-velocity Kalman filter over an
//! 11-dimensional box state, weighted IoU/latent/distance affinity, optimal
//! assignment and track lifecycle.

use alloc::vec;
use alloc::vec::Vec;

use nalgebra::{SMatrix, SVector};
#[allow(unused_imports)]
use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::fitting::{fit_frame, FitConfig, FitResult, LossBreakdown};
use crate::geometry::{wrap_angle, Camera, ObjectNode, Pose};
use crate::image::Image;
use crate::prior::LatentPair;
use crate::renderer::SceneRenderer;
use crate::Vec3;

pub const STATE_DIM: usize = 11;
pub const OBS_DIM: usize = 8;

pub type StateVec = SVector<f64, STATE_DIM>;
pub type StateMat = SMatrix<f64, STATE_DIM, STATE_DIM>;
pub type ObsVec = SVector<f64, OBS_DIM>;
pub type ObsMat = SMatrix<f64, OBS_DIM, OBS_DIM>;
pub type ObsMap = SMatrix<f64, OBS_DIM, STATE_DIM>;

/// Index of yaw in the state and observation vectors.
const YAW: usize = 4;

/// Oriented 3D box: `center` is the box center, `l` runs along the heading,
/// `w` across it and `h` vertically.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Box3 {
    pub center: Vec3,
    pub w: f64,
    pub h: f64,
    pub l: f64,
    pub yaw: f64,
}

impl Box3 {
    pub fn validate(&self) -> Result<()> {
        if !(self.w > 0.0 && self.h > 0.0 && self.l > 0.0) {
            return Err(invalid("box dimensions must be positive"));
        }
        if !self.center.iter().all(|v| v.is_finite()) || !self.yaw.is_finite() {
            return Err(invalid("box pose must be finite"));
        }
        Ok(())
    }

    /// Ground-plane footprint corners, counter-clockwise.
    pub fn footprint(&self) -> [[f64; 2]; 4] {
        let (s, c) = self.yaw.sin_cos();
        let (hl, hw) = (self.l / 2.0, self.w / 2.0);
        let mut out = [[0.0; 2]; 4];
        for (k, (a, b)) in [(hl, -hw), (hl, hw), (-hl, hw), (-hl, -hw)].into_iter().enumerate() {
            out[k] = [self.center.x + c * a - s * b, self.center.y + s * a + c * b];
        }
        out
    }

    pub fn volume(&self) -> f64 {
        self.w * self.h * self.l
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: Box3,
    pub score: f64,
}

/// Filter input for one detection, after fitting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub t: Vec3,
    pub scale: f64,
    pub yaw: f64,
    pub w: f64,
    pub h: f64,
    pub l: f64,
    pub latents: LatentPair,
    pub loss: LossBreakdown,
    /// Detection confidence.
    pub score: f64,
}

impl Observation {
    pub fn vector(&self) -> ObsVec {
        ObsVec::from_column_slice(&[self.t.x, self.t.y, self.t.z, self.scale, self.yaw, self.w, self.h, self.l])
    }

    pub fn bbox(&self) -> Box3 {
        Box3 { center: self.t, w: self.w, h: self.h, l: self.l, yaw: self.yaw }
    }
}

/// Observation from a detection and, when available, its fit. Location,
/// heading and scale come from the fit; dimensions from the detection.
/// Without a fit the scale is the largest box dimension.
pub fn make_observation(det: &Detection, fit: Option<&FitResult>, template: &LatentPair) -> Result<Observation> {
    det.bbox.validate()?;
    let b = &det.bbox;
    let obs = match fit {
        Some(f) => Observation {
            t: f.node.pose.t,
            scale: f.node.scale,
            yaw: f.node.pose.yaw(),
            w: b.w,
            h: b.h,
            l: b.l,
            latents: f.latents.clone(),
            loss: f.loss,
            score: det.score,
        },
        None => Observation {
            t: b.center,
            scale: initial_scale(b),
            yaw: wrap_angle(b.yaw),
            w: b.w,
            h: b.h,
            l: b.l,
            latents: template.clone(),
            loss: LossBreakdown::default(),
            score: det.score,
        },
    };
    if !(obs.scale > 0.0) {
        return Err(invalid("observation scale must be positive"));
    }
    Ok(obs)
}

/// `max(w, h, l)`.
pub fn initial_scale(b: &Box3) -> f64 {
    b.w.max(b.h).max(b.l)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrackStatus {
    Tracked,
    Lost,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrackState {
    /// `[x, y, z, s, ψ, w, h, l, x′, y′, z′]`
    pub x: StateVec,
    pub p: StateMat,
    pub z_ema: LatentPair,
    pub id: u64,
    pub status: TrackStatus,
    pub lost_count: u32,
    /// Observed time steps.
    pub age: u32,
    /// Consecutive matched frames, reset on a miss.
    pub streak: u32,
    /// Set once `streak` reaches `min_hits`; only confirmed tracks are reported.
    pub confirmed: bool,
    /// Sum and count of per-frame scores (spawn confidence, match
    /// affinities, 0 while lost).
    pub score_sum: f64,
    pub score_count: u32,
}

impl TrackState {
    pub fn center(&self) -> Vec3 {
        Vec3::new(self.x[0], self.x[1], self.x[2])
    }

    /// Mean per-frame score over the track's life.
    pub fn confidence(&self) -> f64 {
        if self.score_count == 0 { 0.0 } else { self.score_sum / self.score_count as f64 }
    }

    fn push_score(&mut self, v: f64) {
        self.score_sum += v;
        self.score_count += 1;
    }

    pub fn velocity(&self) -> Vec3 {
        Vec3::new(self.x[8], self.x[9], self.x[10])
    }

    pub fn bbox(&self) -> Box3 {
        Box3 { center: self.center(), w: self.x[5], h: self.x[6], l: self.x[7], yaw: self.x[YAW] }
    }
}

/// Embeddings compared by the latent affinity term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LatentParts {
    Both,
    Texture,
    Shape,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AffinityConfig {
    pub w_iou: f64,
    pub w_z: f64,
    pub w_c: f64,
    /// Meters; farther pairs are never matched.
    pub gate_distance: f64,
    pub min_affinity: f64,
    /// Lost frames tolerated before deletion.
    pub n_life: u32,
    pub latent_parts: LatentParts,
}

impl Default for AffinityConfig {
    fn default() -> Self {
        Self { w_iou: 0.5, w_z: 0.25, w_c: 0.25, gate_distance: 5.0, min_affinity: 0.2, n_life: 3, latent_parts: LatentParts::Texture }
    }
}

impl AffinityConfig {
    pub fn validate(&self) -> Result<()> {
        let w = [self.w_iou, self.w_z, self.w_c];
        if w.iter().any(|v| !(*v >= 0.0)) || !(w.iter().sum::<f64>() > 0.0) {
            return Err(invalid("affinity weights must be non-negative with a positive sum"));
        }
        if !(self.gate_distance > 0.0) {
            return Err(invalid("gate distance must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrackerConfig {
    pub affinity: AffinityConfig,
    /// Process noise diagonal.
    pub q: [f64; STATE_DIM],
    /// Observation noise diagonal over `[x, y, z, s, ψ, w, h, l]`.
    pub r: [f64; OBS_DIM],
    /// Initial covariance diagonal of a new track.
    pub p0: [f64; STATE_DIM],
    /// Observed steps before a track is reported.
    pub min_hits: u32,
    /// Correct `(w, h, l)` from detections; otherwise they keep their
    /// initial values.
    pub observe_dims: bool,
    /// Associate confirmed tracks before unconfirmed ones.
    pub confirmed_first: bool,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        let yaw_sd = 5.0f64.to_radians();
        Self {
            affinity: AffinityConfig::default(),
            q: [0.01; STATE_DIM],
            r: [0.25, 0.25, 0.25, 0.04, yaw_sd * yaw_sd, 0.1, 0.1, 0.1],
            p0: [0.25, 0.25, 0.25, 0.04, 0.01, 0.1, 0.1, 0.1, 0.1, 0.1, 0.1],
            min_hits: 2,
            observe_dims: true,
            confirmed_first: true,
        }
    }
}

impl TrackerConfig {
    pub fn validate(&self) -> Result<()> {
        self.affinity.validate()?;
        if self.q.iter().chain(&self.p0).any(|v| !(*v >= 0.0)) || self.r.iter().any(|v| !(*v > 0.0)) {
            return Err(invalid("noise variances must be non-negative (R positive)"));
        }
        Ok(())
    }

    pub fn q_matrix(&self) -> StateMat {
        StateMat::from_diagonal(&StateVec::from_column_slice(&self.q))
    }

    pub fn r_matrix(&self) -> ObsMat {
        ObsMat::from_diagonal(&ObsVec::from_column_slice(&self.r))
    }
}

/// Constant-velocity transition: positions advance by one frame of velocity.
pub fn transition() -> StateMat {
    let mut a = StateMat::identity();
    for k in 0..3 {
        a[(k, 8 + k)] = 1.0;
    }
    a
}

/// Selects `[x, y, z, s, ψ, w, h, l]`.
pub fn observation_map() -> ObsMap {
    let mut h = ObsMap::zeros();
    for k in 0..OBS_DIM {
        h[(k, k)] = 1.0;
    }
    h
}

/// Like [`observation_map`] with the dimension rows zeroed, so the filter
/// never corrects `(w, h, l)`.
pub fn observation_map_without_dims() -> ObsMap {
    let mut h = observation_map();
    for k in 5..OBS_DIM {
        h[(k, k)] = 0.0;
    }
    h
}

fn symmetrize(p: &mut StateMat) {
    *p = (*p + p.transpose()) * 0.5;
}

pub fn predict(track: &TrackState, a: &StateMat, q: &StateMat) -> TrackState {
    let mut out = track.clone();
    out.x = a * track.x;
    out.x[YAW] = wrap_angle(out.x[YAW]);
    out.p = a * track.p * a.transpose() + q;
    symmetrize(&mut out.p);
    out
}

/// Kalman correction with the yaw innovation wrapped to (−π, π].
pub fn kalman_update(track: &TrackState, y: &ObsVec, h: &ObsMap, r: &ObsMat) -> Result<TrackState> {
    let mut innov = y - h * track.x;
    innov[YAW] = wrap_angle(innov[YAW]);
    let s = h * track.p * h.transpose() + r;
    let s_inv = s.try_inverse().ok_or(Error::SingularInnovation)?;
    if !s_inv.iter().all(|v| v.is_finite()) {
        return Err(Error::SingularInnovation);
    }
    let k = track.p * h.transpose() * s_inv;
    let mut out = track.clone();
    out.x = track.x + k * innov;
    out.x[YAW] = wrap_angle(out.x[YAW]);
    out.p = track.p - k * h * track.p;
    symmetrize(&mut out.p);
    Ok(out)
}

/// `β z_new + (1 − β) z_ema` with `β = 2/(T − 1)` clamped to (0, 1].
pub fn ema_update(z_ema: &LatentPair, z_new: &LatentPair, age: u32) -> Result<LatentPair> {
    if age == 0 {
        return Err(invalid("age must be at least 1"));
    }
    if z_ema.shape.len() != z_new.shape.len() || z_ema.texture.len() != z_new.texture.len() {
        return Err(invalid("latent dimensions differ"));
    }
    let beta = if age <= 3 { 1.0 } else { 2.0 / (age as f64 - 1.0) };
    let mix = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(e, n)| beta * n + (1.0 - beta) * e).collect();
    Ok(LatentPair { shape: mix(&z_ema.shape, &z_new.shape), texture: mix(&z_ema.texture, &z_new.texture) })
}

// ------------------------------------------------------------------ IoU

fn cross(o: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])
}

/// Sutherland–Hodgman clip of `subject` by the convex counter-clockwise
/// polygon `clip`.
fn clip_polygon(subject: &[[f64; 2]], clip: &[[f64; 2]]) -> Vec<[f64; 2]> {
    let mut out: Vec<[f64; 2]> = subject.to_vec();
    for i in 0..clip.len() {
        if out.is_empty() {
            break;
        }
        let (a, b) = (clip[i], clip[(i + 1) % clip.len()]);
        let input = core::mem::take(&mut out);
        for j in 0..input.len() {
            let (p, q) = (input[j], input[(j + 1) % input.len()]);
            let (dp, dq) = (cross(a, b, p), cross(a, b, q));
            if dp >= 0.0 {
                out.push(p);
            }
            if (dp >= 0.0) != (dq >= 0.0) {
                let t = dp / (dp - dq);
                out.push([p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1])]);
            }
        }
    }
    out
}

fn polygon_area(p: &[[f64; 2]]) -> f64 {
    let mut a = 0.0;
    for i in 0..p.len() {
        let (u, v) = (p[i], p[(i + 1) % p.len()]);
        a += u[0] * v[1] - v[0] * u[1];
    }
    (a / 2.0).abs()
}

/// Ground-plane intersection area of the two footprints.
pub fn bev_intersection(a: &Box3, b: &Box3) -> f64 {
    let d = (a.center - b.center).xy().norm();
    if d > 0.5 * (a.l.hypot(a.w) + b.l.hypot(b.w)) {
        return 0.0;
    }
    let poly = clip_polygon(&a.footprint(), &b.footprint());
    if poly.len() < 3 { 0.0 } else { polygon_area(&poly) }
}

/// Volumetric IoU of two yaw-rotated boxes.
pub fn iou3d(a: &Box3, b: &Box3) -> f64 {
    let area = bev_intersection(a, b);
    if area <= 0.0 {
        return 0.0;
    }
    let top = (a.center.z + a.h / 2.0).min(b.center.z + b.h / 2.0);
    let bottom = (a.center.z - a.h / 2.0).max(b.center.z - b.h / 2.0);
    let inter = area * (top - bottom).max(0.0);
    let union = a.volume() + b.volume() - inter;
    if union <= 0.0 { 0.0 } else { (inter / union).clamp(0.0, 1.0) }
}

// ------------------------------------------------------------- affinity

fn parts(z: &LatentPair, which: LatentParts) -> impl Iterator<Item = f64> + '_ {
    let (s, t): (&[f64], &[f64]) = match which {
        LatentParts::Both => (&z.shape, &z.texture),
        LatentParts::Texture => (&[], &z.texture),
        LatentParts::Shape => (&z.shape, &[]),
    };
    s.iter().chain(t).copied()
}

/// Cosine similarity of the selected embeddings (concatenated for
/// [`LatentParts::Both`]); 0 when either is zero.
pub fn latent_cosine(a: &LatentPair, b: &LatentPair, which: LatentParts) -> f64 {
    let dot: f64 = parts(a, which).zip(parts(b, which)).map(|(x, y)| x * y).sum();
    let na = parts(a, which).map(|x| x * x).sum::<f64>().sqrt();
    let nb = parts(b, which).map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 { 0.0 } else { (dot / (na * nb)).clamp(-1.0, 1.0) }
}

/// Affinity of a (predicted) track to an observation; `-∞` beyond the gate.
/// Negative latent similarity contributes nothing.
pub fn affinity(track: &TrackState, obs: &Observation, cfg: &AffinityConfig) -> f64 {
    let d = (track.center() - obs.t).norm();
    if !(d <= cfg.gate_distance) {
        return f64::NEG_INFINITY;
    }
    let mut a = cfg.w_c * (-d / cfg.gate_distance).exp();
    if cfg.w_iou != 0.0 {
        a += cfg.w_iou * iou3d(&track.bbox(), &obs.bbox());
    }
    if cfg.w_z != 0.0 {
        a += cfg.w_z * latent_cosine(&track.z_ema, &obs.latents, cfg.latent_parts).max(0.0);
    }
    a
}

/// Rows are tracks, columns observations, row-major.
pub fn affinity_matrix(tracks: &[TrackState], observations: &[Observation], cfg: &AffinityConfig) -> Vec<Vec<f64>> {
    tracks.iter().map(|t| observations.iter().map(|o| affinity(t, o, cfg)).collect()).collect()
}

// ----------------------------------------------------------- assignment

/// Maximum-score assignment of rows to columns. `-∞` entries are never
/// returned; every other row/column pair participates in the optimum over
/// complete assignments of the smaller side.
pub fn hungarian_assign(score: &[Vec<f64>]) -> Vec<(usize, usize)> {
    let n = score.len();
    let m = score.first().map_or(0, |r| r.len());
    if n == 0 || m == 0 {
        return Vec::new();
    }
    let finite_max = score.iter().flatten().filter(|v| v.is_finite()).fold(0.0f64, |a, v| a.max(v.abs()));
    let forbidden = 1e6 * (1.0 + finite_max) * (n.max(m) as f64);
    let transpose = n > m;
    let (rows, cols) = if transpose { (m, n) } else { (n, m) };
    let cost = |i: usize, j: usize| -> f64 {
        let v = if transpose { score[j][i] } else { score[i][j] };
        if v.is_finite() { -v } else { forbidden }
    };

    // shortest augmenting paths with potentials, 1-based with a virtual column 0
    let mut u = vec![0.0; rows + 1];
    let mut v = vec![0.0; cols + 1];
    let mut owner = vec![0usize; cols + 1];
    let mut way = vec![0usize; cols + 1];
    for i in 1..=rows {
        owner[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; cols + 1];
        let mut used = vec![false; cols + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=cols {
                if !used[j] {
                    let cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=cols {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut out = Vec::with_capacity(rows);
    for j in 1..=cols {
        if owner[j] != 0 {
            let (r, c) = if transpose { (j - 1, owner[j] - 1) } else { (owner[j] - 1, j - 1) };
            if score[r][c].is_finite() {
                out.push((r, c));
            }
        }
    }
    out.sort_unstable();
    out
}

/// Best partial matching: maximizes `Σ (score − min_score)` over pairs with
/// `score >= min_score`, any row or column may stay unmatched. Solved as a
/// complete assignment against one zero-score slack column per row.
pub fn assign_with_threshold(score: &[Vec<f64>], min_score: f64) -> Vec<(usize, usize)> {
    let n = score.len();
    let m = score.first().map_or(0, |r| r.len());
    if n == 0 || m == 0 {
        return Vec::new();
    }
    let padded: Vec<Vec<f64>> = score
        .iter()
        .map(|row| {
            let mut r: Vec<f64> = row.iter().map(|&v| if v >= min_score { v - min_score } else { f64::NEG_INFINITY }).collect();
            r.extend(core::iter::repeat_n(0.0, n));
            r
        })
        .collect();
    hungarian_assign(&padded).into_iter().filter(|&(_, j)| j < m).collect()
}

// ------------------------------------------------------------ lifecycle

/// One emitted track in one frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackRecord {
    pub frame: usize,
    pub id: u64,
    pub center: Vec3,
    pub yaw: f64,
    pub scale: f64,
    pub w: f64,
    pub h: f64,
    pub l: f64,
    pub velocity: Vec3,
    pub latents: LatentPair,
    pub status: TrackStatus,
    /// Match affinity this frame; 0 while coasting, detection score for a
    /// new track.
    pub score: f64,
    /// Mean of `score` over the track's life.
    pub confidence: f64,
}

#[derive(Debug, Clone)]
pub struct Tracker {
    pub cfg: TrackerConfig,
    pub tracks: Vec<TrackState>,
    next_id: u64,
    frame: usize,
    a: StateMat,
    q: StateMat,
    h: ObsMap,
    r: ObsMat,
    scores: Vec<f64>,
}

impl Tracker {
    pub fn new(cfg: TrackerConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            a: transition(),
            q: cfg.q_matrix(),
            h: if cfg.observe_dims { observation_map() } else { observation_map_without_dims() },
            r: cfg.r_matrix(),
            cfg,
            tracks: Vec::new(),
            next_id: 0,
            frame: 0,
            scores: Vec::new(),
        })
    }

    pub fn frame(&self) -> usize {
        self.frame
    }

    /// Predicted states of the current tracks for the next frame.
    pub fn predicted(&self) -> Vec<TrackState> {
        self.tracks.iter().map(|t| predict(t, &self.a, &self.q)).collect()
    }

    fn spawn(&mut self, obs: &Observation) -> TrackState {
        let mut x = StateVec::zeros();
        x.fixed_rows_mut::<OBS_DIM>(0).copy_from(&obs.vector());
        x[YAW] = wrap_angle(x[YAW]);
        let id = self.next_id;
        self.next_id += 1;
        TrackState {
            x,
            p: StateMat::from_diagonal(&StateVec::from_column_slice(&self.cfg.p0)),
            z_ema: obs.latents.clone(),
            id,
            status: TrackStatus::Tracked,
            lost_count: 0,
            age: 1,
            streak: 1,
            confirmed: self.cfg.min_hits <= 1,
            score_sum: obs.score,
            score_count: 1,
        }
    }

    fn associate(&self, tracks: &[TrackState], aff: &[Vec<f64>]) -> Vec<(usize, usize)> {
        let min = self.cfg.affinity.min_affinity;
        if !self.cfg.confirmed_first {
            return assign_with_threshold(aff, min);
        }
        let m = aff.first().map_or(0, |r| r.len());
        let mut matches = Vec::new();
        let mut taken = vec![false; m];
        for tier in [true, false] {
            let rows: Vec<usize> = (0..tracks.len()).filter(|&i| tracks[i].confirmed == tier).collect();
            let cols: Vec<usize> = (0..m).filter(|&j| !taken[j]).collect();
            let sub: Vec<Vec<f64>> = rows.iter().map(|&i| cols.iter().map(|&j| aff[i][j]).collect()).collect();
            for (a, b) in assign_with_threshold(&sub, min) {
                taken[cols[b]] = true;
                matches.push((rows[a], cols[b]));
            }
        }
        matches
    }

    /// Advances one frame: predict, associate, update, spawn and retire.
    /// Returns the records reported for this frame.
    pub fn step(&mut self, observations: &[Observation], cam: &Camera) -> Result<Vec<TrackRecord>> {
        let predicted = self.predicted();
        let aff = affinity_matrix(&predicted, observations, &self.cfg.affinity);
        let matches = self.associate(&predicted, &aff);

        let mut obs_used = vec![false; observations.len()];
        let mut next = Vec::with_capacity(predicted.len() + observations.len());
        let mut scores = Vec::with_capacity(next.capacity());
        let mut matched_track = vec![None; predicted.len()];
        for &(i, j) in &matches {
            matched_track[i] = Some(j);
            obs_used[j] = true;
        }
        for (i, pred) in predicted.into_iter().enumerate() {
            match matched_track[i] {
                Some(j) => {
                    let obs = &observations[j];
                    let mut t = kalman_update(&pred, &obs.vector(), &self.h, &self.r)?;
                    t.age += 1;
                    t.z_ema = ema_update(&pred.z_ema, &obs.latents, t.age)?;
                    t.status = TrackStatus::Tracked;
                    t.lost_count = 0;
                    t.streak += 1;
                    t.confirmed |= t.streak >= self.cfg.min_hits;
                    t.push_score(aff[i][j]);
                    scores.push(aff[i][j]);
                    next.push(t);
                }
                None => {
                    let mut t = pred;
                    t.status = TrackStatus::Lost;
                    t.lost_count += 1;
                    t.streak = 0;
                    if t.lost_count > self.cfg.affinity.n_life || !cam.sees(&t.center()) {
                        continue;
                    }
                    t.push_score(0.0);
                    scores.push(0.0);
                    next.push(t);
                }
            }
        }
        for (j, obs) in observations.iter().enumerate() {
            if !obs_used[j] {
                let t = self.spawn(obs);
                scores.push(obs.score);
                next.push(t);
            }
        }
        self.tracks = next;
        self.scores = scores;
        let records = self.records();
        self.frame += 1;
        Ok(records)
    }

    /// Confirmed tracks (or any track during the first `min_hits` frames),
    /// including coasting ones.
    fn records(&self) -> Vec<TrackRecord> {
        let early = self.frame < self.cfg.min_hits as usize;
        self.tracks
            .iter()
            .zip(&self.scores)
            .filter(|(t, _)| early || t.confirmed)
            .map(|(t, &score)| TrackRecord {
                frame: self.frame,
                id: t.id,
                center: t.center(),
                yaw: t.x[YAW],
                scale: t.x[3],
                w: t.x[5],
                h: t.x[6],
                l: t.x[7],
                velocity: t.velocity(),
                latents: t.z_ema.clone(),
                status: t.status,
                score,
                confidence: t.confidence(),
            })
            .collect()
    }
}

/// Functional form of [`Tracker::step`].
pub fn step_tracker(tracker: &mut Tracker, observations: &[Observation], cam: &Camera) -> Result<Vec<TrackRecord>> {
    tracker.step(observations, cam)
}

/// Fitting initialization for a detection: box pose, largest dimension as
/// scale and the given latents.
pub fn detection_init(det: &Detection, latents: &LatentPair) -> Result<(LatentPair, ObjectNode)> {
    det.bbox.validate()?;
    let node = ObjectNode::new(Pose::from_yaw(det.bbox.center, det.bbox.yaw), initial_scale(&det.bbox))?;
    Ok((latents.clone(), node))
}

/// One frame of the full pipeline: fit all detections jointly against the
/// image from template latents, turn the fits into observations and advance
/// the tracker.
pub fn track_frame(
    renderer: &SceneRenderer<'_>,
    tracker: &mut Tracker,
    image: &Image,
    detections: &[Detection],
    cam: &Camera,
    fit_cfg: &FitConfig,
) -> Result<(Vec<TrackRecord>, Vec<FitResult>)> {
    let template = LatentPair::zeros(renderer.generator.config());
    if detections.is_empty() {
        return Ok((tracker.step(&[], cam)?, Vec::new()));
    }
    let init: Vec<(LatentPair, ObjectNode)> = detections.iter().map(|d| detection_init(d, &template)).collect::<Result<_>>()?;
    let fits = fit_frame(renderer, image, &init, cam, fit_cfg)?.results;
    let obs: Vec<Observation> =
        detections.iter().zip(&fits).map(|(d, f)| make_observation(d, Some(f), &template)).collect::<Result<_>>()?;
    Ok((tracker.step(&obs, cam)?, fits))
}
