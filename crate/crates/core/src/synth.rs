//! Synthetic ground truth: seeded scenes of prior objects moving on simple
//! trajectories, rendered with the fitting renderer, plus corrupted
//! detections.

use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;

#[allow(unused_imports)]
use num_traits::Float;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::geometry::{wrap_angle, Camera, ObjectNode, Pose};
use crate::image::Image;
use crate::prior::{Generator, LatentPair};
use crate::renderer::{RenderSettings, SceneRenderer};
use crate::tracker::{bev_intersection, Box3, Detection};
use crate::Vec3;

pub const MAX_PLACEMENT_ATTEMPTS: usize = 1000;

const DETECTION_STREAM: u64 = 0x0de7_ec71;
const BACKGROUND_STREAM: u64 = 0xb6_9f0d;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CameraSpec {
    pub width: usize,
    pub height: usize,
    pub focal: f64,
    pub mount_height: f64,
}

impl Default for CameraSpec {
    fn default() -> Self {
        Self { width: 320, height: 240, focal: 250.0, mount_height: 1.6 }
    }
}

impl CameraSpec {
    pub fn camera(&self) -> Result<Camera> {
        Camera::forward_facing(self.width, self.height, self.focal, self.mount_height)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrajectoryKind {
    ConstantVelocity,
    ConstantTurn,
    /// Consumes two objects moving laterally in opposite directions; the
    /// second passes behind the first and is fully hidden at the crossing frame.
    CrossingPair,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Background {
    Flat { gray: f64 },
    /// Bilinear value noise per channel: `mean + amplitude · (n − 0.5) · 2`.
    Noise { cell: usize, mean: f64, amplitude: f64 },
}

impl Default for Background {
    fn default() -> Self {
        Background::Noise { cell: 8, mean: 0.45, amplitude: 0.15 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectionNoise {
    /// Per-axis center noise, meters.
    pub sigma_pos: f64,
    pub sigma_yaw: f64,
    /// Additive noise on each dimension, meters.
    pub sigma_dims: f64,
    pub p_drop: f64,
    /// Mean false positives per frame.
    pub fp_rate: f64,
    /// Objects whose visible mask fraction falls below this are not detected.
    pub min_visible: f64,
    /// Confidence ranges of true and false detections.
    pub tp_score: [f64; 2],
    pub fp_score: [f64; 2],
}

impl Default for DetectionNoise {
    fn default() -> Self {
        Self {
            sigma_pos: 0.3,
            sigma_yaw: 0.05,
            sigma_dims: 0.1,
            p_drop: 0.1,
            fp_rate: 0.5,
            min_visible: 0.1,
            tp_score: [0.6, 1.0],
            fp_score: [0.1, 0.6],
        }
    }
}

impl DetectionNoise {
    pub fn none() -> Self {
        Self { sigma_pos: 0.0, sigma_yaw: 0.0, sigma_dims: 0.0, p_drop: 0.0, fp_rate: 0.0, min_visible: 0.0, tp_score: [1.0, 1.0], ..Default::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if [self.sigma_pos, self.sigma_yaw, self.sigma_dims, self.fp_rate].iter().any(|v| !(*v >= 0.0 && v.is_finite())) {
            return Err(invalid("noise sigmas and false-positive rate must be non-negative"));
        }
        if [self.p_drop, self.min_visible].iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(invalid("probabilities must lie in [0, 1]"));
        }
        for r in [self.tp_score, self.fp_score] {
            if !(0.0 <= r[0] && r[0] <= r[1] && r[1] <= 1.0) {
                return Err(invalid("score ranges must satisfy 0 <= lo <= hi <= 1"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CrossingSpec {
    /// Frame at which the rear object is directly behind the front one.
    pub frame: usize,
    /// Extra depth of the rear object's center, meters.
    pub depth_gap: f64,
    /// Signed lateral speeds (m/frame) of the front and rear object; opposite
    /// signs make the pair cross head-on.
    pub speed_front: f64,
    pub speed_rear: f64,
}

impl Default for CrossingSpec {
    fn default() -> Self {
        Self { frame: 20, depth_gap: 2.5, speed_front: 0.25, speed_rear: -0.25 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    pub n_objects: usize,
    pub n_frames: usize,
    pub camera: CameraSpec,
    /// Trajectory kind per object; the last entry repeats.
    pub trajectories: Vec<TrajectoryKind>,
    /// Standard deviation of sampled latents.
    pub latent_sigma: f64,
    pub scale_range: [f64; 2],
    /// Depth band (camera-forward distance) objects stay inside while in view.
    pub depth_range: [f64; 2],
    /// Speed range, meters per frame.
    pub speed_range: [f64; 2],
    /// Largest heading change per frame of constant-turn objects, radians.
    pub max_turn_rate: f64,
    /// Smallest center distance between unpaired objects over the sequence.
    pub min_separation: f64,
    /// Largest fraction of an unpaired object's horizontal view angle that a
    /// nearer unpaired object may cover in any frame.
    pub max_occlusion: f64,
    pub crossing: CrossingSpec,
    pub noise: DetectionNoise,
    pub background: Background,
    pub seed: u64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            n_objects: 5,
            n_frames: 40,
            camera: CameraSpec::default(),
            trajectories: vec![TrajectoryKind::ConstantVelocity],
            latent_sigma: 0.5,
            scale_range: [3.8, 4.8],
            depth_range: [10.0, 30.0],
            speed_range: [0.05, 0.25],
            max_turn_rate: 0.02,
            min_separation: 4.0,
            max_occlusion: 0.5,
            crossing: CrossingSpec::default(),
            noise: DetectionNoise::default(),
            background: Background::default(),
            seed: 0,
        }
    }
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<()> {
        if !(1..=10).contains(&self.n_objects) {
            return Err(invalid("n_objects must be in 1..=10"));
        }
        if self.n_frames == 0 {
            return Err(invalid("n_frames must be positive"));
        }
        self.camera.camera()?;
        self.noise.validate()?;
        let ranges = [self.scale_range, self.depth_range, self.speed_range];
        if ranges.iter().any(|r| !(r[0] >= 0.0 && r[0] <= r[1])) || !(self.scale_range[0] > 0.0) {
            return Err(invalid("ranges must satisfy 0 <= lo <= hi (scale lo > 0)"));
        }
        if !(self.latent_sigma >= 0.0 && self.max_turn_rate >= 0.0 && self.min_separation >= 0.0) {
            return Err(invalid("sigmas, turn rate and separation must be non-negative"));
        }
        if !(0.0..=1.0).contains(&self.max_occlusion) {
            return Err(invalid("max_occlusion must lie in [0, 1]"));
        }
        if let Background::Noise { cell, .. } = self.background {
            if cell == 0 {
                return Err(invalid("background noise cell must be positive"));
            }
        }
        let kinds = self.kinds();
        let mut k = 0;
        while k < kinds.len() {
            if kinds[k] == TrajectoryKind::CrossingPair {
                if k + 1 >= kinds.len() {
                    return Err(invalid("crossing pair needs two objects"));
                }
                if self.crossing.frame >= self.n_frames {
                    return Err(invalid("crossing frame outside the sequence"));
                }
                k += 2;
            } else {
                k += 1;
            }
        }
        Ok(())
    }

    /// Trajectory kind of each object. A crossing pair occupies two slots.
    pub fn kinds(&self) -> Vec<TrajectoryKind> {
        let last = self.trajectories.last().copied().unwrap_or(TrajectoryKind::ConstantVelocity);
        let mut out = Vec::with_capacity(self.n_objects);
        while out.len() < self.n_objects {
            let k = self.trajectories.get(out.len()).copied().unwrap_or(last);
            out.push(k);
            if k == TrajectoryKind::CrossingPair && out.len() < self.n_objects {
                out.push(k);
            }
        }
        out
    }
}

/// A ground-truth object with its per-frame poses.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub id: u64,
    pub latents: LatentPair,
    pub scale: f64,
    /// Box dimensions of the deformed mesh, meters.
    pub w: f64,
    pub h: f64,
    pub l: f64,
    pub trajectory: TrajectoryKind,
    pub poses: Vec<Pose>,
}

impl SceneObject {
    pub fn node(&self, frame: usize) -> ObjectNode {
        ObjectNode { pose: self.poses[frame], scale: self.scale }
    }

    pub fn bbox(&self, frame: usize) -> Box3 {
        let p = &self.poses[frame];
        Box3 { center: p.t, w: self.w, h: self.h, l: self.l, yaw: p.yaw() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub config: ScenarioConfig,
    pub camera: Camera,
    pub objects: Vec<SceneObject>,
}

impl Scene {
    pub fn n_frames(&self) -> usize {
        self.config.n_frames
    }

    /// Objects whose center is inside the camera frustum at `frame`.
    pub fn in_view(&self, frame: usize) -> Vec<usize> {
        (0..self.objects.len()).filter(|&i| self.camera.sees(&self.objects[i].poses[frame].t)).collect()
    }
}

fn uniform(rng: &mut ChaCha8Rng, r: [f64; 2]) -> f64 {
    if r[1] > r[0] { rng.random_range(r[0]..r[1]) } else { r[0] }
}

fn sample_latents(gen: &Generator, sigma: f64, rng: &mut ChaCha8Rng) -> LatentPair {
    let cfg = gen.config();
    let mut draw = |n: usize| -> Vec<f64> {
        (0..n).map(|_| if sigma > 0.0 { Normal::new(0.0, sigma).unwrap().sample(rng) } else { 0.0 }).collect()
    };
    let shape = draw(cfg.shape_dim);
    let texture = draw(cfg.texture_dim);
    LatentPair { shape, texture }
}

/// Box dimensions `(w, h, l)` and the center height that puts the mesh on the ground.
fn mesh_extent(gen: &Generator, lat: &LatentPair, scale: f64) -> (f64, f64, f64, f64) {
    let verts = gen.deform_shape(&lat.shape);
    let mut lo = Vec3::repeat(f64::INFINITY);
    let mut hi = Vec3::repeat(f64::NEG_INFINITY);
    for v in &verts {
        lo = lo.inf(v);
        hi = hi.sup(v);
    }
    let d = (hi - lo) * scale;
    (d.y, d.z, d.x, -lo.z * scale)
}

/// Lateral half-width of the horizontal field of view at depth `x`.
fn half_width(cam: &Camera, x: f64) -> f64 {
    x * (cam.width as f64 / 2.0) / cam.fx
}

fn propagate(t0: Vec3, heading0: f64, speed: f64, turn: f64, n: usize) -> Vec<Pose> {
    let mut out = Vec::with_capacity(n);
    let (mut t, mut h) = (t0, heading0);
    for _ in 0..n {
        out.push(Pose::from_yaw(t, h));
        t += Vec3::new(h.cos(), h.sin(), 0.0) * speed;
        h = wrap_angle(h + turn);
    }
    out
}

struct Candidate {
    latents: LatentPair,
    scale: f64,
    dims: (f64, f64, f64),
    poses: Vec<Pose>,
}

fn sample_body(gen: &Generator, cfg: &ScenarioConfig, rng: &mut ChaCha8Rng) -> (LatentPair, f64, (f64, f64, f64), f64) {
    let latents = sample_latents(gen, cfg.latent_sigma, rng);
    let scale = uniform(rng, cfg.scale_range);
    let (w, h, l, ground) = mesh_extent(gen, &latents, scale);
    (latents, scale, (w, h, l), ground)
}

fn sample_single(gen: &Generator, cfg: &ScenarioConfig, cam: &Camera, kind: TrajectoryKind, rng: &mut ChaCha8Rng) -> Candidate {
    let (latents, scale, dims, ground) = sample_body(gen, cfg, rng);
    let x = uniform(rng, cfg.depth_range);
    let hw = 0.7 * half_width(cam, x);
    let y = rng.random_range(-hw..=hw);
    let heading = rng.random_range(-PI..PI);
    let speed = uniform(rng, cfg.speed_range);
    let turn = match kind {
        TrajectoryKind::ConstantTurn if cfg.max_turn_rate > 0.0 => rng.random_range(-cfg.max_turn_rate..=cfg.max_turn_rate),
        _ => 0.0,
    };
    let poses = propagate(Vec3::new(x, y, ground), heading, speed, turn, cfg.n_frames);
    Candidate { latents, scale, dims, poses }
}

fn sample_pair(gen: &Generator, cfg: &ScenarioConfig, cam: &Camera, rng: &mut ChaCha8Rng) -> [Candidate; 2] {
    let c = cfg.crossing;
    let (la, sa, da, ga) = sample_body(gen, cfg, rng);
    // same body as the front object, its own paint
    let mut lb = la.clone();
    lb.texture = sample_latents(gen, cfg.latent_sigma, rng).texture;
    // distinct appearance: texture embeddings at a non-acute angle
    let dot: f64 = la.texture.iter().zip(&lb.texture).map(|(x, y)| x * y).sum();
    if dot > 0.0 {
        lb.texture.iter_mut().for_each(|v| *v = -*v);
    }
    let hi = (cfg.depth_range[1] - c.depth_gap).max(cfg.depth_range[0]);
    let x = uniform(rng, [cfg.depth_range[0], hi]);
    let y = rng.random_range(-0.2..=0.2) * half_width(cam, x);
    let dir = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
    let k = c.frame as f64;
    let lateral = |x: f64, v: f64, ground: f64| {
        let heading = if v >= 0.0 { dir * PI / 2.0 } else { -dir * PI / 2.0 };
        propagate(Vec3::new(x, y - dir * v * k, ground), heading, v.abs(), 0.0, cfg.n_frames)
    };
    let front = lateral(x, c.speed_front, ga);
    let rear = lateral(x + c.depth_gap, c.speed_rear, ga);
    [
        Candidate { latents: la, scale: sa, dims: da, poses: front },
        Candidate { latents: lb, scale: sa, dims: da, poses: rear },
    ]
}

fn candidate_box(c: &Candidate, frame: usize) -> Box3 {
    let p = &c.poses[frame];
    Box3 { center: p.t, w: c.dims.0, h: c.dims.1, l: c.dims.2, yaw: p.yaw() }
}

/// Horizontal view-angle interval of a box footprint and its center range.
fn bearing_interval(cam: &Camera, b: &Box3) -> (f64, f64, f64) {
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for c in b.footprint() {
        let p = cam.world_to_camera(&Vec3::new(c[0], c[1], b.center.z));
        let a = p.x.atan2(p.z.max(1e-6));
        lo = lo.min(a);
        hi = hi.max(a);
    }
    (lo, hi, cam.world_to_camera(&b.center).norm())
}

/// Fraction of the farther box's view angle covered by the nearer one.
fn occlusion(cam: &Camera, a: &Box3, b: &Box3) -> f64 {
    let (ia, ib) = (bearing_interval(cam, a), bearing_interval(cam, b));
    let far = if ia.2 > ib.2 { ia } else { ib };
    let overlap = (ia.1.min(ib.1) - ia.0.max(ib.0)).max(0.0);
    if far.1 > far.0 { overlap / (far.1 - far.0) } else { 0.0 }
}

fn acceptable(cfg: &ScenarioConfig, cam: &Camera, group: &[Candidate], placed: &[(Candidate, usize)], group_id: usize) -> bool {
    let dmin = cfg.depth_range[0];
    for c in group {
        if !cam.sees(&c.poses[0].t) {
            return false;
        }
        // objects never get closer than the depth band while in view
        if c.poses.iter().any(|p| cam.sees(&p.t) && cam.world_to_camera(&p.t).z < dmin) {
            return false;
        }
        for (o, g) in placed {
            if *g == group_id {
                continue;
            }
            if bev_intersection(&candidate_box(c, 0), &candidate_box(o, 0)) > 0.0 {
                return false;
            }
            let close = c.poses.iter().zip(&o.poses).any(|(a, b)| (a.t - b.t).norm() < cfg.min_separation);
            if close {
                return false;
            }
            let hidden = (0..cfg.n_frames).any(|f| {
                cam.sees(&c.poses[f].t)
                    && cam.sees(&o.poses[f].t)
                    && occlusion(cam, &candidate_box(c, f), &candidate_box(o, f)) > cfg.max_occlusion
            });
            if hidden {
                return false;
            }
        }
    }
    if group.len() == 2 && bev_intersection(&candidate_box(&group[0], 0), &candidate_box(&group[1], 0)) > 0.0 {
        return false;
    }
    true
}

/// Tries for a new group before the whole scene is restarted.
const GROUP_ATTEMPTS: usize = 50;

/// One placement pass; `None` when some group finds no valid slot.
fn place_all(gen: &Generator, cfg: &ScenarioConfig, cam: &Camera, kinds: &[TrajectoryKind], rng: &mut ChaCha8Rng) -> Option<Vec<(Candidate, usize)>> {
    let mut placed: Vec<(Candidate, usize)> = Vec::new();
    let mut k = 0;
    let mut group_id = 0;
    while k < kinds.len() {
        let kind = kinds[k];
        let group = (0..GROUP_ATTEMPTS).find_map(|_| {
            let group: Vec<Candidate> = if kind == TrajectoryKind::CrossingPair {
                sample_pair(gen, cfg, cam, rng).into()
            } else {
                vec![sample_single(gen, cfg, cam, kind, rng)]
            };
            acceptable(cfg, cam, &group, &placed, group_id).then_some(group)
        })?;
        k += group.len();
        placed.extend(group.into_iter().map(|c| (c, group_id)));
        group_id += 1;
    }
    Some(placed)
}

/// Samples objects and trajectories, restarting the scene up to
/// [`MAX_PLACEMENT_ATTEMPTS`] times. Deterministic in `cfg.seed`.
pub fn sample_scene(gen: &Generator, cfg: &ScenarioConfig) -> Result<Scene> {
    cfg.validate()?;
    let cam = cfg.camera.camera()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let kinds = cfg.kinds();
    let placed = (0..MAX_PLACEMENT_ATTEMPTS)
        .find_map(|_| place_all(gen, cfg, &cam, &kinds, &mut rng))
        .ok_or(Error::PlacementFailed(MAX_PLACEMENT_ATTEMPTS))?;
    let objects = placed
        .into_iter()
        .enumerate()
        .map(|(i, (c, _))| SceneObject {
            id: i as u64,
            latents: c.latents,
            scale: c.scale,
            w: c.dims.0,
            h: c.dims.1,
            l: c.dims.2,
            trajectory: kinds[i],
            poses: c.poses,
        })
        .collect();
    Ok(Scene { config: cfg.clone(), camera: cam, objects })
}

// ------------------------------------------------------------ rendering

/// Static background image of a scene.
pub fn background_image(scene: &Scene) -> Image {
    let (w, h) = (scene.camera.width, scene.camera.height);
    match scene.config.background {
        Background::Flat { gray } => Image::filled(w, h, [gray; 3]),
        Background::Noise { cell, mean, amplitude } => {
            let mut rng = ChaCha8Rng::seed_from_u64(scene.config.seed ^ BACKGROUND_STREAM);
            let (gw, gh) = (w / cell + 2, h / cell + 2);
            let lattice: Vec<[f64; 3]> = (0..gw * gh).map(|_| [rng.random(), rng.random(), rng.random()]).collect();
            let mut img = Image::new(w, h);
            for y in 0..h {
                let fy = y as f64 / cell as f64;
                let (y0, ty) = (fy as usize, fy - (fy as usize) as f64);
                for x in 0..w {
                    let fx = x as f64 / cell as f64;
                    let (x0, tx) = (fx as usize, fx - (fx as usize) as f64);
                    let at = |i: usize, j: usize| lattice[j * gw + i];
                    let mut rgb = [0.0; 3];
                    for (c, v) in rgb.iter_mut().enumerate() {
                        let top = at(x0, y0)[c] * (1.0 - tx) + at(x0 + 1, y0)[c] * tx;
                        let bottom = at(x0, y0 + 1)[c] * (1.0 - tx) + at(x0 + 1, y0 + 1)[c] * tx;
                        let n = top * (1.0 - ty) + bottom * ty;
                        *v = mean + amplitude * (n - 0.5) * 2.0;
                    }
                    img.set(x, y, rgb);
                }
            }
            img
        }
    }
}

/// One rendered observation.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderedFrame {
    pub image: Image,
    /// Visible fraction of each scene object's soft mask; 0 when off-screen.
    pub visibility: Vec<f64>,
    /// Soft mask area of each object, pixels.
    pub mask_area: Vec<f64>,
}

/// Renders `frame` with full-frame windows over the scene background.
pub fn render_frame(scene: &Scene, gen: &Generator, settings: &RenderSettings, background: &Image, frame: usize) -> Result<RenderedFrame> {
    let n = scene.objects.len();
    let settings = RenderSettings { patch: None, ..*settings };
    let renderer = SceneRenderer::new(gen, settings)?;
    let cam = &scene.camera;
    let active: Vec<usize> = (0..n).filter(|&i| cam.world_to_camera(&scene.objects[i].poses[frame].t).z > 0.5).collect();
    let mut visibility = vec![0.0; n];
    let mut mask_area = vec![0.0; n];
    if active.is_empty() {
        return Ok(RenderedFrame { image: background.clone(), visibility, mask_area });
    }
    let objects: Vec<(LatentPair, ObjectNode)> =
        active.iter().map(|&i| (scene.objects[i].latents.clone(), scene.objects[i].node(frame))).collect();
    let r = renderer.render_scene(&objects, cam)?;
    let comp = &r.composite;
    let mut image = comp.image.clone();
    for (p, v) in image.data.iter_mut().enumerate() {
        *v += (1.0 - comp.foreground.data[p / 3]) * background.data[p];
    }
    for (k, &i) in active.iter().enumerate() {
        let m = r.renders[k].mask_sum();
        mask_area[i] = m;
        visibility[i] = if m > 0.0 { comp.gamma[k].sum() / m } else { 0.0 };
    }
    Ok(RenderedFrame { image, visibility, mask_area })
}

/// Renders every frame of the scene.
pub fn render_sequence(scene: &Scene, gen: &Generator, settings: &RenderSettings) -> Result<Vec<RenderedFrame>> {
    let bg = background_image(scene);
    (0..scene.n_frames()).map(|f| render_frame(scene, gen, settings, &bg, f)).collect()
}

// ----------------------------------------------------------- detections

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameDetections {
    pub frame: usize,
    pub detections: Vec<Detection>,
}

/// Ground-truth boxes of the objects in view at `frame`, with their ids.
pub fn ground_truth_boxes(scene: &Scene, frame: usize) -> Vec<(u64, Box3)> {
    scene.in_view(frame).into_iter().map(|i| (scene.objects[i].id, scene.objects[i].bbox(frame))).collect()
}

/// Per frame: each object in view is dropped with `p_drop` (always when its
/// visible fraction is below `min_visible`), survivors get Gaussian noise on
/// center, yaw and dimensions; Poisson false positives are added uniformly
/// inside the frustum depth band. `visibility[frame][object]` comes from
/// [`render_sequence`]; without it every object counts as visible.
pub fn corrupt_detections(scene: &Scene, noise: &DetectionNoise, visibility: Option<&[Vec<f64>]>) -> Result<Vec<FrameDetections>> {
    noise.validate()?;
    if let Some(v) = visibility {
        if v.len() != scene.n_frames() {
            return Err(Error::DimensionMismatch { expected: scene.n_frames(), got: v.len() });
        }
    }
    let cfg = &scene.config;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ DETECTION_STREAM);
    let gauss = |rng: &mut ChaCha8Rng, s: f64| if s > 0.0 { Normal::new(0.0, s).unwrap().sample(rng) } else { 0.0 };
    let mut out = Vec::with_capacity(scene.n_frames());
    for frame in 0..scene.n_frames() {
        let mut dets = Vec::new();
        for i in scene.in_view(frame) {
            let o = &scene.objects[i];
            // draw everything first so the stream does not depend on the outcome
            let drop = rng.random::<f64>() < noise.p_drop;
            let dt = Vec3::new(gauss(&mut rng, noise.sigma_pos), gauss(&mut rng, noise.sigma_pos), gauss(&mut rng, noise.sigma_pos));
            let dyaw = gauss(&mut rng, noise.sigma_yaw);
            let dd = [gauss(&mut rng, noise.sigma_dims), gauss(&mut rng, noise.sigma_dims), gauss(&mut rng, noise.sigma_dims)];
            let score = uniform(&mut rng, noise.tp_score);
            let visible = visibility.map_or(1.0, |v| v[frame].get(i).copied().unwrap_or(0.0));
            if drop || visible < noise.min_visible {
                continue;
            }
            let b = o.bbox(frame);
            let floor = 0.1;
            dets.push(Detection {
                bbox: Box3 {
                    center: b.center + dt,
                    w: (b.w + dd[0]).max(floor),
                    h: (b.h + dd[1]).max(floor),
                    l: (b.l + dd[2]).max(floor),
                    yaw: wrap_angle(b.yaw + dyaw),
                },
                score,
            });
        }
        let n_fp = if noise.fp_rate > 0.0 { Poisson::new(noise.fp_rate).unwrap().sample(&mut rng) as usize } else { 0 };
        for _ in 0..n_fp {
            let s = uniform(&mut rng, cfg.scale_range);
            let x = uniform(&mut rng, cfg.depth_range);
            let hw = half_width(&scene.camera, x);
            let y = rng.random_range(-hw..=hw);
            let yaw = rng.random_range(-PI..PI);
            let score = uniform(&mut rng, noise.fp_score);
            let (l, w, h) = (s, 0.42 * s, 0.36 * s);
            dets.push(Detection { bbox: Box3 { center: Vec3::new(x, y, h / 2.0), w, h, l, yaw }, score });
        }
        out.push(FrameDetections { frame, detections: dets });
    }
    Ok(out)
}
