//! Test-time inverse rendering: image losses, Adam, latent shrinkage and the
//! color → shape → shape+pose schedule that refines every object of a frame
//! jointly.

use alloc::vec;
use alloc::vec::Vec;

#[allow(unused_imports)]
use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::geometry::{Camera, ObjectNode};
use crate::image::Image;
use crate::prior::LatentPair;
use crate::renderer::{CompositeOut, ObjectGrad, RenderSettings, SceneRender, SceneRenderer, Window};

/// Which perceptual features drive a step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    /// Finest-level block colors only.
    Texture,
    /// All pyramid levels, colors and luminance gradients.
    Joint,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regularization {
    /// `z ← α z + (1 − α) z_avg` after each step.
    Shrink,
    /// Quadratic penalty `½ (1−α)/α ‖z − z_avg‖²` added to the loss.
    Penalty,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LearningRates {
    pub texture: f64,
    pub shape: f64,
    pub translation: f64,
    pub rotation: f64,
    pub log_scale: f64,
}

impl Default for LearningRates {
    fn default() -> Self {
        Self { texture: 0.05, shape: 0.05, translation: 0.1, rotation: 0.05, log_scale: 0.02 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitConfig {
    /// Perceptual weight λ.
    pub lambda: f64,
    pub alpha_texture: f64,
    pub alpha_shape: f64,
    pub steps_color: usize,
    pub steps_shape: usize,
    /// Trailing shape steps that also move translation and rotation.
    pub steps_pose_tail: usize,
    pub lr: LearningRates,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Sharpness multiplier applied per schedule phase.
    pub sharpness_anneal: f64,
    pub regularization: Regularization,
    pub use_rgb: bool,
    pub use_perceptual: bool,
    pub use_embed: bool,
    /// `false` optimizes every parameter group on every step.
    pub schedule: bool,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            lambda: 10.0,
            alpha_texture: 0.7,
            alpha_shape: 0.7,
            steps_color: 2,
            steps_shape: 3,
            steps_pose_tail: 2,
            lr: LearningRates::default(),
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            sharpness_anneal: 1.0,
            regularization: Regularization::Shrink,
            use_rgb: true,
            use_perceptual: true,
            use_embed: true,
            schedule: true,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        let lr = &self.lr;
        if [lr.texture, lr.shape, lr.translation, lr.rotation, lr.log_scale].iter().any(|r| !(*r > 0.0)) {
            return Err(invalid("learning rates must be positive"));
        }
        for a in [self.alpha_texture, self.alpha_shape] {
            if !(a > 0.0 && a <= 1.0) {
                return Err(invalid("shrinkage factors must lie in (0, 1]"));
            }
        }
        if self.steps_pose_tail > self.steps_shape {
            return Err(invalid("steps_pose_tail cannot exceed steps_shape"));
        }
        if !(self.beta1 >= 0.0 && self.beta1 < 1.0 && self.beta2 >= 0.0 && self.beta2 < 1.0 && self.epsilon > 0.0) {
            return Err(invalid("invalid Adam hyper-parameters"));
        }
        if !(self.lambda >= 0.0) || !(self.sharpness_anneal > 0.0) {
            return Err(invalid("lambda must be non-negative and anneal positive"));
        }
        Ok(())
    }

    pub fn total_steps(&self) -> usize {
        self.steps_color + self.steps_shape
    }

    /// Active parameter groups, perceptual phase and sharpness multiplier
    /// for 0-based step `k`.
    pub fn plan(&self, k: usize) -> StepPlan {
        let phase_index = if k < self.steps_color {
            0
        } else if k < self.total_steps() - self.steps_pose_tail {
            1
        } else {
            2
        };
        let sharpness = self.sharpness_anneal.powi(phase_index);
        if !self.schedule {
            return StepPlan { groups: Groups::ALL, phase: Phase::Joint, sharpness };
        }
        let groups = match phase_index {
            0 => Groups { texture: true, ..Groups::NONE },
            1 => Groups { shape: true, log_scale: true, ..Groups::NONE },
            _ => Groups { shape: true, log_scale: true, translation: true, rotation: true, ..Groups::NONE },
        };
        let phase = if phase_index == 0 { Phase::Texture } else { Phase::Joint };
        StepPlan { groups, phase, sharpness }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Groups {
    pub texture: bool,
    pub shape: bool,
    pub translation: bool,
    pub rotation: bool,
    pub log_scale: bool,
}

impl Groups {
    pub const NONE: Groups = Groups { texture: false, shape: false, translation: false, rotation: false, log_scale: false };
    pub const ALL: Groups = Groups { texture: true, shape: true, translation: true, rotation: true, log_scale: true };
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepPlan {
    pub groups: Groups,
    pub phase: Phase,
    /// Multiplier on the renderer's base sharpness.
    pub sharpness: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub rgb: f64,
    pub perceptual: f64,
    pub embed: f64,
    pub total: f64,
}

// ---------------------------------------------------------------- RGB loss

/// Squared masked error per foreground pixel:
/// `Σ ‖(I − Î) ∘ M̂‖² / Σ M̂`, 0 on an empty foreground.
pub fn masked_rgb_loss(observed: &Image, rendered: &CompositeOut) -> Result<f64> {
    Ok(masked_rgb_loss_grad(observed, rendered, false)?.0)
}

/// Loss plus gradients w.r.t. `Î` (interleaved) and `M̂`.
pub fn masked_rgb_loss_grad(observed: &Image, rendered: &CompositeOut, with_grad: bool) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    if !observed.same_size(&rendered.image) {
        return Err(invalid("observed and rendered resolutions differ"));
    }
    let m = &rendered.foreground.data;
    let count: f64 = m.iter().sum();
    let n = m.len();
    let (mut d_img, mut d_fg) = if with_grad { (vec![0.0; 3 * n], vec![0.0; n]) } else { (Vec::new(), Vec::new()) };
    if count <= 0.0 {
        return Ok((0.0, d_img, d_fg));
    }
    let mut sum = 0.0;
    for i in 0..n {
        if m[i] == 0.0 {
            continue;
        }
        let mut e2 = 0.0;
        for c in 0..3 {
            let r = observed.data[3 * i + c] - rendered.image.data[3 * i + c];
            e2 += r * r;
            if with_grad {
                d_img[3 * i + c] = -2.0 * r * m[i] * m[i] / count;
            }
        }
        sum += e2 * m[i] * m[i];
        if with_grad {
            d_fg[i] = 2.0 * e2 * m[i] / count;
        }
    }
    let loss = sum / count;
    if with_grad {
        let k = loss / count;
        d_fg.iter_mut().for_each(|d| *d -= k);
    }
    Ok((loss, d_img, d_fg))
}

// ------------------------------------------------------- perceptual loss

/// Planar RGB working buffer.
#[derive(Debug, Clone)]
struct Planes {
    w: usize,
    h: usize,
    /// `c * w * h + y * w + x`
    d: Vec<f64>,
}

impl Planes {
    fn zeros(w: usize, h: usize, ch: usize) -> Self {
        Self { w, h, d: vec![0.0; ch * w * h] }
    }
}

fn down2(p: &Planes, ch: usize) -> Planes {
    let (w, h) = (p.w / 2, p.h / 2);
    let mut o = Planes::zeros(w, h, ch);
    for c in 0..ch {
        for y in 0..h {
            for x in 0..w {
                let s = |xx: usize, yy: usize| p.d[c * p.w * p.h + yy * p.w + xx];
                o.d[c * w * h + y * w + x] = 0.25 * (s(2 * x, 2 * y) + s(2 * x + 1, 2 * y) + s(2 * x, 2 * y + 1) + s(2 * x + 1, 2 * y + 1));
            }
        }
    }
    o
}

fn down2_adjoint(g: &Planes, w: usize, h: usize, ch: usize) -> Planes {
    let mut o = Planes::zeros(w, h, ch);
    for c in 0..ch {
        for y in 0..g.h {
            for x in 0..g.w {
                let v = 0.25 * g.d[c * g.w * g.h + y * g.w + x];
                for (dx, dy) in [(0, 0), (1, 0), (0, 1), (1, 1)] {
                    o.d[c * w * h + (2 * y + dy) * w + 2 * x + dx] += v;
                }
            }
        }
    }
    o
}

fn block4(p: &Planes, ch: usize) -> Planes {
    let (w, h) = (p.w / 4, p.h / 4);
    let mut o = Planes::zeros(w, h, ch);
    for c in 0..ch {
        for y in 0..4 * h {
            for x in 0..4 * w {
                o.d[c * w * h + (y / 4) * w + x / 4] += p.d[c * p.w * p.h + y * p.w + x] / 16.0;
            }
        }
    }
    o
}

fn block4_adjoint(g: &Planes, w: usize, h: usize, ch: usize) -> Planes {
    let mut o = Planes::zeros(w, h, ch);
    for c in 0..ch {
        for y in 0..4 * g.h {
            for x in 0..4 * g.w {
                o.d[c * w * h + y * w + x] = g.d[c * g.w * g.h + (y / 4) * g.w + x / 4] / 16.0;
            }
        }
    }
    o
}

const SOBEL_X: [[f64; 3]; 3] = [[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]];
const SOBEL_Y: [[f64; 3]; 3] = [[-1.0, -2.0, -1.0], [0.0, 0.0, 0.0], [1.0, 2.0, 1.0]];

/// Horizontal and vertical Sobel responses of the channel-mean luminance
/// (valid region), stacked as two planes.
fn gradients(p: &Planes) -> Planes {
    let (w, h) = (p.w - 2, p.h - 2);
    let n = p.w * p.h;
    let mut o = Planes::zeros(w, h, 2);
    for y in 0..h {
        for x in 0..w {
            let (mut gx, mut gy) = (0.0, 0.0);
            for ky in 0..3 {
                for kx in 0..3 {
                    let j = (y + ky) * p.w + x + kx;
                    let lum = (p.d[j] + p.d[n + j] + p.d[2 * n + j]) / 3.0;
                    gx += SOBEL_X[ky][kx] * lum;
                    gy += SOBEL_Y[ky][kx] * lum;
                }
            }
            o.d[y * w + x] = gx;
            o.d[w * h + y * w + x] = gy;
        }
    }
    o
}

fn gradients_adjoint(g: &Planes, w: usize, h: usize) -> Planes {
    let n = w * h;
    let mut o = Planes::zeros(w, h, 3);
    for y in 0..g.h {
        for x in 0..g.w {
            let gx = g.d[y * g.w + x];
            let gy = g.d[g.w * g.h + y * g.w + x];
            for ky in 0..3 {
                for kx in 0..3 {
                    let v = (SOBEL_X[ky][kx] * gx + SOBEL_Y[ky][kx] * gy) / 3.0;
                    let j = (y + ky) * w + x + kx;
                    o.d[j] += v;
                    o.d[n + j] += v;
                    o.d[2 * n + j] += v;
                }
            }
        }
    }
    o
}

fn add_into(a: &mut Planes, b: &Planes) {
    for (x, y) in a.d.iter_mut().zip(&b.d) {
        *x += y;
    }
}

/// Mean squared feature distance and its gradient w.r.t. the feature input.
fn msq(f: &Planes) -> (f64, Planes) {
    let n = f.d.len() as f64;
    let v = f.d.iter().map(|x| x * x).sum::<f64>() / n;
    (v, Planes { w: f.w, h: f.h, d: f.d.iter().map(|x| 2.0 * x / n).collect() })
}

/// Surrogate perceptual distance of two equally sized patches: block colors
/// and luminance gradients on a 3-level pyramid. Features are linear in the
/// image, so it is evaluated on the difference.
fn perceptual_core(diff: Planes, phase: Phase, with_grad: bool) -> (f64, Option<Planes>) {
    let levels = if phase == Phase::Texture { 1 } else { 3 };
    let mut pyr = vec![diff];
    for l in 1..levels {
        if pyr[l - 1].w < 2 || pyr[l - 1].h < 2 {
            break;
        }
        let next = down2(&pyr[l - 1], 3);
        pyr.push(next);
    }
    let mut terms = 0usize;
    let mut total = 0.0;
    let mut level_grads: Vec<Planes> = pyr.iter().map(|p| Planes::zeros(p.w, p.h, 3)).collect();
    for (l, p) in pyr.iter().enumerate() {
        if p.w >= 4 && p.h >= 4 {
            let f = block4(p, 3);
            let (v, g) = msq(&f);
            total += v;
            terms += 1;
            if with_grad {
                add_into(&mut level_grads[l], &block4_adjoint(&g, p.w, p.h, 3));
            }
        }
        if phase == Phase::Joint && p.w >= 3 && p.h >= 3 {
            let f = gradients(p);
            let (v, g) = msq(&f);
            total += v;
            terms += 1;
            if with_grad {
                add_into(&mut level_grads[l], &gradients_adjoint(&g, p.w, p.h));
            }
        }
    }
    if terms == 0 {
        return (0.0, with_grad.then(|| Planes::zeros(pyr[0].w, pyr[0].h, 3)));
    }
    let scale = 1.0 / terms as f64;
    if !with_grad {
        return (total * scale, None);
    }
    for l in (1..level_grads.len()).rev() {
        let (w, h) = (level_grads[l - 1].w, level_grads[l - 1].h);
        let up = down2_adjoint(&level_grads[l], w, h, 3);
        add_into(&mut level_grads[l - 1], &up);
    }
    let mut g = level_grads.swap_remove(0);
    g.d.iter_mut().for_each(|x| *x *= scale);
    (total * scale, Some(g))
}

fn to_planes(img: &Image) -> Planes {
    let n = img.width * img.height;
    let mut p = Planes::zeros(img.width, img.height, 3);
    for i in 0..n {
        for c in 0..3 {
            p.d[c * n + i] = img.data[3 * i + c];
        }
    }
    p
}

/// Perceptual surrogate between two patches.
pub fn perceptual_loss(observed_patch: &Image, rendered_patch: &Image, phase: Phase) -> Result<f64> {
    if !observed_patch.same_size(rendered_patch) {
        return Err(invalid("patch sizes differ"));
    }
    let mut diff = to_planes(rendered_patch);
    let o = to_planes(observed_patch);
    for (d, x) in diff.d.iter_mut().zip(&o.d) {
        *d -= x;
    }
    Ok(perceptual_core(diff, phase, false).0)
}

/// Per-object patch losses between `Î ∘ M̂` and `I ∘ M̂` (the masked
/// residual), averaged over objects, with gradients w.r.t. `Î` and `M̂`.
fn perceptual_scene(observed: &Image, comp: &CompositeOut, windows: &[Window], phase: Phase, with_grad: bool) -> (f64, Vec<f64>, Vec<f64>) {
    let fw = observed.width;
    let n = observed.width * observed.height;
    let (mut d_img, mut d_fg) = if with_grad { (vec![0.0; 3 * n], vec![0.0; n]) } else { (Vec::new(), Vec::new()) };
    if windows.is_empty() {
        return (0.0, d_img, d_fg);
    }
    let mut total = 0.0;
    for win in windows {
        let wn = win.width * win.height;
        let mut diff = Planes::zeros(win.width, win.height, 3);
        for ly in 0..win.height {
            for lx in 0..win.width {
                let gi = (ly + win.y0) * fw + lx + win.x0;
                let m = comp.foreground.data[gi];
                for c in 0..3 {
                    let (r, o) = (comp.image.data[3 * gi + c], observed.data[3 * gi + c]);
                    diff.d[c * wn + ly * win.width + lx] = (r - o) * m;
                }
            }
        }
        let (v, g) = perceptual_core(diff, phase, with_grad);
        total += v;
        if let Some(g) = g {
            for ly in 0..win.height {
                for lx in 0..win.width {
                    let gi = (ly + win.y0) * fw + lx + win.x0;
                    let li = ly * win.width + lx;
                    let m = comp.foreground.data[gi];
                    for c in 0..3 {
                        let gv = g.d[c * wn + li] / windows.len() as f64;
                        let (r, o) = (comp.image.data[3 * gi + c], observed.data[3 * gi + c]);
                        d_img[3 * gi + c] += gv * m;
                        d_fg[gi] += gv * (r - o);
                    }
                }
            }
        }
    }
    (total / windows.len() as f64, d_img, d_fg)
}

/// `L_IR = L_RGB + λ L_perceptual` on a rendered composite, with the object
/// patches taken from `windows`.
pub fn combined_loss(observed: &Image, rendered: &CompositeOut, windows: &[Window], phase: Phase, cfg: &FitConfig) -> Result<LossBreakdown> {
    Ok(combined_loss_grad(observed, rendered, windows, phase, cfg, false)?.0)
}

/// [`combined_loss`] plus gradients w.r.t. `Î` and `M̂`. Embedding terms
/// are not included.
pub fn combined_loss_grad(
    observed: &Image,
    rendered: &CompositeOut,
    windows: &[Window],
    phase: Phase,
    cfg: &FitConfig,
    with_grad: bool,
) -> Result<(LossBreakdown, Vec<f64>, Vec<f64>)> {
    let n = observed.width * observed.height;
    let (mut d_img, mut d_fg) = if with_grad { (vec![0.0; 3 * n], vec![0.0; n]) } else { (Vec::new(), Vec::new()) };
    let mut out = LossBreakdown::default();
    if cfg.use_rgb {
        let (l, gi, gf) = masked_rgb_loss_grad(observed, rendered, with_grad)?;
        out.rgb = l;
        if with_grad {
            d_img.iter_mut().zip(&gi).for_each(|(a, b)| *a += b);
            d_fg.iter_mut().zip(&gf).for_each(|(a, b)| *a += b);
        }
    }
    if cfg.use_perceptual && cfg.lambda > 0.0 {
        if !observed.same_size(&rendered.image) {
            return Err(invalid("observed and rendered resolutions differ"));
        }
        let (l, gi, gf) = perceptual_scene(observed, rendered, windows, phase, with_grad);
        out.perceptual = l;
        if with_grad {
            d_img.iter_mut().zip(&gi).for_each(|(a, b)| *a += cfg.lambda * b);
            d_fg.iter_mut().zip(&gf).for_each(|(a, b)| *a += cfg.lambda * b);
        }
    }
    out.total = out.rgb + cfg.lambda * out.perceptual;
    Ok((out, d_img, d_fg))
}

// ------------------------------------------------------- regularization

/// `α z + (1 − α) z_avg`.
pub fn shrink_latent(z: &[f64], z_avg: &[f64], alpha: f64) -> Result<Vec<f64>> {
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(invalid("alpha must lie in (0, 1]"));
    }
    if z.len() != z_avg.len() {
        return Err(Error::DimensionMismatch { expected: z.len(), got: z_avg.len() });
    }
    Ok(z.iter().zip(z_avg).map(|(a, b)| alpha * a + (1.0 - alpha) * b).collect())
}

// ------------------------------------------------------------------ Adam

#[derive(Debug, Clone, PartialEq, Default)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u32,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        Self { m: vec![0.0; n], v: vec![0.0; n], t: 0 }
    }
}

/// One bias-corrected Adam update. A non-finite gradient leaves both the
/// parameters and the state untouched and returns an error.
pub fn adam_step(params: &mut [f64], grads: &[f64], state: &mut AdamState, lr: f64, beta1: f64, beta2: f64, eps: f64) -> Result<()> {
    if params.len() != grads.len() {
        return Err(Error::DimensionMismatch { expected: params.len(), got: grads.len() });
    }
    if state.m.len() != params.len() {
        *state = AdamState::new(params.len());
    }
    if grads.iter().any(|g| !g.is_finite()) {
        return Err(invalid("non-finite gradient"));
    }
    state.t += 1;
    let bc1 = 1.0 - beta1.powi(state.t as i32);
    let bc2 = 1.0 - beta2.powi(state.t as i32);
    for i in 0..params.len() {
        state.m[i] = beta1 * state.m[i] + (1.0 - beta1) * grads[i];
        state.v[i] = beta2 * state.v[i] + (1.0 - beta2) * grads[i] * grads[i];
        let mh = state.m[i] / bc1;
        let vh = state.v[i] / bc2;
        params[i] -= lr * mh / (vh.sqrt() + eps);
    }
    Ok(())
}

// ------------------------------------------------------------- fit_frame

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub latents: LatentPair,
    pub node: ObjectNode,
    /// Frame-level loss after the last step.
    pub loss: LossBreakdown,
    /// Masked RGB error restricted to this object's visible pixels.
    pub object_rgb: f64,
    /// Frame-level total loss before each step, then after the last one.
    pub trace: Vec<f64>,
    /// Set when a non-finite gradient forced a skipped step.
    pub skipped_steps: usize,
    /// Object produced no coverage at its initial pose.
    pub culled: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitOutcome {
    pub results: Vec<FitResult>,
    /// Every object was culled; the inputs are returned unchanged.
    pub all_culled: bool,
}

struct ObjectOpt {
    lat: LatentPair,
    node: ObjectNode,
    log_scale: f64,
    adam: [AdamState; 5],
    skipped: usize,
}

fn with_sharpness<'g>(base: &SceneRenderer<'g>, mult: f64) -> SceneRenderer<'g> {
    let mut r = base.clone();
    r.settings = RenderSettings { sharpness: base.settings.sharpness * mult, ..base.settings };
    r
}

fn windows_of(render: &SceneRender) -> Vec<Window> {
    render.renders.iter().map(|r| r.window).collect()
}

fn penalty(cfg: &FitConfig, lat: &LatentPair, groups: Groups) -> f64 {
    if cfg.regularization != Regularization::Penalty || !cfg.use_embed {
        return 0.0;
    }
    let mut p = 0.0;
    if groups.texture {
        p += 0.5 * (1.0 - cfg.alpha_texture) / cfg.alpha_texture * lat.texture.iter().map(|z| z * z).sum::<f64>();
    }
    if groups.shape {
        p += 0.5 * (1.0 - cfg.alpha_shape) / cfg.alpha_shape * lat.shape.iter().map(|z| z * z).sum::<f64>();
    }
    p
}

/// Scene loss and per-object parameter gradients at the current state.
pub fn loss_and_grads(
    renderer: &SceneRenderer<'_>,
    observed: &Image,
    objects: &[(LatentPair, ObjectNode)],
    cam: &Camera,
    phase: Phase,
    cfg: &FitConfig,
) -> Result<(LossBreakdown, Vec<ObjectGrad>, SceneRender)> {
    let scene = renderer.render_scene(objects, cam)?;
    let windows = windows_of(&scene);
    let (loss, d_img, d_fg) = combined_loss_grad(observed, &scene.composite, &windows, phase, cfg, true)?;
    let grads = scene.backward(renderer, &d_img, &d_fg);
    Ok((loss, grads, scene))
}

fn object_rgb(observed: &Image, comp: &CompositeOut, p: usize) -> f64 {
    let g = &comp.gamma[p].data;
    let (mut num, mut den) = (0.0, 0.0);
    for (i, &w) in g.iter().enumerate() {
        if w > 0.0 {
            let m = comp.foreground.data[i];
            let e2: f64 = (0..3).map(|c| (observed.data[3 * i + c] - comp.image.data[3 * i + c]).powi(2)).sum();
            num += e2 * m * m * w;
            den += w;
        }
    }
    if den > 0.0 { num / den } else { 0.0 }
}

/// Jointly refines all objects of one frame following the schedule.
pub fn fit_frame(
    renderer: &SceneRenderer<'_>,
    observed: &Image,
    init_objects: &[(LatentPair, ObjectNode)],
    cam: &Camera,
    cfg: &FitConfig,
) -> Result<FitOutcome> {
    cfg.validate()?;
    if init_objects.is_empty() {
        return Err(invalid("fit_frame needs at least one object"));
    }
    if observed.width != cam.width || observed.height != cam.height {
        return Err(invalid("observation does not match the camera resolution"));
    }
    for (lat, node) in init_objects {
        renderer.generator.check(lat)?;
        if !(node.scale > 0.0) {
            return Err(invalid("object scale must be positive"));
        }
    }
    let first = renderer.render_scene(init_objects, cam)?;
    let culled: Vec<bool> = first.renders.iter().map(|r| r.mask_sum() == 0.0).collect();
    if culled.iter().all(|&c| c) {
        let results = init_objects
            .iter()
            .map(|(lat, node)| FitResult {
                latents: lat.clone(),
                node: *node,
                loss: LossBreakdown::default(),
                object_rgb: 0.0,
                trace: Vec::new(),
                skipped_steps: 0,
                culled: true,
            })
            .collect();
        return Ok(FitOutcome { results, all_culled: true });
    }

    let mut opt: Vec<ObjectOpt> = init_objects
        .iter()
        .map(|(lat, node)| ObjectOpt {
            lat: lat.clone(),
            node: *node,
            log_scale: node.scale.ln(),
            adam: Default::default(),
            skipped: 0,
        })
        .collect();
    let mut trace = Vec::with_capacity(cfg.total_steps() + 1);
    let mut last_plan = cfg.plan(0);
    for k in 0..cfg.total_steps() {
        let plan = cfg.plan(k);
        last_plan = plan;
        let r = with_sharpness(renderer, plan.sharpness);
        let objects: Vec<(LatentPair, ObjectNode)> = opt.iter().map(|o| (o.lat.clone(), o.node)).collect();
        let (loss, grads, _) = loss_and_grads(&r, observed, &objects, cam, plan.phase, cfg)?;
        let pen: f64 = opt.iter().map(|o| penalty(cfg, &o.lat, plan.groups)).sum();
        trace.push(loss.total + pen);
        for (o, g) in opt.iter_mut().zip(grads) {
            if !g.is_finite() {
                o.skipped += 1;
                continue;
            }
            step_object(o, &g, plan.groups, cfg)?;
        }
    }

    let r = with_sharpness(renderer, last_plan.sharpness);
    let objects: Vec<(LatentPair, ObjectNode)> = opt.iter().map(|o| (o.lat.clone(), o.node)).collect();
    let scene = r.render_scene(&objects, cam)?;
    let windows = windows_of(&scene);
    let mut loss = combined_loss(observed, &scene.composite, &windows, last_plan.phase, cfg)?;
    let pen: f64 = opt.iter().map(|o| penalty(cfg, &o.lat, last_plan.groups)).sum();
    loss.embed = pen;
    loss.total += pen;
    trace.push(loss.total);

    let results = opt
        .into_iter()
        .enumerate()
        .map(|(p, o)| FitResult {
            object_rgb: object_rgb(observed, &scene.composite, p),
            latents: o.lat,
            node: o.node,
            loss,
            trace: trace.clone(),
            skipped_steps: o.skipped,
            culled: culled[p],
        })
        .collect();
    Ok(FitOutcome { results, all_culled: false })
}

fn step_object(o: &mut ObjectOpt, g: &ObjectGrad, groups: Groups, cfg: &FitConfig) -> Result<()> {
    let (b1, b2, eps) = (cfg.beta1, cfg.beta2, cfg.epsilon);
    let penalize = cfg.use_embed && cfg.regularization == Regularization::Penalty;
    if groups.texture {
        let mut grad = g.texture.clone();
        if penalize {
            let mu = (1.0 - cfg.alpha_texture) / cfg.alpha_texture;
            grad.iter_mut().zip(&o.lat.texture).for_each(|(d, z)| *d += mu * z);
        }
        adam_step(&mut o.lat.texture, &grad, &mut o.adam[0], cfg.lr.texture, b1, b2, eps)?;
        if cfg.use_embed && cfg.regularization == Regularization::Shrink {
            let avg = vec![0.0; o.lat.texture.len()];
            o.lat.texture = shrink_latent(&o.lat.texture, &avg, cfg.alpha_texture)?;
        }
    }
    if groups.shape {
        let mut grad = g.shape.clone();
        if penalize {
            let mu = (1.0 - cfg.alpha_shape) / cfg.alpha_shape;
            grad.iter_mut().zip(&o.lat.shape).for_each(|(d, z)| *d += mu * z);
        }
        adam_step(&mut o.lat.shape, &grad, &mut o.adam[1], cfg.lr.shape, b1, b2, eps)?;
        if cfg.use_embed && cfg.regularization == Regularization::Shrink {
            let avg = vec![0.0; o.lat.shape.len()];
            o.lat.shape = shrink_latent(&o.lat.shape, &avg, cfg.alpha_shape)?;
        }
    }
    if groups.translation {
        let mut t = [o.node.pose.t.x, o.node.pose.t.y, o.node.pose.t.z];
        adam_step(&mut t, g.translation.as_slice(), &mut o.adam[2], cfg.lr.translation, b1, b2, eps)?;
        o.node.pose.t = t.into();
    }
    if groups.rotation {
        let mut w = [o.node.pose.omega.x, o.node.pose.omega.y, o.node.pose.omega.z];
        adam_step(&mut w, g.rotation.as_slice(), &mut o.adam[3], cfg.lr.rotation, b1, b2, eps)?;
        o.node.pose.omega = w.into();
        o.node.pose.omega = o.node.pose.canonical_omega();
    }
    if groups.log_scale {
        let mut s = [o.log_scale];
        adam_step(&mut s, &[g.log_scale], &mut o.adam[4], cfg.lr.log_scale, b1, b2, eps)?;
        o.log_scale = s[0];
        o.node.scale = o.log_scale.exp();
    }
    Ok(())
}
