//! Soft differentiable rasterization and distance-ordered compositing.
//!
//! Each object is rasterized independently into a window of the frame:
//!
//! * a z-buffer over front-facing triangles decides the hard coverage and,
//!   for covered pixels, the triangle whose barycentric-interpolated vertex
//!   color is shown;
//! * the soft mask is `cov(sharpness · d)` where `d` is the signed pixel
//!   distance to the nearest silhouette edge (positive inside) and `cov` a
//!   sigmoid rescaled to hit exactly 0 and 1 at `±cutoff`;
//! * pixels in the outer soft band take the color of the closest point on
//!   that silhouette edge.
//!
//! Vertex colors are albedo times Lambertian shading of the vertex normal
//! under a fixed directional light plus ambient. The tape keeps, per pixel,
//! which triangle or edge produced its values so the reverse pass can pull
//! image gradients back to camera-space vertices and albedo, and from there
//! to latents and pose.

use alloc::vec;
use alloc::vec::Vec;

#[allow(unused_imports)]
use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::geometry::{so3_left_jacobian, Camera, ObjectNode, NEAR_PLANE};
use crate::image::{Image, Plane};
use crate::prior::{vertex_normals, Generator, LatentPair, TexturedMesh};
use crate::{sigmoid, Mat3, Mat4, Vec3};

const NONE: u32 = u32::MAX;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RenderSettings {
    /// Silhouette edge sharpness in 1/px.
    pub sharpness: f64,
    /// Direction towards the light, world frame (need not be normalized).
    pub light_dir: [f64; 3],
    pub ambient: f64,
    /// `|sharpness · d|` beyond which coverage is exactly 0 or 1.
    pub cutoff: f64,
    /// Per-object render window `(width, height)`; `None` renders the full frame.
    pub patch: Option<(usize, usize)>,
}

impl Default for RenderSettings {
    fn default() -> Self {
        Self { sharpness: 40.0, light_dir: [0.3, -1.0, 0.5], ambient: 0.4, cutoff: 12.0, patch: Some((128, 96)) }
    }
}

impl RenderSettings {
    pub fn validate(&self) -> Result<()> {
        if !(self.sharpness > 0.0) || !(self.cutoff > 0.0) {
            return Err(invalid("sharpness and cutoff must be positive"));
        }
        if !(0.0..=1.0).contains(&self.ambient) {
            return Err(invalid("ambient must lie in [0, 1]"));
        }
        if Vec3::from(self.light_dir).norm() == 0.0 {
            return Err(invalid("light direction must be non-zero"));
        }
        if let Some((w, h)) = self.patch {
            if w == 0 || h == 0 {
                return Err(invalid("patch size must be non-zero"));
            }
        }
        Ok(())
    }

    fn band_px(&self) -> f64 {
        self.cutoff / self.sharpness
    }

    fn coverage(&self, x: f64) -> (f64, f64) {
        if x <= -self.cutoff {
            return (0.0, 0.0);
        }
        if x >= self.cutoff {
            return (1.0, 0.0);
        }
        let lo = sigmoid(-self.cutoff);
        let span = 1.0 - 2.0 * lo;
        let s = sigmoid(x);
        (((s - lo) / span).clamp(0.0, 1.0), s * (1.0 - s) / span)
    }
}

/// Rectangle of the frame, in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Window {
    pub x0: usize,
    pub y0: usize,
    pub width: usize,
    pub height: usize,
}

impl Window {
    pub fn full(cam: &Camera) -> Self {
        Self { x0: 0, y0: 0, width: cam.width, height: cam.height }
    }

    /// `size` window centered on `(u, v)` and shifted to lie inside the frame.
    pub fn centered(cam: &Camera, u: f64, v: f64, size: (usize, usize)) -> Self {
        let w = size.0.min(cam.width);
        let h = size.1.min(cam.height);
        let place = |c: f64, len: usize, frame: usize| -> usize {
            let start = if c.is_finite() { (c - len as f64 / 2.0).round() } else { 0.0 };
            (start.max(0.0) as usize).min(frame - len)
        };
        Self { x0: place(u, w, cam.width), y0: place(v, h, cam.height), width: w, height: h }
    }

    #[inline]
    pub fn contains(&self, x: usize, y: usize) -> bool {
        x >= self.x0 && y >= self.y0 && x < self.x0 + self.width && y < self.y0 + self.height
    }

    #[inline]
    fn local(&self, x: usize, y: usize) -> usize {
        (y - self.y0) * self.width + (x - self.x0)
    }
}

/// One object's render. Values outside `window` are empty.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderOut {
    pub frame_width: usize,
    pub frame_height: usize,
    pub window: Window,
    /// Interleaved RGB over the window.
    pub rgb: Vec<f64>,
    pub mask: Vec<f64>,
    pub depth: Vec<f64>,
    /// Z-buffer coverage by front-facing triangles.
    pub hard: Vec<bool>,
}

impl RenderOut {
    fn empty(cam: &Camera, window: Window) -> Self {
        let n = window.width * window.height;
        Self {
            frame_width: cam.width,
            frame_height: cam.height,
            window,
            rgb: vec![0.0; 3 * n],
            mask: vec![0.0; n],
            depth: vec![f64::INFINITY; n],
            hard: vec![false; n],
        }
    }

    pub fn mask_at(&self, x: usize, y: usize) -> f64 {
        if self.window.contains(x, y) {
            self.mask[self.window.local(x, y)]
        } else {
            0.0
        }
    }

    pub fn rgb_at(&self, x: usize, y: usize) -> [f64; 3] {
        if self.window.contains(x, y) {
            let i = 3 * self.window.local(x, y);
            [self.rgb[i], self.rgb[i + 1], self.rgb[i + 2]]
        } else {
            [0.0; 3]
        }
    }

    pub fn depth_at(&self, x: usize, y: usize) -> f64 {
        if self.window.contains(x, y) {
            self.depth[self.window.local(x, y)]
        } else {
            f64::INFINITY
        }
    }

    pub fn hard_at(&self, x: usize, y: usize) -> bool {
        self.window.contains(x, y) && self.hard[self.window.local(x, y)]
    }

    pub fn hard_count(&self) -> usize {
        self.hard.iter().filter(|&&h| h).count()
    }

    pub fn mask_sum(&self) -> f64 {
        self.mask.iter().sum()
    }

    /// Full-frame mask plane.
    pub fn mask_plane(&self) -> Plane {
        let mut p = Plane::new(self.frame_width, self.frame_height, 0.0);
        for y in 0..self.window.height {
            for x in 0..self.window.width {
                p.data[(y + self.window.y0) * self.frame_width + x + self.window.x0] = self.mask[y * self.window.width + x];
            }
        }
        p
    }
}

/// Undirected mesh edges with their (one or two) adjacent faces.
#[derive(Debug, Clone)]
pub struct Topology {
    edges: Vec<(usize, usize, usize, usize)>,
}

impl Topology {
    pub fn new(faces: &[[usize; 3]]) -> Self {
        let mut half: Vec<(usize, usize, usize)> = Vec::with_capacity(faces.len() * 3);
        for (f, tri) in faces.iter().enumerate() {
            for e in 0..3 {
                let (a, b) = (tri[e], tri[(e + 1) % 3]);
                half.push((a.min(b), a.max(b), f));
            }
        }
        half.sort_unstable();
        let mut edges = Vec::with_capacity(half.len() / 2);
        let mut i = 0;
        while i < half.len() {
            let (a, b, f) = half[i];
            if i + 1 < half.len() && half[i + 1].0 == a && half[i + 1].1 == b {
                edges.push((a, b, f, half[i + 1].2));
                i += 2;
            } else {
                edges.push((a, b, f, usize::MAX));
                i += 1;
            }
        }
        Self { edges }
    }
}

/// Per-pixel provenance for the reverse pass, window-local.
#[derive(Debug, Clone)]
pub struct RasterTape {
    window: Window,
    cam: (f64, f64),
    cutoff_x: f64,
    sharpness: f64,
    ambient: f64,
    light: Vec3,
    /// Camera-space vertex positions.
    x_cam: Vec<Vec3>,
    albedo: Vec<Vec3>,
    normals: Vec<Vec3>,
    shade_lit: Vec<bool>,
    shade: Vec<f64>,
    uv: Vec<[f64; 2]>,
    sil: Vec<(usize, usize)>,
    tri: Vec<u32>,
    bary: Vec<[f64; 3]>,
    edge: Vec<u32>,
    edge_t: Vec<f64>,
    edge_d: Vec<f64>,
    inside: Vec<bool>,
    faces: Vec<[usize; 3]>,
}

/// Gradients w.r.t. camera-space vertex positions and per-vertex albedo.
#[derive(Debug, Clone, PartialEq)]
pub struct RasterGrad {
    pub d_vertices: Vec<Vec3>,
    pub d_albedo: Vec<Vec3>,
}

#[inline]
fn edge_fn(a: [f64; 2], b: [f64; 2], p: [f64; 2]) -> f64 {
    (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0])
}

/// Accumulates `g · ∂E(a, b, p)/∂(a, b, p)`.
#[inline]
fn edge_fn_grad(a: [f64; 2], b: [f64; 2], p: [f64; 2], g: f64, da: &mut [f64; 2], db: &mut [f64; 2], dp: &mut [f64; 2]) {
    da[0] += g * (b[1] - p[1]);
    da[1] += g * (p[0] - b[0]);
    db[0] += g * (p[1] - a[1]);
    db[1] += g * (a[0] - p[0]);
    dp[0] += g * (a[1] - b[1]);
    dp[1] += g * (b[0] - a[0]);
}

/// Rasterizes camera-space geometry. `normals` are vertex normals in camera
/// space, `light` the unit light direction in camera space.
fn raster(
    cam: &Camera,
    x_cam: Vec<Vec3>,
    faces: &[[usize; 3]],
    topo: &Topology,
    albedo: Vec<Vec3>,
    light: Vec3,
    settings: &RenderSettings,
    window: Window,
) -> (RenderOut, RasterTape) {
    let mut out = RenderOut::empty(cam, window);
    let n = window.width * window.height;
    let nv = x_cam.len();
    let normals = vertex_normals(&x_cam, faces);
    let mut shade = Vec::with_capacity(nv);
    let mut shade_lit = Vec::with_capacity(nv);
    for nrm in &normals {
        let d = nrm.dot(&light);
        shade_lit.push(d > 0.0);
        shade.push(settings.ambient + (1.0 - settings.ambient) * d.max(0.0));
    }
    let color: Vec<Vec3> = albedo.iter().zip(&shade).map(|(a, s)| a * *s).collect();
    let mut uv = Vec::with_capacity(nv);
    let mut front_of_near = Vec::with_capacity(nv);
    for x in &x_cam {
        let ok = x.z > NEAR_PLANE;
        front_of_near.push(ok);
        let z = if ok { x.z } else { NEAR_PLANE };
        uv.push([cam.fx * x.x / z + cam.cx, cam.fy * x.y / z + cam.cy]);
    }

    // faces that can be seen: not clipped and facing the camera
    let visible: Vec<bool> = faces
        .iter()
        .map(|&[a, b, c]| {
            if !(front_of_near[a] && front_of_near[b] && front_of_near[c]) {
                return false;
            }
            let nrm = (x_cam[b] - x_cam[a]).cross(&(x_cam[c] - x_cam[a]));
            nrm.dot(&x_cam[a]) < 0.0
        })
        .collect();

    let mut tri = vec![NONE; n];
    let mut bary = vec![[0.0; 3]; n];
    let mut zbuf = vec![f64::INFINITY; n];
    let (wx0, wy0) = (window.x0 as f64, window.y0 as f64);
    let (wx1, wy1) = (wx0 + window.width as f64, wy0 + window.height as f64);
    for (f, &[a, b, c]) in faces.iter().enumerate() {
        if !visible[f] {
            continue;
        }
        let (pa, pb, pc) = (uv[a], uv[b], uv[c]);
        let area = edge_fn(pa, pb, pc);
        if area.abs() < 1e-12 {
            continue;
        }
        let minx = pa[0].min(pb[0]).min(pc[0]).max(wx0);
        let maxx = pa[0].max(pb[0]).max(pc[0]).min(wx1);
        let miny = pa[1].min(pb[1]).min(pc[1]).max(wy0);
        let maxy = pa[1].max(pb[1]).max(pc[1]).min(wy1);
        if minx >= maxx || miny >= maxy {
            continue;
        }
        let x_lo = (minx - 0.5).ceil().max(wx0) as usize;
        let y_lo = (miny - 0.5).ceil().max(wy0) as usize;
        let x_hi = ((maxx - 0.5).floor() as usize).min(window.x0 + window.width - 1);
        let y_hi = ((maxy - 0.5).floor() as usize).min(window.y0 + window.height - 1);
        let (za, zb, zc) = (x_cam[a].z, x_cam[b].z, x_cam[c].z);
        for py in y_lo..=y_hi {
            for px in x_lo..=x_hi {
                let p = [px as f64 + 0.5, py as f64 + 0.5];
                let b0 = edge_fn(pb, pc, p) / area;
                let b1 = edge_fn(pc, pa, p) / area;
                let b2 = edge_fn(pa, pb, p) / area;
                if b0 < 0.0 || b1 < 0.0 || b2 < 0.0 {
                    continue;
                }
                let z = b0 * za + b1 * zb + b2 * zc;
                let i = window.local(px, py);
                if z < zbuf[i] {
                    zbuf[i] = z;
                    tri[i] = f as u32;
                    bary[i] = [b0, b1, b2];
                }
            }
        }
    }

    // silhouette: edges with exactly one visible adjacent face
    let sil: Vec<(usize, usize)> = topo
        .edges
        .iter()
        .filter_map(|&(a, b, f1, f2)| {
            let v1 = visible[f1];
            let v2 = f2 != usize::MAX && visible[f2];
            (v1 != v2).then_some((a, b))
        })
        .collect();

    let mut edge = vec![NONE; n];
    let mut edge_t = vec![0.0; n];
    let mut edge_d = vec![f64::INFINITY; n];
    let band = settings.band_px();
    for (k, &(a, b)) in sil.iter().enumerate() {
        let (pa, pb) = (uv[a], uv[b]);
        let minx = (pa[0].min(pb[0]) - band).max(wx0);
        let maxx = (pa[0].max(pb[0]) + band).min(wx1);
        let miny = (pa[1].min(pb[1]) - band).max(wy0);
        let maxy = (pa[1].max(pb[1]) + band).min(wy1);
        if minx >= maxx || miny >= maxy {
            continue;
        }
        let x_lo = (minx - 0.5).ceil().max(wx0) as usize;
        let y_lo = (miny - 0.5).ceil().max(wy0) as usize;
        let x_hi = ((maxx - 0.5).floor().max(0.0) as usize).min(window.x0 + window.width - 1);
        let y_hi = ((maxy - 0.5).floor().max(0.0) as usize).min(window.y0 + window.height - 1);
        let e = [pb[0] - pa[0], pb[1] - pa[1]];
        let len2 = e[0] * e[0] + e[1] * e[1];
        for py in y_lo..=y_hi {
            for px in x_lo..=x_hi {
                let p = [px as f64 + 0.5, py as f64 + 0.5];
                let w = [p[0] - pa[0], p[1] - pa[1]];
                let t = if len2 > 0.0 { ((w[0] * e[0] + w[1] * e[1]) / len2).clamp(0.0, 1.0) } else { 0.0 };
                let q = [pa[0] + t * e[0] - p[0], pa[1] + t * e[1] - p[1]];
                let d = (q[0] * q[0] + q[1] * q[1]).sqrt();
                let i = window.local(px, py);
                if d < edge_d[i] && d < band {
                    edge_d[i] = d;
                    edge[i] = k as u32;
                    edge_t[i] = t;
                }
            }
        }
    }

    let mut inside = vec![false; n];
    for i in 0..n {
        let covered = tri[i] != NONE;
        inside[i] = covered;
        out.hard[i] = covered;
        let mask = if edge[i] == NONE {
            if covered { 1.0 } else { 0.0 }
        } else {
            let d = if covered { edge_d[i] } else { -edge_d[i] };
            settings.coverage(settings.sharpness * d).0
        };
        out.mask[i] = mask;
        if covered {
            let [a, b, c] = faces[tri[i] as usize];
            let w = bary[i];
            let col = color[a] * w[0] + color[b] * w[1] + color[c] * w[2];
            out.rgb[3 * i..3 * i + 3].copy_from_slice(col.as_slice());
            out.depth[i] = zbuf[i];
        } else if mask > 0.0 {
            let (a, b) = sil[edge[i] as usize];
            let t = edge_t[i];
            let col = color[a] * (1.0 - t) + color[b] * t;
            out.rgb[3 * i..3 * i + 3].copy_from_slice(col.as_slice());
            out.depth[i] = x_cam[a].z * (1.0 - t) + x_cam[b].z * t;
        }
    }

    let tape = RasterTape {
        window,
        cam: (cam.fx, cam.fy),
        cutoff_x: settings.cutoff,
        sharpness: settings.sharpness,
        ambient: settings.ambient,
        light,
        x_cam,
        albedo,
        normals,
        shade_lit,
        shade,
        uv,
        sil,
        tri,
        bary,
        edge,
        edge_t,
        edge_d,
        inside,
        faces: faces.to_vec(),
    };
    (out, tape)
}

impl RasterTape {
    /// Reverse pass. `d_rgb` (interleaved) and `d_mask` are window-local.
    pub fn backward(&self, d_rgb: &[f64], d_mask: &[f64]) -> RasterGrad {
        let nv = self.x_cam.len();
        let settings = RenderSettings {
            sharpness: self.sharpness,
            cutoff: self.cutoff_x,
            ambient: self.ambient,
            light_dir: [self.light.x, self.light.y, self.light.z],
            patch: None,
        };
        let mut d_uv = vec![[0.0f64; 2]; nv];
        let mut d_color = vec![Vec3::zeros(); nv];
        let color = |v: usize| self.albedo[v] * self.shade[v];
        let w = self.window;
        for i in 0..w.width * w.height {
            let g_rgb = Vec3::new(d_rgb[3 * i], d_rgb[3 * i + 1], d_rgb[3 * i + 2]);
            let g_mask = d_mask[i];
            if g_rgb == Vec3::zeros() && g_mask == 0.0 {
                continue;
            }
            let p = [(w.x0 + i % w.width) as f64 + 0.5, (w.y0 + i / w.width) as f64 + 0.5];
            let mut dd = 0.0; // dL/d(distance)
            if self.edge[i] != NONE && g_mask != 0.0 {
                let sign = if self.inside[i] { 1.0 } else { -1.0 };
                let x = self.sharpness * sign * self.edge_d[i];
                let (_, dc) = settings.coverage(x);
                dd += g_mask * dc * self.sharpness * sign;
            }
            if self.inside[i] {
                if g_rgb != Vec3::zeros() {
                    let tri = self.faces[self.tri[i] as usize];
                    let b = self.bary[i];
                    let mut gb = [0.0; 3];
                    for k in 0..3 {
                        d_color[tri[k]] += g_rgb * b[k];
                        gb[k] = g_rgb.dot(&color(tri[k]));
                    }
                    let (p0, p1, p2) = (self.uv[tri[0]], self.uv[tri[1]], self.uv[tri[2]]);
                    let area = edge_fn(p0, p1, p2);
                    let (mut d0, mut d1, mut d2) = ([0.0; 2], [0.0; 2], [0.0; 2]);
                    let mut dp = [0.0; 2];
                    // b_k = E_k / A
                    edge_fn_grad(p1, p2, p, gb[0] / area, &mut d1, &mut d2, &mut dp);
                    edge_fn_grad(p2, p0, p, gb[1] / area, &mut d2, &mut d0, &mut dp);
                    edge_fn_grad(p0, p1, p, gb[2] / area, &mut d0, &mut d1, &mut dp);
                    let ga = -(gb[0] * b[0] + gb[1] * b[1] + gb[2] * b[2]) / area;
                    edge_fn_grad(p0, p1, p2, ga, &mut d0, &mut d1, &mut d2);
                    for (k, d) in [d0, d1, d2].iter().enumerate() {
                        d_uv[tri[k]][0] += d[0];
                        d_uv[tri[k]][1] += d[1];
                    }
                }
            }
            if self.edge[i] == NONE {
                continue;
            }
            let (a, b) = self.sil[self.edge[i] as usize];
            let (pa, pb) = (self.uv[a], self.uv[b]);
            let t = self.edge_t[i];
            let e = [pb[0] - pa[0], pb[1] - pa[1]];
            let len2 = e[0] * e[0] + e[1] * e[1];
            let mut dt = 0.0;
            if !self.inside[i] && g_rgb != Vec3::zeros() {
                d_color[a] += g_rgb * (1.0 - t);
                d_color[b] += g_rgb * t;
                dt = g_rgb.dot(&(color(b) - color(a)));
            }
            let d = self.edge_d[i];
            if dd != 0.0 && d > 0.0 {
                let q = [pa[0] + t * e[0] - p[0], pa[1] + t * e[1] - p[1]];
                let gq = [dd * q[0] / d, dd * q[1] / d];
                d_uv[a][0] += gq[0] * (1.0 - t);
                d_uv[a][1] += gq[1] * (1.0 - t);
                d_uv[b][0] += gq[0] * t;
                d_uv[b][1] += gq[1] * t;
            }
            if dt != 0.0 && t > 0.0 && t < 1.0 && len2 > 0.0 {
                let wv = [p[0] - pa[0], p[1] - pa[1]];
                // ∂t/∂b = (w − 2te)/|e|², ∂t/∂a = (−e − w + 2te)/|e|²
                for k in 0..2 {
                    let db = (wv[k] - 2.0 * t * e[k]) / len2;
                    let da = (-e[k] - wv[k] + 2.0 * t * e[k]) / len2;
                    d_uv[b][k] += dt * db;
                    d_uv[a][k] += dt * da;
                }
            }
        }

        let (fx, fy) = self.cam;
        let mut d_x = vec![Vec3::zeros(); nv];
        let mut d_albedo = vec![Vec3::zeros(); nv];
        let mut d_normal = vec![Vec3::zeros(); nv];
        for v in 0..nv {
            let x = self.x_cam[v];
            if x.z > NEAR_PLANE && (d_uv[v][0] != 0.0 || d_uv[v][1] != 0.0) {
                let iz = 1.0 / x.z;
                let (gu, gv) = (d_uv[v][0], d_uv[v][1]);
                d_x[v] += Vec3::new(gu * fx * iz, gv * fy * iz, -(gu * fx * x.x + gv * fy * x.y) * iz * iz);
            }
            let gc = d_color[v];
            if gc != Vec3::zeros() {
                d_albedo[v] = gc * self.shade[v];
                if self.shade_lit[v] {
                    let ds = gc.dot(&self.albedo[v]);
                    d_normal[v] = self.light * (ds * (1.0 - self.ambient));
                }
            }
        }
        // vertex normal = normalize(Σ adjacent face cross products)
        let mut raw = vec![Vec3::zeros(); nv];
        for &[a, b, c] in &self.faces {
            let cr = (self.x_cam[b] - self.x_cam[a]).cross(&(self.x_cam[c] - self.x_cam[a]));
            raw[a] += cr;
            raw[b] += cr;
            raw[c] += cr;
        }
        let mut d_raw = vec![Vec3::zeros(); nv];
        let mut any = false;
        for v in 0..nv {
            if d_normal[v] != Vec3::zeros() {
                let l = raw[v].norm();
                if l > 0.0 {
                    let nrm = self.normals[v];
                    d_raw[v] = (d_normal[v] - nrm * nrm.dot(&d_normal[v])) / l;
                    any = true;
                }
            }
        }
        if any {
            for &[a, b, c] in &self.faces {
                let g = d_raw[a] + d_raw[b] + d_raw[c];
                if g == Vec3::zeros() {
                    continue;
                }
                let e1 = self.x_cam[b] - self.x_cam[a];
                let e2 = self.x_cam[c] - self.x_cam[a];
                let g1 = e2.cross(&g);
                let g2 = g.cross(&e1);
                d_x[b] += g1;
                d_x[c] += g2;
                d_x[a] -= g1 + g2;
            }
        }
        RasterGrad { d_vertices: d_x, d_albedo }
    }
}

fn light_in_camera(cam: &Camera, settings: &RenderSettings) -> Vec3 {
    let l = Vec3::from(settings.light_dir);
    cam.world_to_camera_rotation() * (l / l.norm())
}

/// Forward rasterization of a mesh placed by a canonical-to-camera transform.
pub fn rasterize_object(mesh: &TexturedMesh, transform: &Mat4, cam: &Camera, settings: &RenderSettings, window: Window) -> Result<RenderOut> {
    settings.validate()?;
    if mesh.vertices.is_empty() || mesh.faces.is_empty() {
        return Ok(RenderOut::empty(cam, window));
    }
    if mesh.albedo.len() != mesh.vertices.len() {
        return Err(Error::DimensionMismatch { expected: mesh.vertices.len(), got: mesh.albedo.len() });
    }
    let x_cam = mesh.vertices.iter().map(|v| transform.transform_point(&(*v).into()).coords).collect();
    let topo = Topology::new(&mesh.faces);
    let (out, _) = raster(cam, x_cam, &mesh.faces, &topo, mesh.albedo.clone(), light_in_camera(cam, settings), settings, window);
    Ok(out)
}

/// Distance-ordered composite of several object renders.
#[derive(Debug, Clone, PartialEq)]
pub struct CompositeOut {
    pub image: Image,
    /// Per input object, full-frame non-occluded weights.
    pub gamma: Vec<Plane>,
    /// `min(Σ_p M_p, 1)`.
    pub foreground: Plane,
    /// Raw `Σ_p M_p`.
    pub mask_sum: Plane,
    /// Input indices sorted nearest first.
    pub order: Vec<usize>,
}

/// Nearer objects occlude: `γ_p = min(M_p, max(1 − Σ_{q nearer} M_q, 0))`,
/// `Î = Σ_p rgb_p ∘ γ_p`, so that `Σ_p γ_p = min(Σ_p M_p, 1)`.
pub fn composite_scene(renders: &[RenderOut], distances: &[f64]) -> Result<CompositeOut> {
    if renders.len() != distances.len() {
        return Err(invalid("one distance per render required"));
    }
    let (w, h) = match renders.first() {
        Some(r) => (r.frame_width, r.frame_height),
        None => return Err(invalid("composite of zero renders")),
    };
    if renders.iter().any(|r| r.frame_width != w || r.frame_height != h) {
        return Err(invalid("render resolutions differ"));
    }
    let mut order: Vec<usize> = (0..renders.len()).collect();
    order.sort_by(|&a, &b| distances[a].partial_cmp(&distances[b]).unwrap_or(core::cmp::Ordering::Equal).then(a.cmp(&b)));

    let mut image = Image::new(w, h);
    let mut occ = Plane::new(w, h, 0.0);
    let mut gamma = vec![Plane::new(w, h, 0.0); renders.len()];
    for &p in &order {
        let r = &renders[p];
        let win = r.window;
        for ly in 0..win.height {
            for lx in 0..win.width {
                let li = ly * win.width + lx;
                let m = r.mask[li];
                if m == 0.0 {
                    continue;
                }
                let gi = (ly + win.y0) * w + lx + win.x0;
                let g = m.min((1.0 - occ.data[gi]).max(0.0));
                occ.data[gi] += m;
                if g > 0.0 {
                    gamma[p].data[gi] = g;
                    for c in 0..3 {
                        image.data[3 * gi + c] += r.rgb[3 * li + c] * g;
                    }
                }
            }
        }
    }
    let foreground = Plane { width: w, height: h, data: occ.data.iter().map(|s| s.min(1.0)).collect() };
    Ok(CompositeOut { image, gamma, foreground, mask_sum: occ, order })
}

/// Gradient of a scalar loss w.r.t. one object's optimizable parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectGrad {
    pub shape: Vec<f64>,
    pub texture: Vec<f64>,
    pub translation: Vec3,
    pub rotation: Vec3,
    pub log_scale: f64,
}

impl ObjectGrad {
    pub fn is_finite(&self) -> bool {
        self.shape.iter().chain(&self.texture).all(|v| v.is_finite())
            && self.translation.iter().all(|v| v.is_finite())
            && self.rotation.iter().all(|v| v.is_finite())
            && self.log_scale.is_finite()
    }
}

/// Renders latent objects; owns the shared mesh topology.
#[derive(Debug, Clone)]
pub struct SceneRenderer<'g> {
    pub generator: &'g Generator,
    pub settings: RenderSettings,
    topo: Topology,
}

/// Forward result plus what the reverse pass needs.
#[derive(Debug, Clone)]
pub struct SceneRender {
    pub composite: CompositeOut,
    pub renders: Vec<RenderOut>,
    pub distances: Vec<f64>,
    tapes: Vec<RasterTape>,
    params: Vec<(LatentPair, ObjectNode)>,
    cam: Camera,
}

impl<'g> SceneRenderer<'g> {
    pub fn new(generator: &'g Generator, settings: RenderSettings) -> Result<Self> {
        settings.validate()?;
        Ok(Self { generator, settings, topo: Topology::new(generator.faces()) })
    }

    /// Render window for an object: a patch around its projected center, or the full frame.
    pub fn window_for(&self, node: &ObjectNode, cam: &Camera) -> Window {
        match self.settings.patch {
            None => Window::full(cam),
            Some(size) => {
                let c = cam.world_to_camera(&node.pose.t);
                let z = c.z.max(NEAR_PLANE);
                Window::centered(cam, cam.fx * c.x / z + cam.cx, cam.fy * c.y / z + cam.cy, size)
            }
        }
    }

    fn camera_vertices(&self, vertices: &[Vec3], node: &ObjectNode, cam: &Camera) -> Vec<Vec3> {
        let w = cam.world_to_camera_rotation();
        let r = node.pose.rotation();
        let m: Mat3 = w * r * node.scale;
        let off = w * (node.pose.t - cam.pose.t);
        vertices.iter().map(|v| m * v + off).collect()
    }

    pub fn render_object(&self, lat: &LatentPair, node: &ObjectNode, cam: &Camera, window: Window) -> Result<(RenderOut, RasterTape)> {
        self.generator.check(lat)?;
        if !(node.scale > 0.0) {
            return Err(invalid("object scale must be positive"));
        }
        let verts = self.generator.deform_shape(&lat.shape);
        let albedo = self.generator.shade_texture(&lat.texture);
        let x_cam = self.camera_vertices(&verts, node, cam);
        Ok(raster(cam, x_cam, self.generator.faces(), &self.topo, albedo, light_in_camera(cam, &self.settings), &self.settings, window))
    }

    /// Forward render of a multi-object scene, keeping the tape.
    pub fn render_scene(&self, objects: &[(LatentPair, ObjectNode)], cam: &Camera) -> Result<SceneRender> {
        if objects.is_empty() {
            return Err(invalid("render_scene needs at least one object"));
        }
        let mut renders = Vec::with_capacity(objects.len());
        let mut tapes = Vec::with_capacity(objects.len());
        let mut distances = Vec::with_capacity(objects.len());
        for (lat, node) in objects {
            let window = self.window_for(node, cam);
            let (r, t) = self.render_object(lat, node, cam, window)?;
            renders.push(r);
            tapes.push(t);
            distances.push(cam.world_to_camera(&node.pose.t).norm());
        }
        let composite = composite_scene(&renders, &distances)?;
        Ok(SceneRender { composite, renders, distances, tapes, params: objects.to_vec(), cam: *cam })
    }
}

impl SceneRender {
    /// Composites `renders` with this render's depth order and occluder sums
    /// held fixed: the function whose derivative [`SceneRender::backward`]
    /// returns. `renders` must reuse this render's windows.
    pub fn recomposite_frozen(&self, renders: &[RenderOut]) -> Result<CompositeOut> {
        if renders.len() != self.renders.len() {
            return Err(invalid("one render per object required"));
        }
        if renders.iter().zip(&self.renders).any(|(a, b)| a.window != b.window) {
            return Err(invalid("render windows differ"));
        }
        let (w, h) = (self.composite.image.width, self.composite.image.height);
        let mut image = Image::new(w, h);
        let mut occ = Plane::new(w, h, 0.0);
        let mut sum = Plane::new(w, h, 0.0);
        let mut gamma = vec![Plane::new(w, h, 0.0); renders.len()];
        for &p in &self.composite.order {
            let (base, r) = (&self.renders[p], &renders[p]);
            let win = r.window;
            for ly in 0..win.height {
                for lx in 0..win.width {
                    let li = ly * win.width + lx;
                    let gi = (ly + win.y0) * w + lx + win.x0;
                    let g = r.mask[li].min((1.0 - occ.data[gi]).max(0.0));
                    sum.data[gi] += r.mask[li];
                    occ.data[gi] += base.mask[li];
                    if g > 0.0 {
                        gamma[p].data[gi] = g;
                        for c in 0..3 {
                            image.data[3 * gi + c] += r.rgb[3 * li + c] * g;
                        }
                    }
                }
            }
        }
        let foreground = Plane { width: w, height: h, data: sum.data.iter().map(|s| s.min(1.0)).collect() };
        Ok(CompositeOut { image, gamma, foreground, mask_sum: sum, order: self.composite.order.clone() })
    }

    /// Pulls full-frame gradients w.r.t. the composite image (interleaved
    /// RGB) and the foreground mask back to every object's parameters.
    /// Occluder sums are held constant.
    pub fn backward(&self, renderer: &SceneRenderer<'_>, d_image: &[f64], d_foreground: &[f64]) -> Vec<ObjectGrad> {
        let fw = self.composite.image.width;
        let mut grads = Vec::with_capacity(self.renders.len());
        for (p, (r, tape)) in self.renders.iter().zip(&self.tapes).enumerate() {
            let win = r.window;
            let n = win.width * win.height;
            let mut d_rgb = vec![0.0; 3 * n];
            let mut d_mask = vec![0.0; n];
            let gamma = &self.composite.gamma[p];
            for ly in 0..win.height {
                for lx in 0..win.width {
                    let li = ly * win.width + lx;
                    let gi = (ly + win.y0) * fw + lx + win.x0;
                    let g = gamma.data[gi];
                    let gim = &d_image[3 * gi..3 * gi + 3];
                    let mut dm = 0.0;
                    if g > 0.0 {
                        // γ = M unless clipped by the nearer coverage
                        let open = g == r.mask[li];
                        for c in 0..3 {
                            d_rgb[3 * li + c] = gim[c] * g;
                            if open {
                                dm += gim[c] * r.rgb[3 * li + c];
                            }
                        }
                    }
                    if self.composite.mask_sum.data[gi] < 1.0 {
                        dm += d_foreground[gi];
                    }
                    d_mask[li] = dm;
                }
            }
            let rg = tape.backward(&d_rgb, &d_mask);
            grads.push(self.chain_to_params(renderer, p, &rg));
        }
        grads
    }

    fn chain_to_params(&self, renderer: &SceneRenderer<'_>, p: usize, rg: &RasterGrad) -> ObjectGrad {
        let (lat, node) = &self.params[p];
        let gen = renderer.generator;
        let w_t = self.cam.world_to_camera_rotation().transpose();
        let r = node.pose.rotation();
        let verts = gen.deform_shape(&lat.shape);
        let mut d_t = Vec3::zeros();
        let mut torque = Vec3::zeros();
        let mut d_s = 0.0;
        let mut d_v = Vec::with_capacity(verts.len());
        let r_t_s = r.transpose() * node.scale;
        for (v, g) in verts.iter().zip(&rg.d_vertices) {
            let h = w_t * g;
            let rv = r * v;
            d_t += h;
            torque += (rv * node.scale).cross(&h);
            d_s += h.dot(&rv);
            d_v.push(r_t_s * h);
        }
        ObjectGrad {
            shape: gen.shape_vjp(&d_v),
            texture: gen.texture_vjp(&lat.texture, &rg.d_albedo),
            translation: d_t,
            rotation: so3_left_jacobian(&node.pose.omega).transpose() * torque,
            log_scale: d_s * node.scale,
        }
    }
}
