//! Latent generative object model: a pair of disentangled embeddings
//! (shape, texture) mapped to a textured triangle mesh in canonical units.
//!
//! The shape branch is linear in the shape embedding: a vehicle-proportioned
//! rounded-box template plus a fixed basis of smooth, low-frequency
//! displacement fields drawn from a seeded spectrum. The texture branch is a
//! per-vertex sigmoid field driven only by the texture embedding and the
//! template surface, so shape never leaks into albedo and vice versa.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;
use core::fmt::Write;

use nalgebra::DMatrix;
#[allow(unused_imports)]
use num_traits::Float;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::{sigmoid, Vec3};

/// Full canonical extents (length, width, height) of the template.
pub const TEMPLATE_EXTENTS: [f64; 3] = [1.0, 0.42, 0.36];

/// Largest per-vertex displacement gain `max_v ‖B_v‖₂`; keeps every vertex
/// inside `[−0.8, 0.8]³` for `‖z_S‖₂ ≤ 2`.
const VERTEX_GAIN: f64 = 0.15;

/// Superellipsoid exponent of the rounded template.
const ROUNDNESS: f64 = 6.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PriorConfig {
    pub shape_dim: usize,
    pub texture_dim: usize,
    pub basis_seed: u64,
    /// Lattice cells per template edge.
    pub subdivision: usize,
}

impl Default for PriorConfig {
    fn default() -> Self {
        Self { shape_dim: 8, texture_dim: 12, basis_seed: 0x6e7, subdivision: 9 }
    }
}

/// Shape and texture embeddings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentPair {
    pub shape: Vec<f64>,
    pub texture: Vec<f64>,
}

impl LatentPair {
    pub fn zeros(cfg: &PriorConfig) -> Self {
        Self { shape: vec![0.0; cfg.shape_dim], texture: vec![0.0; cfg.texture_dim] }
    }

    pub fn is_finite(&self) -> bool {
        self.shape.iter().chain(&self.texture).all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TexturedMesh {
    pub vertices: Vec<Vec3>,
    pub faces: Vec<[usize; 3]>,
    pub albedo: Vec<Vec3>,
}

impl TexturedMesh {
    /// Axis-aligned cube of side 1 centered at the origin, outward winding.
    pub fn unit_cube(albedo: Vec3) -> Self {
        let mut vertices = Vec::with_capacity(8);
        for i in 0..8 {
            let c = |b: usize| if i >> b & 1 == 1 { 0.5 } else { -0.5 };
            vertices.push(Vec3::new(c(0), c(1), c(2)));
        }
        let faces = vec![
            [0, 2, 3], [0, 3, 1], // -z
            [4, 5, 7], [4, 7, 6], // +z
            [0, 1, 5], [0, 5, 4], // -y
            [2, 6, 7], [2, 7, 3], // +y
            [0, 4, 6], [0, 6, 2], // -x
            [1, 3, 7], [1, 7, 5], // +x
        ];
        Self { albedo: vec![albedo; 8], vertices, faces }
    }

    pub fn triangle_area(&self, f: usize) -> f64 {
        let [a, b, c] = self.faces[f];
        0.5 * (self.vertices[b] - self.vertices[a]).cross(&(self.vertices[c] - self.vertices[a])).norm()
    }

    pub fn min_triangle_area(&self) -> f64 {
        (0..self.faces.len()).map(|f| self.triangle_area(f)).fold(f64::INFINITY, f64::min)
    }

    /// Signed enclosed volume; positive for outward-wound closed meshes.
    pub fn signed_volume(&self) -> f64 {
        self.faces
            .iter()
            .map(|&[a, b, c]| self.vertices[a].dot(&self.vertices[b].cross(&self.vertices[c])) / 6.0)
            .sum()
    }

    /// Wavefront OBJ text with per-vertex colors (`v x y z r g b`).
    pub fn to_obj(&self) -> String {
        let mut s = String::new();
        for (v, a) in self.vertices.iter().zip(&self.albedo) {
            let _ = writeln!(s, "v {:.6} {:.6} {:.6} {:.4} {:.4} {:.4}", v.x, v.y, v.z, a.x, a.y, a.z);
        }
        for f in &self.faces {
            let _ = writeln!(s, "f {} {} {}", f[0] + 1, f[1] + 1, f[2] + 1);
        }
        s
    }
}

/// Area-weighted vertex normals (unit length).
pub fn vertex_normals(vertices: &[Vec3], faces: &[[usize; 3]]) -> Vec<Vec3> {
    let mut acc = vec![Vec3::zeros(); vertices.len()];
    for &[a, b, c] in faces {
        let n = (vertices[b] - vertices[a]).cross(&(vertices[c] - vertices[a]));
        acc[a] += n;
        acc[b] += n;
        acc[c] += n;
    }
    acc.into_iter()
        .map(|n| {
            let l = n.norm();
            if l > 0.0 { n / l } else { n }
        })
        .collect()
}

/// A random smooth scalar field over `[−1, 1]³`.
#[derive(Debug, Clone)]
struct Wave {
    terms: [(Vec3, f64, f64); 3],
}

impl Wave {
    fn sample(rng: &mut ChaCha8Rng) -> Self {
        let mut term = || {
            let mut f = Vec3::zeros();
            while f == Vec3::zeros() {
                for i in 0..3 {
                    f[i] = rng.random_range(0..2) as f64;
                }
            }
            let amp: f64 = StandardNormal.sample(rng);
            let phase = rng.random_range(0.0..2.0 * PI);
            (f * PI * 0.5, amp, phase)
        };
        Self { terms: [term(), term(), term()] }
    }

    fn eval(&self, q: &Vec3) -> f64 {
        self.terms.iter().map(|(f, a, p)| a * (f.dot(q) + p).cos()).sum()
    }
}

/// The object generator `G(z_S, z_T)`. Immutable after construction.
#[derive(Debug, Clone)]
pub struct Generator {
    cfg: PriorConfig,
    template: Vec<Vec3>,
    faces: Vec<[usize; 3]>,
    /// `(3 * v + axis) * shape_dim + k`
    shape_basis: Vec<f64>,
    /// `(v * spatial + k) * 3 + channel`, `spatial = texture_dim − 3`
    texture_basis: Vec<f64>,
    lipschitz: f64,
}

impl Generator {
    pub fn new(cfg: PriorConfig) -> Result<Self> {
        if cfg.shape_dim == 0 {
            return Err(invalid("shape_dim must be at least 1"));
        }
        if cfg.texture_dim < 3 {
            return Err(invalid("texture_dim must be at least 3"));
        }
        if cfg.subdivision < 2 {
            return Err(invalid("subdivision must be at least 2"));
        }
        let (template, faces) = rounded_box(cfg.subdivision);
        let normals = vertex_normals(&template, &faces);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.basis_seed);
        let half = Vec3::new(TEMPLATE_EXTENTS[0], TEMPLATE_EXTENTS[1], TEMPLATE_EXTENTS[2]) * 0.5;
        let unit = |p: &Vec3| p.component_div(&half);

        let nv = template.len();
        let ds = cfg.shape_dim;
        let fields: Vec<[Wave; 3]> = (0..ds)
            .map(|_| [Wave::sample(&mut rng), Wave::sample(&mut rng), Wave::sample(&mut rng)])
            .collect();
        let mut shape_basis = vec![0.0; 3 * nv * ds];
        for (v, p) in template.iter().enumerate() {
            let q = unit(p);
            for (k, f) in fields.iter().enumerate() {
                for axis in 0..3 {
                    // stretch along each axis; keeps the template star-shaped
                    shape_basis[(3 * v + axis) * ds + k] = p[axis] * f[axis].eval(&q);
                }
            }
        }
        let max_gain = (0..nv)
            .map(|v| {
                let block = DMatrix::from_row_slice(3, ds, &shape_basis[3 * v * ds..3 * (v + 1) * ds]);
                spectral_norm(&block)
            })
            .fold(0.0, f64::max);
        if max_gain > 0.0 {
            let s = VERTEX_GAIN / max_gain;
            shape_basis.iter_mut().for_each(|b| *b *= s);
        }
        let lipschitz = spectral_norm(&DMatrix::from_row_slice(3 * nv, ds, &shape_basis));

        let spatial = cfg.texture_dim - 3;
        let tex_fields: Vec<(Wave, Vec3, [f64; 3])> = (0..spatial)
            .map(|_| {
                let w = Wave::sample(&mut rng);
                let d: [f64; 3] = [
                    StandardNormal.sample(&mut rng),
                    StandardNormal.sample(&mut rng),
                    StandardNormal.sample(&mut rng),
                ];
                let mut mix = [0.0; 3];
                for m in &mut mix {
                    let g: f64 = StandardNormal.sample(&mut rng);
                    *m = 1.0 + 0.3 * g;
                }
                (w, Vec3::new(d[0], d[1], d[2]).normalize(), mix)
            })
            .collect();
        let mut texture_basis = vec![0.0; nv * spatial * 3];
        for v in 0..nv {
            let q = unit(&template[v]);
            for (k, (w, d, mix)) in tex_fields.iter().enumerate() {
                let h = 0.2 * w.eval(&q) + 0.4 * normals[v].dot(d);
                for c in 0..3 {
                    texture_basis[(v * spatial + k) * 3 + c] = h * mix[c];
                }
            }
        }

        Ok(Self { cfg, template, faces, shape_basis, texture_basis, lipschitz })
    }

    pub fn config(&self) -> &PriorConfig {
        &self.cfg
    }

    pub fn vertex_count(&self) -> usize {
        self.template.len()
    }

    pub fn faces(&self) -> &[[usize; 3]] {
        &self.faces
    }

    pub fn template(&self) -> &[Vec3] {
        &self.template
    }

    /// `‖B‖₂`, a Lipschitz bound of the shape branch.
    pub fn lipschitz(&self) -> f64 {
        self.lipschitz
    }

    /// Column `k` of the shape basis, one displacement per vertex.
    pub fn shape_basis_column(&self, k: usize) -> Vec<Vec3> {
        let ds = self.cfg.shape_dim;
        (0..self.template.len())
            .map(|v| {
                Vec3::new(
                    self.shape_basis[(3 * v) * ds + k],
                    self.shape_basis[(3 * v + 1) * ds + k],
                    self.shape_basis[(3 * v + 2) * ds + k],
                )
            })
            .collect()
    }

    pub fn check(&self, lat: &LatentPair) -> Result<()> {
        if lat.shape.len() != self.cfg.shape_dim {
            return Err(Error::DimensionMismatch { expected: self.cfg.shape_dim, got: lat.shape.len() });
        }
        if lat.texture.len() != self.cfg.texture_dim {
            return Err(Error::DimensionMismatch { expected: self.cfg.texture_dim, got: lat.texture.len() });
        }
        Ok(())
    }

    pub fn generate_mesh(&self, lat: &LatentPair) -> Result<TexturedMesh> {
        self.check(lat)?;
        Ok(TexturedMesh {
            vertices: self.deform_shape(&lat.shape),
            faces: self.faces.clone(),
            albedo: self.shade_texture(&lat.texture),
        })
    }

    /// `template + B z_S`. Extra or missing components are ignored / zero.
    pub fn deform_shape(&self, z_s: &[f64]) -> Vec<Vec3> {
        let ds = self.cfg.shape_dim;
        let n = ds.min(z_s.len());
        self.template
            .iter()
            .enumerate()
            .map(|(v, p)| {
                let mut out = *p;
                for axis in 0..3 {
                    let row = &self.shape_basis[(3 * v + axis) * ds..(3 * v + axis) * ds + n];
                    out[axis] += row.iter().zip(z_s).map(|(b, z)| b * z).sum::<f64>();
                }
                out
            })
            .collect()
    }

    /// Pulls a per-vertex gradient back onto the shape embedding: `Bᵀ g`.
    pub fn shape_vjp(&self, d_vertices: &[Vec3]) -> Vec<f64> {
        let ds = self.cfg.shape_dim;
        let mut out = vec![0.0; ds];
        for (v, g) in d_vertices.iter().enumerate() {
            for axis in 0..3 {
                let row = &self.shape_basis[(3 * v + axis) * ds..(3 * v + axis + 1) * ds];
                for (o, b) in out.iter_mut().zip(row) {
                    *o += b * g[axis];
                }
            }
        }
        out
    }

    fn albedo_logits(&self, v: usize, z_t: &[f64]) -> Vec3 {
        let spatial = self.cfg.texture_dim - 3;
        let mut l = Vec3::new(z_t[0], z_t[1], z_t[2]);
        for k in 0..spatial {
            let z = z_t[3 + k];
            if z != 0.0 {
                let base = (v * spatial + k) * 3;
                for c in 0..3 {
                    l[c] += z * self.texture_basis[base + c];
                }
            }
        }
        l
    }

    /// Per-vertex albedo: `sigmoid(z_T[c] + Σ_k z_T[3+k] h_{k,c}(p, n))`,
    /// with `h` fixed smooth fields over the template surface.
    pub fn shade_texture(&self, z_t: &[f64]) -> Vec<Vec3> {
        (0..self.template.len())
            .map(|v| self.albedo_logits(v, z_t).map(sigmoid))
            .collect()
    }

    /// Pulls a per-vertex albedo gradient back onto the texture embedding.
    pub fn texture_vjp(&self, z_t: &[f64], d_albedo: &[Vec3]) -> Vec<f64> {
        let spatial = self.cfg.texture_dim - 3;
        let mut out = vec![0.0; self.cfg.texture_dim];
        for (v, g) in d_albedo.iter().enumerate() {
            if *g == Vec3::zeros() {
                continue;
            }
            let a = self.albedo_logits(v, z_t).map(sigmoid);
            let dl = Vec3::new(g.x * a.x * (1.0 - a.x), g.y * a.y * (1.0 - a.y), g.z * a.z * (1.0 - a.z));
            for c in 0..3 {
                out[c] += dl[c];
            }
            for k in 0..spatial {
                let base = (v * spatial + k) * 3;
                out[3 + k] += (0..3).map(|c| dl[c] * self.texture_basis[base + c]).sum::<f64>();
            }
        }
        out
    }
}

fn spectral_norm(m: &DMatrix<f64>) -> f64 {
    let gram = m.transpose() * m;
    let eig = gram.symmetric_eigenvalues();
    eig.iter().fold(0.0f64, |a, &b| a.max(b)).sqrt()
}

/// Closed rounded box: the surface lattice of an `n`-cube projected onto a
/// superellipsoid and scaled to [`TEMPLATE_EXTENTS`].
fn rounded_box(n: usize) -> (Vec<Vec3>, Vec<[usize; 3]>) {
    let m = n + 1;
    let mut index = vec![usize::MAX; m * m * m];
    let mut verts = Vec::new();
    let key = |i: usize, j: usize, k: usize| (i * m + j) * m + k;
    let mut id = |i: usize, j: usize, k: usize, verts: &mut Vec<Vec3>| {
        let slot = &mut index[key(i, j, k)];
        if *slot == usize::MAX {
            let c = Vec3::new(i as f64, j as f64, k as f64) * (2.0 / n as f64) - Vec3::repeat(1.0);
            let pn = c.iter().map(|x| x.abs().powf(ROUNDNESS)).sum::<f64>().powf(1.0 / ROUNDNESS);
            verts.push(c / pn);
            *slot = verts.len() - 1;
        }
        *slot
    };
    let mut faces = Vec::new();
    for axis in 0..3 {
        let (u, w) = ((axis + 1) % 3, (axis + 2) % 3);
        for side in [0, n] {
            for a in 0..n {
                for b in 0..n {
                    let mut corner = |da: usize, db: usize| {
                        let mut ijk = [0usize; 3];
                        ijk[axis] = side;
                        ijk[u] = a + da;
                        ijk[w] = b + db;
                        id(ijk[0], ijk[1], ijk[2], &mut verts)
                    };
                    let (p00, p10, p11, p01) = (corner(0, 0), corner(1, 0), corner(1, 1), corner(0, 1));
                    // e_u × e_w = +e_axis, so this winding faces outward on the max side
                    if side == n {
                        faces.push([p00, p10, p11]);
                        faces.push([p00, p11, p01]);
                    } else {
                        faces.push([p00, p11, p10]);
                        faces.push([p00, p01, p11]);
                    }
                }
            }
        }
    }
    let mut max = Vec3::zeros();
    for v in &verts {
        for i in 0..3 {
            max[i] = max[i].max(v[i].abs());
        }
    }
    for v in &mut verts {
        for i in 0..3 {
            v[i] *= 0.5 * TEMPLATE_EXTENTS[i] / max[i];
        }
    }
    (verts, faces)
}
