//! Analysis-by-synthesis 3D multi-object tracking.
//!
//! Objects are represented by a latent generative prior (shape and texture
//! embeddings mapped to a textured mesh). Each frame, the latents and poses
//! of all detected objects are refined by rendering the multi-object scene
//! with a soft differentiable rasterizer and descending an image loss. The
//! refined objects are then associated across frames with a Kalman filter,
//! a weighted box/latent/centroid affinity and the Hungarian algorithm.
//!
//! The crate is `no_std` (it needs `alloc`). File formats, image IO and the
//! command-line driver live in the `irtrack` crate.
#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod error;
pub mod fitting;
pub mod geometry;
pub mod image;
pub mod metrics;
pub mod prior;
pub mod renderer;
pub mod synth;
pub mod tracker;

pub use error::{Error, Result};

/// 3-vector of `f64`.
pub type Vec3 = nalgebra::Vector3<f64>;
/// 3×3 matrix of `f64`.
pub type Mat3 = nalgebra::Matrix3<f64>;
/// 4×4 matrix of `f64`.
pub type Mat4 = nalgebra::Matrix4<f64>;

pub(crate) fn sigmoid(x: f64) -> f64 {
    #[allow(unused_imports)]
    use num_traits::Float;
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
