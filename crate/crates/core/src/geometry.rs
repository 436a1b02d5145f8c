//! Rigid-body math: so(3) exponential/logarithm, object and camera poses,
//! the scaled object-to-camera transform and pinhole projection.
//!
//! Conventions: right-handed frames. The world frame is x forward, y left,
//! z up; object yaw is the rotation about world z. Cameras look down their
//! own +z axis with +y pointing down the image and the pixel origin at the
//! top-left corner.

#[allow(unused_imports)]
use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::{Mat3, Mat4, Vec3};

/// Geometry in front of this camera-space depth (meters) is rendered.
pub const NEAR_PLANE: f64 = 0.1;

const SMALL_ANGLE: f64 = 1e-6;

/// Skew-symmetric matrix with `hat(a) * b == a.cross(&b)`.
pub fn hat(w: &Vec3) -> Mat3 {
    Mat3::new(0.0, -w.z, w.y, w.z, 0.0, -w.x, -w.y, w.x, 0.0)
}

fn vee(m: &Mat3) -> Vec3 {
    Vec3::new(m[(2, 1)] - m[(1, 2)], m[(0, 2)] - m[(2, 0)], m[(1, 0)] - m[(0, 1)])
}

/// Rodrigues' formula, with a second-order series below 1e-6 rad.
pub fn so3_exp(omega: &Vec3) -> Result<Mat3> {
    if !omega.iter().all(|c| c.is_finite()) {
        return Err(invalid("so3_exp: non-finite rotation vector"));
    }
    Ok(so3_exp_unchecked(omega))
}

pub(crate) fn so3_exp_unchecked(omega: &Vec3) -> Mat3 {
    let theta2 = omega.norm_squared();
    let theta = theta2.sqrt();
    let k = hat(omega);
    let (a, b) = if theta < SMALL_ANGLE {
        (1.0 - theta2 / 6.0, 0.5 - theta2 / 24.0)
    } else {
        (theta.sin() / theta, (1.0 - theta.cos()) / theta2)
    };
    Mat3::identity() + k * a + k * k * b
}

/// Inverse of [`so3_exp`] on the principal branch, `‖ω‖ ∈ [0, π]`.
pub fn so3_log(r: &Mat3) -> Result<Vec3> {
    if !r.iter().all(|c| c.is_finite()) {
        return Err(invalid("so3_log: non-finite matrix"));
    }
    let err = (r.transpose() * r - Mat3::identity()).abs().max();
    if err > 1e-6 || r.determinant() < 0.0 {
        return Err(invalid("so3_log: matrix is not a rotation"));
    }
    Ok(so3_log_unchecked(r))
}

pub(crate) fn so3_log_unchecked(r: &Mat3) -> Vec3 {
    let v = vee(r);
    let sin2 = v.norm(); // 2 sin θ
    let cos = 0.5 * (r.trace() - 1.0);
    let theta = (0.5 * sin2).atan2(cos);
    if theta < SMALL_ANGLE {
        // θ / (2 sin θ) ≈ ½ (1 + θ²/6)
        return v * (0.5 * (1.0 + theta * theta / 6.0));
    }
    if theta > core::f64::consts::PI - 1e-3 {
        // (R + Rᵀ)/2 − cos θ·I = (1 − cos θ) a aᵀ
        let s = (r + r.transpose()) * 0.5 - Mat3::identity() * cos;
        let mut k = 0;
        for i in 1..3 {
            if s[(i, i)] > s[(k, k)] {
                k = i;
            }
        }
        let mut axis: Vec3 = s.column(k).into();
        axis /= axis.norm();
        if axis.dot(&v) < 0.0 {
            axis = -axis;
        }
        return axis * theta;
    }
    v * (theta / sin2)
}

/// Left Jacobian of SO(3): `exp(ω + δ) ≈ exp(J_l(ω) δ) · exp(ω)`.
pub fn so3_left_jacobian(omega: &Vec3) -> Mat3 {
    let theta2 = omega.norm_squared();
    let theta = theta2.sqrt();
    let k = hat(omega);
    let (a, b) = if theta < 1e-4 {
        (0.5 - theta2 / 24.0, 1.0 / 6.0 - theta2 / 120.0)
    } else {
        (
            (1.0 - theta.cos()) / theta2,
            (theta - theta.sin()) / (theta2 * theta),
        )
    };
    Mat3::identity() + k * a + k * k * b
}

/// Wraps an angle to `(−π, π]`.
pub fn wrap_angle(a: f64) -> f64 {
    use core::f64::consts::PI;
    let mut w = a % (2.0 * PI);
    if w <= -PI {
        w += 2.0 * PI;
    } else if w > PI {
        w -= 2.0 * PI;
    }
    w
}

/// Rigid transform from a local frame into the reference (world) frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    /// Translation in meters.
    pub t: Vec3,
    /// Rotation as an axis-angle vector in radians.
    pub omega: Vec3,
}

impl Default for Pose {
    fn default() -> Self {
        Self::identity()
    }
}

impl Pose {
    pub fn identity() -> Self {
        Self { t: Vec3::zeros(), omega: Vec3::zeros() }
    }

    pub fn new(t: Vec3, omega: Vec3) -> Self {
        Self { t, omega }
    }

    /// Pose with a heading about world z.
    pub fn from_yaw(t: Vec3, yaw: f64) -> Self {
        Self { t, omega: Vec3::new(0.0, 0.0, wrap_angle(yaw)) }
    }

    pub fn from_rotation(t: Vec3, r: &Mat3) -> Result<Self> {
        Ok(Self { t, omega: so3_log(r)? })
    }

    pub fn rotation(&self) -> Mat3 {
        so3_exp_unchecked(&self.omega)
    }

    /// Rotation vector mapped back onto the principal branch.
    pub fn canonical_omega(&self) -> Vec3 {
        so3_log_unchecked(&self.rotation())
    }

    /// Heading: z component of the canonicalized rotation vector.
    pub fn yaw(&self) -> f64 {
        self.canonical_omega().z
    }

    pub fn matrix(&self) -> Mat4 {
        let mut m = Mat4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation());
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.t);
        m
    }

    pub fn inverse(&self) -> Pose {
        let r = self.rotation();
        Pose { t: -(r.transpose() * self.t), omega: -self.omega }
    }

    pub fn transform_point(&self, p: &Vec3) -> Vec3 {
        self.rotation() * p + self.t
    }
}

/// Pinhole camera with zero skew. `pose` maps camera coordinates to world.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    pub pose: Pose,
}

/// Rotation taking camera axes (right, down, forward) to world axes
/// (forward, left, up) for a camera looking along world +x.
pub fn forward_camera_rotation() -> Mat3 {
    Mat3::new(0.0, 0.0, 1.0, -1.0, 0.0, 0.0, 0.0, -1.0, 0.0)
}

impl Camera {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize, pose: Pose) -> Result<Self> {
        let cam = Self { fx, fy, cx, cy, width, height, pose };
        cam.validate()?;
        Ok(cam)
    }

    /// Camera at height `mount_height` above the world origin looking along
    /// world +x, principal point at the image center.
    pub fn forward_facing(width: usize, height: usize, focal: f64, mount_height: f64) -> Result<Self> {
        let pose = Pose::from_rotation(Vec3::new(0.0, 0.0, mount_height), &forward_camera_rotation())?;
        Self::new(focal, focal, width as f64 / 2.0, height as f64 / 2.0, width, height, pose)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(invalid("camera focal lengths must be positive"));
        }
        if self.width == 0 || self.height == 0 {
            return Err(invalid("camera resolution must be non-zero"));
        }
        if !(self.cx >= 0.0 && self.cx < self.width as f64 && self.cy >= 0.0 && self.cy < self.height as f64) {
            return Err(invalid("principal point outside the image"));
        }
        Ok(())
    }

    pub fn intrinsics(&self) -> Mat3 {
        Mat3::new(self.fx, 0.0, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0)
    }

    /// Rotation taking world vectors into the camera frame.
    pub fn world_to_camera_rotation(&self) -> Mat3 {
        self.pose.rotation().transpose()
    }

    pub fn world_to_camera(&self, p: &Vec3) -> Vec3 {
        self.world_to_camera_rotation() * (p - self.pose.t)
    }

    /// True if a world point projects inside the image in front of the near plane.
    pub fn sees(&self, p_world: &Vec3) -> bool {
        let pr = project_point(self, &self.world_to_camera(p_world));
        pr.in_front
            && pr.u >= 0.0
            && pr.v >= 0.0
            && pr.u < self.width as f64
            && pr.v < self.height as f64
    }
}

/// An object placed in the scene at a uniform scale (meters per canonical unit).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectNode {
    pub pose: Pose,
    pub scale: f64,
}

impl ObjectNode {
    pub fn new(pose: Pose, scale: f64) -> Result<Self> {
        if !(scale > 0.0) {
            return Err(invalid("object scale must be positive"));
        }
        Ok(Self { pose, scale })
    }
}

fn scale_matrix(s: f64) -> Mat4 {
    Mat4::new_nonuniform_scaling(&Vec3::new(s, s, s))
}

/// Homogeneous transform from canonical object coordinates to camera
/// coordinates: `T_c⁻¹ · T_p · diag(s, s, s, 1)`.
pub fn object_to_camera(obj: &ObjectNode, cam: &Camera) -> Result<Mat4> {
    if !(obj.scale > 0.0) {
        return Err(invalid("object scale must be positive"));
    }
    Ok(cam.pose.inverse().matrix() * obj.pose.matrix() * scale_matrix(obj.scale))
}

/// Inverse of [`object_to_camera`]: `diag(1/s) · T_p⁻¹ · T_c` with the
/// scaling applied to the whole upper 3×4 block, so the translation column
/// is expressed in canonical units.
pub fn camera_to_canonical(obj: &ObjectNode, cam: &Camera) -> Result<Mat4> {
    if !(obj.scale > 0.0) {
        return Err(invalid("object scale must be positive"));
    }
    let mut m = obj.pose.inverse().matrix() * cam.pose.matrix();
    let inv = 1.0 / obj.scale;
    for r in 0..3 {
        for c in 0..4 {
            m[(r, c)] *= inv;
        }
    }
    Ok(m)
}

/// Pixel position and depth of a camera-space point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projection {
    pub u: f64,
    pub v: f64,
    pub depth: f64,
    /// False for points at or behind the near plane; `u`, `v` are then meaningless.
    pub in_front: bool,
}

pub fn project_point(cam: &Camera, x: &Vec3) -> Projection {
    let in_front = x.z > NEAR_PLANE;
    let z = if in_front { x.z } else { NEAR_PLANE };
    Projection {
        u: cam.fx * x.x / z + cam.cx,
        v: cam.fy * x.y / z + cam.cy,
        depth: x.z,
        in_front,
    }
}
