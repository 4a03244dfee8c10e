//! Pinhole intrinsics, rigid poses and the quaternion algebra shared by the
//! renderer and its backward pass.
//!
//! Camera frames follow the usual vision convention: +x right, +y down, +z
//! forward. Pixel `(u, v)` samples the image plane at exactly `(u, v)`, so the
//! principal point of a `100x100` image is typically `(50, 50)`.

use nalgebra::{Matrix3, Quaternion, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraModel {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl CameraModel {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Result<Self> {
        let cam = Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        };
        cam.validate()?;
        Ok(cam)
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.fx, self.fy, self.cx, self.cy]
            .iter()
            .all(|v| v.is_finite());
        if !finite || self.fx <= 0.0 || self.fy <= 0.0 {
            return Err(Error::InvalidParameter(format!(
                "focal lengths must be positive and finite, got fx={} fy={}",
                self.fx, self.fy
            )));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::InvalidParameter("image size must be nonzero".into()));
        }
        if !(0.0..self.width as f64).contains(&self.cx) || !(0.0..self.height as f64).contains(&self.cy)
        {
            return Err(Error::InvalidParameter(format!(
                "principal point ({}, {}) outside {}x{} image",
                self.cx, self.cy, self.width, self.height
            )));
        }
        Ok(())
    }

    /// Camera-frame direction through pixel `(u, v)` with unit z component.
    #[inline]
    pub fn pixel_ray(&self, u: f64, v: f64) -> Vector3<f64> {
        Vector3::new((u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0)
    }

    /// `depth * K^-1 (u, v, 1)`.
    #[inline]
    pub fn backproject(&self, u: f64, v: f64, depth: f64) -> Vector3<f64> {
        self.pixel_ray(u, v) * depth
    }

    /// Pinhole projection of a camera-frame point; `None` behind the image plane.
    #[inline]
    pub fn project(&self, p: &Vector3<f64>) -> Option<[f64; 2]> {
        if p.z <= 0.0 {
            return None;
        }
        Some([self.fx * p.x / p.z + self.cx, self.fy * p.y / p.z + self.cy])
    }

    /// True when `(u, v)` lies within the pixel-center grid `[0, w-1] x [0, h-1]`.
    #[inline]
    pub fn contains(&self, u: f64, v: f64) -> bool {
        u >= 0.0 && v >= 0.0 && u <= (self.width - 1) as f64 && v <= (self.height - 1) as f64
    }
}

/// Rigid world<-camera transform.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub rotation: UnitQuaternion<f64>,
    pub translation: Vector3<f64>,
}

const UNIT_NORM_TOL: f64 = 1e-9;
const RENORMALIZE_TOL: f64 = 1e-6;

impl Pose {
    pub fn identity() -> Self {
        Self {
            rotation: UnitQuaternion::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn new(rotation: UnitQuaternion<f64>, translation: Vector3<f64>) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    pub fn from_translation(t: Vector3<f64>) -> Self {
        Self::new(UnitQuaternion::identity(), t)
    }

    /// Builds a pose from raw quaternion components. Inputs within 1e-9 of
    /// unit norm are kept bit-for-bit; slightly drifted inputs (text files
    /// with truncated digits) are renormalized; anything else is rejected.
    pub fn from_components(t: [f64; 3], qx: f64, qy: f64, qz: f64, qw: f64) -> Result<Self> {
        let q = Quaternion::new(qw, qx, qy, qz);
        let all = [t[0], t[1], t[2], qx, qy, qz, qw];
        if all.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter("non-finite pose component".into()));
        }
        let norm = q.norm();
        let rotation = if (norm - 1.0).abs() <= UNIT_NORM_TOL {
            UnitQuaternion::new_unchecked(q)
        } else if (norm - 1.0).abs() <= RENORMALIZE_TOL {
            UnitQuaternion::new_normalize(q)
        } else {
            return Err(Error::InvalidParameter(format!(
                "pose quaternion norm {norm} is not unit"
            )));
        };
        Ok(Self::new(rotation, Vector3::from(t)))
    }

    /// Camera pose at `eye` looking at `target`; `up` is the approximate
    /// world direction that should appear upward in the image.
    pub fn look_at(eye: Vector3<f64>, target: Vector3<f64>, up: Vector3<f64>) -> Result<Self> {
        let forward = (target - eye)
            .try_normalize(1e-12)
            .ok_or_else(|| Error::InvalidParameter("look_at: eye equals target".into()))?;
        let right = forward
            .cross(&up)
            .try_normalize(1e-12)
            .ok_or_else(|| Error::InvalidParameter("look_at: up parallel to view".into()))?;
        let down = forward.cross(&right);
        let m = Matrix3::from_columns(&[right, down, forward]);
        let rot = nalgebra::Rotation3::from_matrix_unchecked(m);
        Ok(Self::new(UnitQuaternion::from_rotation_matrix(&rot), eye))
    }

    #[inline]
    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        quat_to_matrix(&self.rotation)
    }

    #[inline]
    pub fn center(&self) -> Vector3<f64> {
        self.translation
    }

    #[inline]
    pub fn to_world(&self, p_cam: &Vector3<f64>) -> Vector3<f64> {
        self.rotation_matrix() * p_cam + self.translation
    }

    #[inline]
    pub fn to_camera(&self, p_world: &Vector3<f64>) -> Vector3<f64> {
        self.rotation_matrix().transpose() * (p_world - self.translation)
    }

    pub fn inverse(&self) -> Self {
        let inv = self.rotation.inverse();
        Self::new(inv, -(inv * self.translation))
    }

    /// `self * other`: apply `other` first.
    pub fn compose(&self, other: &Pose) -> Self {
        Self::new(
            self.rotation * other.rotation,
            self.rotation * other.translation + self.translation,
        )
    }

    pub fn is_finite(&self) -> bool {
        self.translation.iter().all(|v| v.is_finite())
            && self.rotation.coords.iter().all(|v| v.is_finite())
    }
}

/// Precomputed world->camera transform used in hot loops.
#[derive(Clone, Copy, Debug)]
pub struct CameraView {
    /// world<-camera rotation.
    pub cam_to_world: Matrix3<f64>,
    /// camera<-world rotation (transpose of the above).
    pub world_to_cam: Matrix3<f64>,
    pub center: Vector3<f64>,
}

impl CameraView {
    pub fn new(pose: &Pose) -> Self {
        let r = pose.rotation_matrix();
        Self {
            cam_to_world: r,
            world_to_cam: r.transpose(),
            center: pose.translation,
        }
    }

    #[inline]
    pub fn to_camera(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.world_to_cam * (p - self.center)
    }

    #[inline]
    pub fn to_world(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.cam_to_world * p + self.center
    }
}

/// Rotation matrix of a unit quaternion.
#[inline]
pub fn quat_to_matrix(q: &UnitQuaternion<f64>) -> Matrix3<f64> {
    let (w, x, y, z) = (q.w, q.i, q.j, q.k);
    Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

/// Pulls `dL/dR` back to the raw quaternion components `(w, x, y, z)`,
/// including the Jacobian of the normalization `q / |q|` evaluated at a unit
/// quaternion (a projection onto the tangent space).
pub fn quat_to_matrix_backward(q: &UnitQuaternion<f64>, g: &Matrix3<f64>) -> [f64; 4] {
    let (w, x, y, z) = (q.w, q.i, q.j, q.k);
    let gw = 2.0 * (-z * g[(0, 1)] + y * g[(0, 2)] + z * g[(1, 0)] - x * g[(1, 2)] - y * g[(2, 0)]
        + x * g[(2, 1)]);
    let gx = 2.0
        * (y * g[(0, 1)] + z * g[(0, 2)] + y * g[(1, 0)] - 2.0 * x * g[(1, 1)] - w * g[(1, 2)]
            + z * g[(2, 0)]
            + w * g[(2, 1)]
            - 2.0 * x * g[(2, 2)]);
    let gy = 2.0
        * (-2.0 * y * g[(0, 0)] + x * g[(0, 1)] + w * g[(0, 2)] + x * g[(1, 0)] + z * g[(1, 2)]
            - w * g[(2, 0)]
            + z * g[(2, 1)]
            - 2.0 * y * g[(2, 2)]);
    let gz = 2.0
        * (-2.0 * z * g[(0, 0)] - w * g[(0, 1)] + x * g[(0, 2)] + w * g[(1, 0)]
            - 2.0 * z * g[(1, 1)]
            + y * g[(1, 2)]
            + x * g[(2, 0)]
            + y * g[(2, 1)]);
    let dot = w * gw + x * gx + y * gy + z * gz;
    [gw - w * dot, gx - x * dot, gy - y * dot, gz - z * dot]
}
