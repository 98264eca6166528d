//! Vectors, quaternions, pinhole cameras and rays.
//!
//! Conventions: right-handed world with +y up; the camera looks down its
//! local +z axis with +x to the right and +y pointing down the image, so
//! image `v` grows downward. Pixel `(i, j)` covers `[i, i+1) x [j, j+1)` and
//! is sampled at its center `(i + 0.5, j + 0.5)`.

use nalgebra::{Matrix3, Matrix4, Vector3, Vector4};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;

/// Unit quaternion `w + xi + yj + zk`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct UnitQuat {
    pub w: f64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl UnitQuat {
    pub const IDENTITY: UnitQuat = UnitQuat {
        w: 1.0,
        x: 0.0,
        y: 0.0,
        z: 0.0,
    };

    /// Normalizes the given components; a zero (or non-finite) quaternion
    /// falls back to the identity.
    pub fn new(w: f64, x: f64, y: f64, z: f64) -> Self {
        let n = (w * w + x * x + y * y + z * z).sqrt();
        if !(n.is_finite() && n > 0.0) {
            return Self::IDENTITY;
        }
        UnitQuat {
            w: w / n,
            x: x / n,
            y: y / n,
            z: z / n,
        }
    }

    pub fn from_axis_angle(axis: Vec3, angle: f64) -> Self {
        let a = axis.normalize() * (angle / 2.0).sin();
        Self::new((angle / 2.0).cos(), a.x, a.y, a.z)
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.w, self.x, self.y, self.z]
    }

    pub fn norm(self) -> f64 {
        Vector4::from(self.to_array()).norm()
    }
}

/// Hamilton product.
impl std::ops::Mul for UnitQuat {
    type Output = UnitQuat;

    fn mul(self, o: UnitQuat) -> UnitQuat {
        UnitQuat {
            w: self.w * o.w - self.x * o.x - self.y * o.y - self.z * o.z,
            x: self.w * o.x + self.x * o.w + self.y * o.z - self.z * o.y,
            y: self.w * o.y - self.x * o.z + self.y * o.w + self.z * o.x,
            z: self.w * o.z + self.x * o.y - self.y * o.x + self.z * o.w,
        }
    }
}

impl Default for UnitQuat {
    fn default() -> Self {
        Self::IDENTITY
    }
}

/// Rotation matrix of a unit quaternion. `q` and `-q` give the same matrix.
pub fn quat_to_rotmat(q: UnitQuat) -> Mat3 {
    let UnitQuat { w, x, y, z } = q;
    Mat3::new(
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

/// Pulls a gradient w.r.t. the rotation matrix back to the quaternion
/// components. The result is projected onto the tangent space of the unit
/// sphere, i.e. it is the gradient of `R(q / |q|)` at a unit `q`.
pub fn rotmat_backward(q: UnitQuat, g: &Mat3) -> [f64; 4] {
    let UnitQuat { w, x, y, z } = q;
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
    let raw = [gw, gx, gy, gz];
    let qa = q.to_array();
    let dot: f64 = raw.iter().zip(&qa).map(|(a, b)| a * b).sum();
    [
        raw[0] - dot * qa[0],
        raw[1] - dot * qa[1],
        raw[2] - dot * qa[2],
        raw[3] - dot * qa[3],
    ]
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub width: usize,
    pub height: usize,
    pub fov_y: f64,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

/// Square-pixel pinhole intrinsics from a vertical field of view in degrees.
pub fn intrinsics_from_fov(fov_y: f64, width: usize, height: usize) -> Result<CameraIntrinsics> {
    if !(fov_y > 0.0 && fov_y < 180.0) {
        return Err(Error::invalid(format!(
            "vertical field of view must lie in (0, 180) degrees, got {fov_y}"
        )));
    }
    if width < 8 || height < 8 {
        return Err(Error::invalid(format!(
            "image must be at least 8x8, got {width}x{height}"
        )));
    }
    let f = (height as f64 / 2.0) / (fov_y * std::f64::consts::PI / 360.0).tan();
    Ok(CameraIntrinsics {
        width,
        height,
        fov_y,
        fx: f,
        fy: f,
        cx: width as f64 / 2.0,
        cy: height as f64 / 2.0,
    })
}

impl CameraIntrinsics {
    /// Same field of view at a different resolution.
    pub fn resized(&self, width: usize, height: usize) -> Result<Self> {
        intrinsics_from_fov(self.fov_y, width, height)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ray {
    pub origin: Vec3,
    pub direction: Vec3,
}

impl Ray {
    pub fn at(&self, t: f64) -> Vec3 {
        self.origin + self.direction * t
    }

    /// Plücker moment `o x d`.
    pub fn moment(&self) -> Vec3 {
        self.origin.cross(&self.direction)
    }
}

/// Pinhole camera. `rotation` maps world directions into the camera frame.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "CameraRecord", into = "CameraRecord")]
pub struct Camera {
    pub intrinsics: CameraIntrinsics,
    pub rotation: Mat3,
    pub position: Vec3,
}

/// On-disk camera layout.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CameraRecord {
    pub width: usize,
    pub height: usize,
    pub fov_y_deg: f64,
    pub rotation: [f64; 9],
    pub position: [f64; 3],
}

impl From<Camera> for CameraRecord {
    fn from(c: Camera) -> Self {
        let r = c.rotation;
        CameraRecord {
            width: c.intrinsics.width,
            height: c.intrinsics.height,
            fov_y_deg: c.intrinsics.fov_y,
            rotation: [
                r[(0, 0)],
                r[(0, 1)],
                r[(0, 2)],
                r[(1, 0)],
                r[(1, 1)],
                r[(1, 2)],
                r[(2, 0)],
                r[(2, 1)],
                r[(2, 2)],
            ],
            position: [c.position.x, c.position.y, c.position.z],
        }
    }
}

impl TryFrom<CameraRecord> for Camera {
    type Error = Error;

    fn try_from(r: CameraRecord) -> Result<Self> {
        let intrinsics = intrinsics_from_fov(r.fov_y_deg, r.width, r.height)?;
        let rotation = Mat3::from_row_slice(&r.rotation);
        let orth = (rotation.transpose() * rotation - Mat3::identity()).abs().max();
        if orth > 1e-6 || (rotation.determinant() - 1.0).abs() > 1e-6 {
            return Err(Error::invalid("camera rotation is not a proper rotation"));
        }
        Ok(Camera {
            intrinsics,
            rotation,
            position: Vec3::from(r.position),
        })
    }
}

impl Camera {
    /// Camera at `position` looking at `target`, with `up` fixing the roll.
    pub fn look_at(intrinsics: CameraIntrinsics, position: Vec3, target: Vec3, up: Vec3) -> Result<Self> {
        let forward = (target - position).normalize();
        let right = forward.cross(&up);
        if right.norm() < 1e-9 {
            return Err(Error::invalid("look-at direction is parallel to the up vector"));
        }
        let right = right.normalize();
        let down = forward.cross(&right);
        let rotation = Mat3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
        Ok(Camera {
            intrinsics,
            rotation,
            position,
        })
    }

    pub fn with_intrinsics(&self, intrinsics: CameraIntrinsics) -> Self {
        Camera { intrinsics, ..*self }
    }

    pub fn width(&self) -> usize {
        self.intrinsics.width
    }

    pub fn height(&self) -> usize {
        self.intrinsics.height
    }

    /// Optical axis in world coordinates.
    pub fn forward(&self) -> Vec3 {
        self.rotation.row(2).transpose()
    }

    pub fn world_to_camera(&self, p: &Vec3) -> Vec3 {
        self.rotation * (p - self.position)
    }

    /// Pixel coordinates `(u, v)` and camera-frame depth of a world point.
    pub fn project_point(&self, p: &Vec3) -> Result<(f64, f64, f64)> {
        let c = self.world_to_camera(p);
        if c.z <= 0.0 {
            return Err(Error::BehindCamera { depth: c.z });
        }
        let k = &self.intrinsics;
        Ok((k.fx * c.x / c.z + k.cx, k.fy * c.y / c.z + k.cy, c.z))
    }

    /// Ray through continuous image coordinates (no half-pixel offset).
    pub fn ray_through(&self, u: f64, v: f64) -> Ray {
        let k = &self.intrinsics;
        let dir_cam = Vec3::new((u - k.cx) / k.fx, (v - k.cy) / k.fy, 1.0);
        Ray {
            origin: self.position,
            direction: (self.rotation.transpose() * dir_cam).normalize(),
        }
    }

    /// Ray through the center of pixel `(u, v)`.
    pub fn pixel_ray(&self, u: f64, v: f64) -> Result<Ray> {
        if !(u >= 0.0 && v >= 0.0 && u < self.width() as f64 && v < self.height() as f64) {
            return Err(Error::PixelOutOfBounds {
                u,
                v,
                width: self.width(),
                height: self.height(),
            });
        }
        Ok(self.ray_through(u + 0.5, v + 0.5))
    }

    /// 4x4 projection `K [R | -R c]` padded to homogeneous form.
    pub fn projection_matrix(&self) -> Matrix4<f64> {
        let k = &self.intrinsics;
        let t = -(self.rotation * self.position);
        let mut ext = Matrix4::identity();
        ext.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        ext.fixed_view_mut::<3, 1>(0, 3).copy_from(&t);
        let mut kk = Matrix4::identity();
        kk[(0, 0)] = k.fx;
        kk[(1, 1)] = k.fy;
        kk[(0, 2)] = k.cx;
        kk[(1, 2)] = k.cy;
        kk * ext
    }

    /// Applies a rigid transform `x -> rot * x + trans` to the camera pose.
    pub fn transformed(&self, rot: &Mat3, trans: &Vec3) -> Self {
        Camera {
            intrinsics: self.intrinsics,
            rotation: self.rotation * rot.transpose(),
            position: rot * self.position + trans,
        }
    }
}
