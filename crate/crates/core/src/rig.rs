//! Orbital camera rigs: the 16-view evaluation rig and the canonical
//! four-view layout anchored at an input azimuth.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{intrinsics_from_fov, Camera, Vec3};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RigSpec {
    pub n_views: usize,
    pub radius: f64,
    /// Degrees above the horizontal plane.
    pub elevation: f64,
    pub fov_y: f64,
    pub width: usize,
    pub height: usize,
    /// Azimuth of camera 0 in degrees; azimuth 0 sits on the +z axis.
    pub azimuth_offset: f64,
}

impl Default for RigSpec {
    fn default() -> Self {
        RigSpec {
            n_views: 16,
            radius: 2.7,
            elevation: 0.0,
            fov_y: 49.1,
            width: 512,
            height: 512,
            azimuth_offset: 0.0,
        }
    }
}

impl RigSpec {
    pub fn with_resolution(mut self, width: usize, height: usize) -> Self {
        self.width = width;
        self.height = height;
        self
    }

    fn validate(&self) -> Result<()> {
        if self.n_views < 1 {
            return Err(Error::invalid("rig needs at least one view"));
        }
        if !(self.radius > 0.0) {
            return Err(Error::invalid(format!("rig radius must be positive, got {}", self.radius)));
        }
        if self.elevation.abs() >= 90.0 {
            return Err(Error::DegenerateUp(self.elevation));
        }
        Ok(())
    }

    /// Camera on the orbit at `azimuth` degrees, looking at the origin.
    pub fn camera_at(&self, azimuth: f64) -> Result<Camera> {
        self.validate()?;
        let k = intrinsics_from_fov(self.fov_y, self.width, self.height)?;
        let (az, el) = (azimuth.to_radians(), self.elevation.to_radians());
        let pos = Vec3::new(el.cos() * az.sin(), el.sin(), el.cos() * az.cos()) * self.radius;
        Camera::look_at(k, pos, Vec3::zeros(), Vec3::y())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraRig {
    pub cameras: Vec<Camera>,
    pub azimuths: Vec<f64>,
    pub spec: RigSpec,
}

impl CameraRig {
    pub fn len(&self) -> usize {
        self.cameras.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cameras.is_empty()
    }

    /// Index of a rig camera with the same pose as `cam`, if any.
    pub fn find_pose(&self, cam: &Camera, tol: f64) -> Option<usize> {
        self.cameras.iter().position(|c| same_pose(c, cam, tol))
    }
}

/// Pose equality (ignores intrinsics).
pub fn same_pose(a: &Camera, b: &Camera, tol: f64) -> bool {
    (a.position - b.position).abs().max() <= tol && (a.rotation - b.rotation).abs().max() <= tol
}

fn rig_at(spec: &RigSpec, azimuths: Vec<f64>) -> Result<CameraRig> {
    let cameras = azimuths
        .iter()
        .map(|&a| spec.camera_at(a))
        .collect::<Result<Vec<_>>>()?;
    Ok(CameraRig {
        cameras,
        azimuths,
        spec: *spec,
    })
}

/// `n_views` equidistant cameras starting at `azimuth_offset`.
pub fn build_rig(spec: &RigSpec) -> Result<CameraRig> {
    spec.validate()?;
    let step = 360.0 / spec.n_views as f64;
    let az = (0..spec.n_views)
        .map(|k| spec.azimuth_offset + k as f64 * step)
        .collect();
    rig_at(spec, az)
}

/// Four cameras at 0/90/180/270 degrees relative to `azimuth_offset`.
pub fn canonical_four(spec: &RigSpec) -> Result<CameraRig> {
    let spec = RigSpec { n_views: 4, ..*spec };
    build_rig(&spec)
}

/// The input camera and the canonical targets anchored at it. The first
/// target is the input pose itself.
pub fn input_plus_targets(spec: &RigSpec, input_azimuth: f64) -> Result<(Camera, CameraRig)> {
    let anchored = RigSpec {
        azimuth_offset: input_azimuth,
        ..*spec
    };
    let input = anchored.camera_at(input_azimuth)?;
    let targets = canonical_four(&anchored)?;
    Ok((input, targets))
}
