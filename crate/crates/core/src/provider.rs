//! View providers: the seam that supplies four de-occluded canonical views
//! for an (occluded) input. Three sources are available: an analytic
//! oracle, a directory of externally produced images, and a degraded oracle
//! for sensitivity studies.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Camera, Mat3, Vec3};
use crate::image::{GrayImage, RgbImage};
use crate::rig::{same_pose, CameraRig};
use crate::scene::{raymarch_render, CapsuleScene, RaymarchConfig};

/// Where a response came from; serialized into every report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Provenance {
    Oracle,
    File {
        dir: PathBuf,
        /// Non-fatal inconsistencies, e.g. camera manifest mismatches.
        warnings: Vec<String>,
    },
    Degraded {
        noise_sigma: f64,
        pose_jitter_deg: f64,
        seed: u64,
    },
}

/// Provider selection as it appears in experiment configs.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ProviderConfig {
    #[default]
    Oracle,
    File { dir: PathBuf },
    Degraded {
        noise_sigma: f64,
        pose_jitter_deg: f64,
        seed: u64,
    },
}

/// The scene the oracle renders from.
#[derive(Clone, Copy, Debug)]
pub struct SceneHandle<'a> {
    pub scene: &'a CapsuleScene,
    pub raymarch: RaymarchConfig,
}

#[derive(Clone, Debug)]
pub struct ProviderRequest<'a> {
    /// One or two input images with their cameras.
    pub inputs: Vec<(RgbImage, Camera)>,
    /// Canonical four-view targets anchored at the first input.
    pub targets: CameraRig,
    pub scene: Option<SceneHandle<'a>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProviderResponse {
    pub views: Vec<RgbImage>,
    pub silhouettes: Vec<GrayImage>,
    pub provenance: Provenance,
}

fn azimuth_deg(c: &Camera) -> f64 {
    c.position.x.atan2(c.position.z).to_degrees()
}

impl ProviderRequest<'_> {
    pub fn validate(&self) -> Result<()> {
        if !(1..=2).contains(&self.inputs.len()) {
            return Err(Error::invalid(format!("provider takes 1 or 2 inputs, got {}", self.inputs.len())));
        }
        let t = &self.targets.cameras;
        if t.len() != 4 {
            return Err(Error::invalid(format!("provider needs 4 targets, got {}", t.len())));
        }
        if !same_pose(&t[0], &self.inputs[0].1, 1e-9) {
            return Err(Error::invalid("first target pose must equal the first input pose"));
        }
        let r0 = t[0].position.norm();
        let a0 = azimuth_deg(&t[0]);
        for (k, c) in t.iter().enumerate() {
            let turn = (azimuth_deg(c) - a0 - 90.0 * k as f64).rem_euclid(360.0);
            let turn = turn.min(360.0 - turn);
            if (c.position.norm() - r0).abs() > 1e-9 || (c.position.y - t[0].position.y).abs() > 1e-9 || turn > 1e-6 {
                return Err(Error::invalid(format!("target {k} is not on the canonical four-view layout")));
            }
        }
        Ok(())
    }

    fn scene(&self) -> Result<SceneHandle<'_>> {
        self.scene
            .ok_or_else(|| Error::invalid("the oracle provider needs a scene handle"))
    }
}

/// Renders the scene at the target cameras; ignores the input images.
pub fn oracle_provide(req: &ProviderRequest) -> Result<ProviderResponse> {
    req.validate()?;
    let h = req.scene()?;
    let (views, silhouettes) = req
        .targets
        .cameras
        .iter()
        .map(|c| {
            let r = raymarch_render(h.scene, c, &h.raymarch);
            (r.rgb, r.alpha)
        })
        .unzip();
    Ok(ProviderResponse {
        views,
        silhouettes,
        provenance: Provenance::Oracle,
    })
}

/// Oracle renders from azimuth-jittered target cameras with additive
/// Gaussian pixel noise, clipped to `[0, 1]`.
pub fn degraded_provide(req: &ProviderRequest, noise_sigma: f64, pose_jitter_deg: f64, seed: u64) -> Result<ProviderResponse> {
    if !(noise_sigma >= 0.0 && pose_jitter_deg >= 0.0) {
        return Err(Error::invalid("noise sigma and pose jitter must be non-negative"));
    }
    req.validate()?;
    let h = req.scene()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let jitter = Normal::new(0.0, pose_jitter_deg).map_err(|e| Error::invalid(e.to_string()))?;
    let noise = Normal::new(0.0, noise_sigma).map_err(|e| Error::invalid(e.to_string()))?;
    let mut views = Vec::with_capacity(4);
    let mut silhouettes = Vec::with_capacity(4);
    for c in &req.targets.cameras {
        let delta: f64 = if pose_jitter_deg > 0.0 { jitter.sample(&mut rng) } else { 0.0 };
        let rot = Mat3::from(nalgebra::Rotation3::from_axis_angle(&Vec3::y_axis(), delta.to_radians()));
        let cam = c.transformed(&rot, &Vec3::zeros());
        let mut r = raymarch_render(h.scene, &cam, &h.raymarch);
        if noise_sigma > 0.0 {
            for v in r.rgb.data.iter_mut() {
                *v = (*v + noise.sample(&mut rng)).clamp(0.0, 1.0);
            }
        }
        views.push(r.rgb);
        silhouettes.push(r.alpha);
    }
    Ok(ProviderResponse {
        views,
        silhouettes,
        provenance: Provenance::Degraded {
            noise_sigma,
            pose_jitter_deg,
            seed,
        },
    })
}

/// Loads `view_k.png` / `mask_k.png` for k in 0..4 from `dir`. A
/// `cameras.json` rig, when present, is compared against the request and
/// disagreements are recorded as provenance warnings.
pub fn file_provide(dir: &Path, req: &ProviderRequest) -> Result<ProviderResponse> {
    req.validate()?;
    let mut views = Vec::with_capacity(4);
    let mut silhouettes = Vec::with_capacity(4);
    for (k, cam) in req.targets.cameras.iter().enumerate() {
        let expected = format!("{}x{}", cam.width(), cam.height());
        let vp = dir.join(format!("view_{k}.png"));
        let view = RgbImage::load_png(&vp)?;
        if view.shape() != (cam.width(), cam.height()) {
            return Err(Error::Resolution {
                path: vp,
                expected,
                actual: format!("{}x{}", view.width, view.height),
            });
        }
        let mp = dir.join(format!("mask_{k}.png"));
        let mut mask = GrayImage::load_png(&mp)?;
        if mask.shape() != (cam.width(), cam.height()) {
            return Err(Error::Resolution {
                path: mp,
                expected,
                actual: format!("{}x{}", mask.width, mask.height),
            });
        }
        mask.data.iter_mut().for_each(|v| *v = (*v > 0.5) as u8 as f64);
        views.push(view);
        silhouettes.push(mask);
    }
    let mut warnings = Vec::new();
    let cams_path = dir.join("cameras.json");
    if cams_path.exists() {
        let rig: CameraRig = serde_json::from_slice(&std::fs::read(&cams_path)?)?;
        if rig.cameras.len() != 4 {
            warnings.push(format!("cameras.json lists {} cameras, expected 4", rig.cameras.len()));
        }
        for (k, (a, b)) in rig.cameras.iter().zip(&req.targets.cameras).enumerate() {
            if !same_pose(a, b, 1e-6) {
                warnings.push(format!("cameras.json camera {k} differs from the requested target pose"));
            }
        }
    }
    Ok(ProviderResponse {
        views,
        silhouettes,
        provenance: Provenance::File {
            dir: dir.to_path_buf(),
            warnings,
        },
    })
}

/// Writes a response in the file-provider layout, with the target rig as
/// `cameras.json`.
pub fn write_provider_dir(dir: &Path, resp: &ProviderResponse, targets: &CameraRig) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    for (k, (v, m)) in resp.views.iter().zip(&resp.silhouettes).enumerate() {
        v.save_png(&dir.join(format!("view_{k}.png")))?;
        m.save_mask_png(&dir.join(format!("mask_{k}.png")))?;
    }
    std::fs::write(dir.join("cameras.json"), serde_json::to_vec_pretty(targets)?)?;
    Ok(())
}

pub fn provide(cfg: &ProviderConfig, req: &ProviderRequest) -> Result<ProviderResponse> {
    match cfg {
        ProviderConfig::Oracle => oracle_provide(req),
        ProviderConfig::File { dir } => file_provide(dir, req),
        ProviderConfig::Degraded {
            noise_sigma,
            pose_jitter_deg,
            seed,
        } => degraded_provide(req, *noise_sigma, *pose_jitter_deg, *seed),
    }
}

/// Mean silhouette IoU between two responses, view by view.
pub fn silhouette_iou(a: &GrayImage, b: &GrayImage) -> f64 {
    let (mut inter, mut union) = (0usize, 0usize);
    for (x, y) in a.data.iter().zip(&b.data) {
        let (p, q) = (*x > 0.5, *y > 0.5);
        inter += (p && q) as usize;
        union += (p || q) as usize;
    }
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

/// Seeded random azimuth in degrees, used when configs leave it open.
pub fn random_azimuth(seed: u64) -> f64 {
    ChaCha8Rng::seed_from_u64(seed).random_range(0.0..360.0)
}
