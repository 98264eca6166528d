//! Differentiable Gaussian splatting: EWA projection, global depth sort,
//! tile binning, front-to-back compositing and the analytic backward pass.
//!
//! Gradients are taken with respect to post-activation Gaussian parameters
//! (the flat 14-vector of [`Gaussian3D::to_params`]); the decoder's chain rule
//! lives in [`crate::gaussian::decode_backward`].
//!
//! [`Gaussian3D::to_params`]: crate::gaussian::Gaussian3D::to_params

mod project;
mod raster;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::ExecMode;
use crate::gaussian::GaussianSet;
use crate::geometry::Camera;
use crate::image::{GrayImage, RgbImage};

pub use project::{project_gaussian, Projection};
pub use raster::Prepared;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RenderConfig {
    pub background: [f64; 3],
    /// Tile side in pixels, a power of two.
    pub tile: usize,
    pub near: f64,
    pub far: f64,
    /// Contributions below this are skipped.
    pub alpha_cutoff: f64,
    /// Per-Gaussian contribution clamp.
    pub alpha_max: f64,
    /// Footprint radius in standard deviations of the 2D covariance.
    pub footprint_sigma: f64,
    pub transmittance_floor: f64,
    /// Dilation added to every projected covariance, in px².
    pub cov2d_eps: f64,
    pub with_depth: bool,
    #[serde(skip)]
    pub exec: ExecMode,
}

impl Default for RenderConfig {
    fn default() -> Self {
        RenderConfig {
            background: [0.0; 3],
            tile: 8,
            near: 0.2,
            far: 100.0,
            alpha_cutoff: 1.0 / 255.0,
            alpha_max: 0.999,
            footprint_sigma: 3.0,
            transmittance_floor: 1e-4,
            cov2d_eps: 0.3,
            with_depth: false,
            exec: ExecMode::default(),
        }
    }
}

impl RenderConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.near > 0.0 && self.near < self.far) {
            return Err(Error::invalid("render config needs 0 < near < far"));
        }
        if !(self.alpha_cutoff > 0.0 && self.alpha_cutoff <= 0.05) {
            return Err(Error::invalid("alpha_cutoff must lie in (0, 0.05]"));
        }
        if !(2.0..=4.0).contains(&self.footprint_sigma) {
            return Err(Error::invalid("footprint_sigma must lie in [2, 4]"));
        }
        if !self.tile.is_power_of_two() {
            return Err(Error::invalid("tile size must be a power of two"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RenderedImage {
    pub rgb: RgbImage,
    pub alpha: GrayImage,
    /// Alpha-weighted camera depth, when requested.
    pub depth: Option<GrayImage>,
}

impl RenderedImage {
    pub fn width(&self) -> usize {
        self.rgb.width
    }

    pub fn height(&self) -> usize {
        self.rgb.height
    }
}

/// Per-Gaussian gradients in the layout of `Gaussian3D::to_params`.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianGrads {
    pub params: Vec<[f64; 14]>,
}

impl GaussianGrads {
    pub fn zeros(n: usize) -> Self {
        GaussianGrads {
            params: vec![[0.0; 14]; n],
        }
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn add_assign(&mut self, other: &GaussianGrads) {
        for (a, b) in self.params.iter_mut().zip(&other.params) {
            for k in 0..14 {
                a[k] += b[k];
            }
        }
    }

    pub fn is_all_zero(&self) -> bool {
        self.params.iter().all(|g| g.iter().all(|&v| v == 0.0))
    }
}

pub fn render(set: &GaussianSet, cam: &Camera, cfg: &RenderConfig) -> RenderedImage {
    Prepared::new(set, cam, cfg).forward()
}

/// Adjoint of [`render`] for upstream gradients on rgb and alpha.
pub fn render_backward(
    set: &GaussianSet,
    cam: &Camera,
    cfg: &RenderConfig,
    grad_rgb: &RgbImage,
    grad_alpha: &GrayImage,
) -> Result<GaussianGrads> {
    Prepared::new(set, cam, cfg).backward(grad_rgb, grad_alpha)
}

/// One independent render per camera, in camera order.
pub fn render_views(set: &GaussianSet, cameras: &[Camera], cfg: &RenderConfig) -> Vec<RenderedImage> {
    cfg.exec.map_range(cameras.len(), |i| render(set, &cameras[i], cfg))
}
