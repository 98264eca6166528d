//! The 14-parameter Gaussian primitive, ray-embedded feature maps, and the
//! per-pixel decoder that turns an unconstrained parameter grid into valid
//! Gaussians (plus the decoder's chain rule for the optimizer).

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Camera, UnitQuat, Vec3};
use crate::image::{read_flat, write_flat, DType, FlatHeader, RgbImage};
use crate::render::GaussianGrads;

/// Offsets of the parameter groups inside the flat 14-vector.
pub mod param {
    pub const MEAN: usize = 0;
    pub const SCALE: usize = 3;
    pub const ROTATION: usize = 6;
    pub const OPACITY: usize = 10;
    pub const COLOR: usize = 11;
    pub const COUNT: usize = 14;
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Gaussian3D {
    pub mean: Vec3,
    /// Per-axis standard deviation.
    pub scale: Vec3,
    pub rotation: UnitQuat,
    pub opacity: f64,
    pub color: [f64; 3],
}

impl Gaussian3D {
    pub fn isotropic(mean: Vec3, sigma: f64, opacity: f64, color: [f64; 3]) -> Self {
        Gaussian3D {
            mean,
            scale: Vec3::repeat(sigma),
            rotation: UnitQuat::IDENTITY,
            opacity,
            color,
        }
    }

    /// `[mean, scale, rotation (w x y z), opacity, color]`.
    pub fn to_params(&self) -> [f64; 14] {
        let q = self.rotation;
        [
            self.mean.x,
            self.mean.y,
            self.mean.z,
            self.scale.x,
            self.scale.y,
            self.scale.z,
            q.w,
            q.x,
            q.y,
            q.z,
            self.opacity,
            self.color[0],
            self.color[1],
            self.color[2],
        ]
    }

    /// Inverse of [`to_params`](Self::to_params). The quaternion is
    /// renormalized; every other field is taken verbatim.
    pub fn from_params(p: &[f64; 14]) -> Self {
        Gaussian3D {
            mean: Vec3::new(p[0], p[1], p[2]),
            scale: Vec3::new(p[3], p[4], p[5]),
            rotation: UnitQuat::new(p[6], p[7], p[8], p[9]),
            opacity: p[10],
            color: [p[11], p[12], p[13]],
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GaussianSet {
    pub gaussians: Vec<Gaussian3D>,
}

impl GaussianSet {
    pub fn new(gaussians: Vec<Gaussian3D>) -> Self {
        GaussianSet { gaussians }
    }

    pub fn len(&self) -> usize {
        self.gaussians.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gaussians.is_empty()
    }
}

/// `H x W x 9` map: RGB, unit ray direction, Plücker moment `o x d`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl FeatureMap {
    pub const CHANNELS: usize = 9;

    pub fn pixel(&self, x: usize, y: usize) -> &[f64] {
        let i = (y * self.width + x) * Self::CHANNELS;
        &self.data[i..i + Self::CHANNELS]
    }
}

/// Concatenates each pixel's color with the Plücker embedding of its ray.
pub fn ray_feature_map(image: &RgbImage, cam: &Camera) -> Result<FeatureMap> {
    if image.shape() != (cam.width(), cam.height()) {
        return Err(Error::shape(
            format!("{}x{}", cam.width(), cam.height()),
            format!("{}x{}", image.width, image.height),
        ));
    }
    let mut data = Vec::with_capacity(image.width * image.height * FeatureMap::CHANNELS);
    for y in 0..image.height {
        for x in 0..image.width {
            let ray = cam.ray_through(x as f64 + 0.5, y as f64 + 0.5);
            let m = ray.moment();
            data.extend_from_slice(&image.get(x, y));
            data.extend_from_slice(&[ray.direction.x, ray.direction.y, ray.direction.z]);
            data.extend_from_slice(&[m.x, m.y, m.z]);
        }
    }
    Ok(FeatureMap {
        width: image.width,
        height: image.height,
        data,
    })
}

/// Raw per-pixel channel layout of a [`PixelGaussianGrid`].
pub mod raw {
    /// Depth along the pixel ray (pre-sigmoid).
    pub const DEPTH: usize = 0;
    /// 3D offset (pre-tanh).
    pub const OFFSET: usize = 1;
    pub const SCALE: usize = 4;
    pub const ROTATION: usize = 7;
    pub const OPACITY: usize = 11;
    pub const COLOR: usize = 12;
    pub const CHANNELS: usize = 15;
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecodeConfig {
    pub near: f64,
    pub far: f64,
    pub offset_scale: f64,
    pub scale_min: f64,
    pub scale_max: f64,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig::for_radius(2.7)
    }
}

impl DecodeConfig {
    /// Depth range centered on the orbit radius.
    pub fn for_radius(radius: f64) -> Self {
        DecodeConfig {
            near: radius - 1.5,
            far: radius + 1.5,
            offset_scale: 0.05,
            scale_min: 1e-4,
            scale_max: 0.3,
        }
    }
}

/// Unconstrained per-pixel Gaussian parameters for `views` cameras.
#[derive(Clone, Debug, PartialEq)]
pub struct PixelGaussianGrid {
    pub views: usize,
    pub width: usize,
    pub height: usize,
    /// `views x height x width x raw::CHANNELS`, row-major.
    pub raw: Vec<f64>,
    /// One camera per view, at grid resolution.
    pub cameras: Vec<Camera>,
}

/// Starting values for a freshly initialized grid.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GridInit {
    pub opacity: f64,
    /// Scale as a multiple of the pixel footprint at mid depth.
    pub scale_pixels: f64,
    /// Std-dev of seeded noise added to the pre-tanh offsets.
    pub offset_noise: f64,
}

impl Default for GridInit {
    fn default() -> Self {
        GridInit {
            opacity: 0.1,
            scale_pixels: 0.6,
            offset_noise: 0.0,
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

impl PixelGaussianGrid {
    pub fn zeros(cameras: Vec<Camera>) -> Result<Self> {
        let first = cameras
            .first()
            .ok_or_else(|| Error::invalid("grid needs at least one camera"))?;
        let (width, height) = (first.width(), first.height());
        if cameras.iter().any(|c| (c.width(), c.height()) != (width, height)) {
            return Err(Error::invalid("grid cameras must share one resolution"));
        }
        Ok(PixelGaussianGrid {
            views: cameras.len(),
            width,
            height,
            raw: vec![0.0; cameras.len() * width * height * raw::CHANNELS],
            cameras,
        })
    }

    /// Grid whose colors start at the pixel colors of each view's image
    /// (the RGB part of its ray feature map).
    pub fn from_images(
        cameras: Vec<Camera>,
        images: &[RgbImage],
        decode: &DecodeConfig,
        init: &GridInit,
        seed: u64,
    ) -> Result<Self> {
        let mut grid = Self::zeros(cameras)?;
        if images.len() != grid.views {
            return Err(Error::shape(grid.views, images.len()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = Normal::new(0.0, init.offset_noise.max(0.0)).map_err(|e| Error::invalid(e.to_string()))?;
        let opacity_raw = logit(init.opacity.clamp(1e-4, 1.0 - 1e-4));
        for v in 0..grid.views {
            let cam = grid.cameras[v];
            let features = ray_feature_map(&images[v], &cam)?;
            let mid = 0.5 * (decode.near + decode.far);
            let s = (init.scale_pixels * mid / cam.intrinsics.fy).clamp(decode.scale_min * 1.01, decode.scale_max * 0.99);
            let scale_raw = logit((s - decode.scale_min) / (decode.scale_max - decode.scale_min));
            for y in 0..grid.height {
                for x in 0..grid.width {
                    let rgb = &features.pixel(x, y)[..3];
                    let off = grid.offset(v, x, y);
                    let px = &mut grid.raw[off..off + raw::CHANNELS];
                    for k in 0..3 {
                        px[raw::OFFSET + k] = if init.offset_noise > 0.0 { noise.sample(&mut rng) } else { 0.0 };
                        px[raw::SCALE + k] = scale_raw;
                        px[raw::COLOR + k] = logit(rgb[k].clamp(0.02, 0.98));
                    }
                    px[raw::OPACITY] = opacity_raw;
                }
            }
        }
        Ok(grid)
    }

    pub fn offset(&self, view: usize, x: usize, y: usize) -> usize {
        ((view * self.height + y) * self.width + x) * raw::CHANNELS
    }

    pub fn n_pixels(&self) -> usize {
        self.views * self.width * self.height
    }

    /// `(view, x, y)` of a flat pixel index.
    pub fn locate(&self, pixel: usize) -> (usize, usize, usize) {
        let per_view = self.width * self.height;
        (pixel / per_view, pixel % self.width, (pixel % per_view) / self.width)
    }

    fn validate(&self) -> Result<()> {
        if self.cameras.len() != self.views || self.raw.len() != self.n_pixels() * raw::CHANNELS {
            return Err(Error::invalid("grid buffers disagree with its shape"));
        }
        if let Some(i) = self.raw.iter().position(|v| !v.is_finite()) {
            let (v, x, y) = self.locate(i / raw::CHANNELS);
            return Err(Error::NonFinite(format!(
                "raw grid view {v} pixel ({x}, {y}) channel {}",
                i % raw::CHANNELS
            )));
        }
        Ok(())
    }

    /// Writes the grid as a flat f64 binary with a JSON header.
    pub fn save(&self, stem: &Path) -> Result<()> {
        let header = FlatHeader {
            shape: vec![self.views, self.height, self.width, raw::CHANNELS],
            dtype: DType::F64,
            meta: serde_json::json!({
                "views": self.views,
                "height": self.height,
                "width": self.width,
                "channels": raw::CHANNELS,
                "dtype": "f64",
                "cameras": self.cameras,
            }),
        };
        write_flat(stem, &header, &self.raw)
    }

    pub fn load(stem: &Path) -> Result<Self> {
        let (header, data) = read_flat(stem)?;
        if header.shape.len() != 4 || header.shape[3] != raw::CHANNELS {
            return Err(Error::shape(
                format!("[views, H, W, {}]", raw::CHANNELS),
                format!("{:?}", header.shape),
            ));
        }
        let cameras: Vec<Camera> = serde_json::from_value(header.meta["cameras"].clone())?;
        let grid = PixelGaussianGrid {
            views: header.shape[0],
            height: header.shape[1],
            width: header.shape[2],
            raw: data,
            cameras,
        };
        grid.validate()?;
        Ok(grid)
    }
}

/// Decodes one pixel's raw channels given its ray.
fn decode_pixel(px: &[f64], origin: &Vec3, dir: &Vec3, cfg: &DecodeConfig) -> Gaussian3D {
    let t = cfg.near + (cfg.far - cfg.near) * sigmoid(px[raw::DEPTH]);
    let off = Vec3::new(
        px[raw::OFFSET].tanh(),
        px[raw::OFFSET + 1].tanh(),
        px[raw::OFFSET + 2].tanh(),
    );
    let span = cfg.scale_max - cfg.scale_min;
    let q = &px[raw::ROTATION..raw::ROTATION + 4];
    Gaussian3D {
        mean: origin + dir * t + off * cfg.offset_scale,
        scale: Vec3::from_fn(|k, _| cfg.scale_min + span * sigmoid(px[raw::SCALE + k])),
        rotation: UnitQuat::new(q[0] + 1.0, q[1], q[2], q[3]),
        opacity: sigmoid(px[raw::OPACITY]),
        color: std::array::from_fn(|k| sigmoid(px[raw::COLOR + k])),
    }
}

/// Every grid pixel becomes one Gaussian; views are concatenated in order.
pub fn decode_pixel_gaussians(grid: &PixelGaussianGrid, cfg: &DecodeConfig) -> Result<GaussianSet> {
    grid.validate()?;
    let mut out = Vec::with_capacity(grid.n_pixels());
    for (v, cam) in grid.cameras.iter().enumerate() {
        for y in 0..grid.height {
            for x in 0..grid.width {
                let ray = cam.ray_through(x as f64 + 0.5, y as f64 + 0.5);
                let off = grid.offset(v, x, y);
                out.push(decode_pixel(
                    &grid.raw[off..off + raw::CHANNELS],
                    &ray.origin,
                    &ray.direction,
                    cfg,
                ));
            }
        }
    }
    Ok(GaussianSet::new(out))
}

/// Chain rule of the decoder: post-activation gradients to raw-grid gradients.
pub fn decode_backward(grid: &PixelGaussianGrid, cfg: &DecodeConfig, grads: &GaussianGrads) -> Result<Vec<f64>> {
    if grads.len() != grid.n_pixels() {
        return Err(Error::shape(grid.n_pixels(), grads.len()));
    }
    let mut out = vec![0.0; grid.raw.len()];
    let span = cfg.scale_max - cfg.scale_min;
    let mut i = 0;
    for (v, cam) in grid.cameras.iter().enumerate() {
        for y in 0..grid.height {
            for x in 0..grid.width {
                let g = &grads.params[i];
                i += 1;
                let off = grid.offset(v, x, y);
                let px = &grid.raw[off..off + raw::CHANNELS];
                let dst = &mut out[off..off + raw::CHANNELS];
                let dir = cam.ray_through(x as f64 + 0.5, y as f64 + 0.5).direction;
                let gm = Vec3::new(g[param::MEAN], g[param::MEAN + 1], g[param::MEAN + 2]);

                let s = sigmoid(px[raw::DEPTH]);
                dst[raw::DEPTH] = gm.dot(&dir) * (cfg.far - cfg.near) * s * (1.0 - s);
                for k in 0..3 {
                    let th = px[raw::OFFSET + k].tanh();
                    dst[raw::OFFSET + k] = gm[k] * cfg.offset_scale * (1.0 - th * th);
                    let s = sigmoid(px[raw::SCALE + k]);
                    dst[raw::SCALE + k] = g[param::SCALE + k] * span * s * (1.0 - s);
                    let s = sigmoid(px[raw::COLOR + k]);
                    dst[raw::COLOR + k] = g[param::COLOR + k] * s * (1.0 - s);
                }
                let s = sigmoid(px[raw::OPACITY]);
                dst[raw::OPACITY] = g[param::OPACITY] * s * (1.0 - s);

                let q = [
                    px[raw::ROTATION] + 1.0,
                    px[raw::ROTATION + 1],
                    px[raw::ROTATION + 2],
                    px[raw::ROTATION + 3],
                ];
                let n = q.iter().map(|a| a * a).sum::<f64>().sqrt();
                if n.is_finite() && n > 0.0 {
                    let qh = q.map(|a| a / n);
                    let gq = &g[param::ROTATION..param::ROTATION + 4];
                    let dot: f64 = (0..4).map(|k| qh[k] * gq[k]).sum();
                    for k in 0..4 {
                        dst[raw::ROTATION + k] = (gq[k] - qh[k] * dot) / n;
                    }
                }
            }
        }
    }
    Ok(out)
}
