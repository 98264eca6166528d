//! Finite-difference verification of the renderer backward pass and of the
//! composed decode -> render -> loss chain, as a machine-readable report.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gaussian::{raw, DecodeConfig, Gaussian3D, GaussianSet, PixelGaussianGrid};
use crate::geometry::{intrinsics_from_fov, Camera, UnitQuat, Vec3};
use crate::image::{GrayImage, RgbImage};
use crate::optim::{loss_and_grad, FitConfig, FitTarget};
use crate::render::{render, render_backward, RenderConfig, RenderedImage};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GradcheckSizes {
    pub scenes: usize,
    /// Upper bound on Gaussians per renderer scene (drawn in `1..=max`).
    pub max_gaussians: usize,
    pub width: usize,
    pub height: usize,
    /// Raw grid coordinates probed per scene in the chain suite.
    pub chain_coords: usize,
    pub h: f64,
    pub tol: f64,
    /// Coordinates with |FD| at or below this are not compared.
    pub floor: f64,
    pub min_pass_fraction: f64,
}

impl Default for GradcheckSizes {
    fn default() -> Self {
        GradcheckSizes {
            scenes: 20,
            max_gaussians: 16,
            width: 16,
            height: 16,
            chain_coords: 32,
            h: 1e-4,
            tol: 1e-3,
            floor: 1e-6,
            min_pass_fraction: 0.99,
        }
    }
}

impl GradcheckSizes {
    pub fn validate(&self) -> Result<()> {
        if self.max_gaussians > 64 || self.width > 16 || self.height > 16 {
            return Err(Error::Config(format!(
                "gradcheck sizes too large for 64-bit central differences: {} Gaussians at {}x{} (limit 64 at 16x16)",
                self.max_gaussians, self.width, self.height
            )));
        }
        if self.width < 4 || self.height < 4 {
            return Err(Error::Config("gradcheck images must be at least 4x4".into()));
        }
        if !(self.h > 0.0 && self.tol > 0.0) {
            return Err(Error::Config("gradcheck step and tolerance must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ClassTally {
    pub checked: usize,
    pub passed: usize,
    pub worst_rel: f64,
}

impl ClassTally {
    fn record(&mut self, e: f64, tol: f64) {
        self.checked += 1;
        if e <= tol {
            self.passed += 1;
        }
        self.worst_rel = self.worst_rel.max(e);
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SuiteReport {
    pub checked: usize,
    pub passed: usize,
    /// 1.0 when nothing was checked.
    pub pass_fraction: f64,
    pub worst_rel: f64,
    pub classes: BTreeMap<String, ClassTally>,
    pub pass: bool,
}

impl SuiteReport {
    fn record(&mut self, class: &str, analytic: f64, fd: f64, sizes: &GradcheckSizes) {
        if fd.abs() <= sizes.floor {
            return;
        }
        let e = rel_err(analytic, fd);
        self.classes.entry(class.to_string()).or_default().record(e, sizes.tol);
        self.checked += 1;
        if e <= sizes.tol {
            self.passed += 1;
        }
        self.worst_rel = self.worst_rel.max(e);
    }

    fn finish(&mut self, min_fraction: f64) {
        self.pass_fraction = if self.checked == 0 {
            1.0
        } else {
            self.passed as f64 / self.checked as f64
        };
        self.pass = self.pass_fraction >= min_fraction;
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub seed: u64,
    pub sizes: GradcheckSizes,
    pub renderer: SuiteReport,
    pub chain: SuiteReport,
    pub pass: bool,
}

pub fn rel_err(analytic: f64, fd: f64) -> f64 {
    (analytic - fd).abs() / analytic.abs().max(fd.abs()).max(1e-300)
}

fn param_class(c: usize) -> &'static str {
    match c {
        0..=2 => "mean",
        3..=5 => "scale",
        6..=9 => "rot",
        10 => "opacity",
        _ => "color",
    }
}

fn raw_class(c: usize) -> &'static str {
    match c {
        raw::DEPTH => "depth",
        c if c < raw::SCALE => "offset",
        c if c < raw::ROTATION => "scale",
        c if c < raw::OPACITY => "rot",
        raw::OPACITY => "opacity",
        _ => "color",
    }
}

fn orbit_camera(rng: &mut impl Rng, width: usize, height: usize) -> Result<Camera> {
    let k = intrinsics_from_fov(49.1, width, height)?;
    let az = rng.random_range(0.0..std::f64::consts::TAU);
    let el = rng.random_range(-0.6..0.6f64);
    let pos = Vec3::new(el.cos() * az.sin(), el.sin(), el.cos() * az.cos()) * 3.0;
    Camera::look_at(k, pos, Vec3::zeros(), Vec3::y())
}

fn random_set(rng: &mut impl Rng, n: usize) -> GaussianSet {
    let gs = (0..n)
        .map(|_| Gaussian3D {
            mean: Vec3::from_fn(|_, _| rng.random_range(-0.8..0.8)),
            scale: Vec3::from_fn(|_, _| rng.random_range(0.03..0.35)),
            rotation: UnitQuat::new(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            ),
            opacity: rng.random_range(0.05..0.95),
            color: [rng.random(), rng.random(), rng.random()],
        })
        .collect();
    GaussianSet::new(gs)
}

fn probe(wr: &RgbImage, wa: &GrayImage, img: &RenderedImage) -> f64 {
    let a: f64 = wr.data.iter().zip(&img.rgb.data).map(|(w, v)| w * v).sum();
    let b: f64 = wa.data.iter().zip(&img.alpha.data).map(|(w, v)| w * v).sum();
    a + b
}

fn renderer_scene(rng: &mut ChaCha8Rng, sizes: &GradcheckSizes, out: &mut SuiteReport) -> Result<()> {
    let (w, h) = (sizes.width, sizes.height);
    let n = if sizes.max_gaussians == 0 { 0 } else { rng.random_range(1..=sizes.max_gaussians) };
    let cam = orbit_camera(rng, w, h)?;
    let set = random_set(rng, n);
    let cfg = RenderConfig {
        background: [rng.random(), rng.random(), rng.random()],
        ..RenderConfig::default()
    };
    let wr = RgbImage::from_fn(w, h, |_, _| std::array::from_fn(|_| rng.random_range(-1.0..1.0)));
    let wa = GrayImage::from_fn(w, h, |_, _| rng.random_range(-1.0..1.0));
    let grads = render_backward(&set, &cam, &cfg, &wr, &wa)?;
    for i in 0..set.len() {
        let base = set.gaussians[i].to_params();
        for c in 0..14 {
            let eval = |delta: f64| {
                let mut p = base;
                p[c] += delta;
                let mut s = set.clone();
                s.gaussians[i] = Gaussian3D::from_params(&p);
                probe(&wr, &wa, &render(&s, &cam, &cfg))
            };
            let fd = (eval(sizes.h) - eval(-sizes.h)) / (2.0 * sizes.h);
            out.record(param_class(c), grads.params[i][c], fd, sizes);
        }
    }
    Ok(())
}

fn chain_scene(rng: &mut ChaCha8Rng, sizes: &GradcheckSizes, out: &mut SuiteReport) -> Result<()> {
    // One 8x8 grid view: 64 Gaussians, the largest budget allowed.
    let cams = vec![orbit_camera(rng, 8, 8)?];
    let mut grid = PixelGaussianGrid::zeros(cams)?;
    for px in grid.raw.chunks_mut(raw::CHANNELS) {
        for (k, v) in px.iter_mut().enumerate() {
            *v = if k == raw::OPACITY { rng.random_range(-1.0..2.0) } else { rng.random_range(-1.2..1.2) };
        }
    }
    // The 3-level perceptual term needs at least 8 px per side.
    let (w, h) = (sizes.width.max(8), sizes.height.max(8));
    let mut targets = Vec::new();
    for _ in 0..2 {
        let camera = orbit_camera(rng, w, h)?;
        targets.push(FitTarget {
            camera,
            rgb: RgbImage::from_fn(w, h, |_, _| [rng.random(), rng.random(), rng.random()]),
            mask: GrayImage::from_fn(w, h, |_, _| (rng.random::<f64>() > 0.5) as u8 as f64),
        });
    }
    let cfg = FitConfig {
        decode: DecodeConfig::for_radius(3.0),
        ..FitConfig::default()
    };
    let refs: Vec<&FitTarget> = targets.iter().collect();
    let (_, an) = loss_and_grad(&grid, &refs, &cfg)?;
    let mut live: Vec<usize> = (0..an.len()).filter(|&i| an[i].abs() > 1e-5).collect();
    live.shuffle(rng);
    for &i in live.iter().take(sizes.chain_coords) {
        let eval = |delta: f64| -> Result<f64> {
            let mut g = grid.clone();
            g.raw[i] += delta;
            Ok(loss_and_grad(&g, &refs, &cfg)?.0.total)
        };
        let fd = (eval(sizes.h)? - eval(-sizes.h)?) / (2.0 * sizes.h);
        out.record(raw_class(i % raw::CHANNELS), an[i], fd, sizes);
    }
    Ok(())
}

/// Runs both suites over `sizes.scenes` seeded scenes. A configuration with
/// no Gaussians checks nothing and passes vacuously.
pub fn gradcheck(seed: u64, sizes: &GradcheckSizes) -> Result<GradcheckReport> {
    sizes.validate()?;
    let mut renderer = SuiteReport::default();
    let mut chain = SuiteReport::default();
    for s in 0..sizes.scenes {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(s as u64 + 1);
        renderer_scene(&mut rng, sizes, &mut renderer)?;
        if sizes.max_gaussians > 0 && sizes.chain_coords > 0 {
            chain_scene(&mut rng, sizes, &mut chain)?;
        }
    }
    renderer.finish(sizes.min_pass_fraction);
    chain.finish(sizes.min_pass_fraction);
    Ok(GradcheckReport {
        seed,
        sizes: *sizes,
        pass: renderer.pass && chain.pass,
        renderer,
        chain,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gaussians_pass_vacuously() {
        let sizes = GradcheckSizes {
            scenes: 3,
            max_gaussians: 0,
            ..GradcheckSizes::default()
        };
        let r = gradcheck(0, &sizes).unwrap();
        assert!(r.pass);
        assert_eq!(r.renderer.checked + r.chain.checked, 0);
    }

    #[test]
    fn report_has_every_parameter_class() {
        let sizes = GradcheckSizes {
            scenes: 2,
            max_gaussians: 6,
            chain_coords: 8,
            ..GradcheckSizes::default()
        };
        let r = gradcheck(1, &sizes).unwrap();
        for c in ["mean", "scale", "rot", "opacity", "color"] {
            assert!(r.renderer.classes.contains_key(c), "{c}");
        }
        assert!(r.chain.checked > 0);
        let json = serde_json::to_value(&r).unwrap();
        assert!(json["renderer"]["classes"]["mean"]["worst_rel"].is_number());
    }

    #[test]
    fn oversized_request_is_a_config_error() {
        let sizes = GradcheckSizes {
            width: 32,
            ..GradcheckSizes::default()
        };
        assert!(matches!(gradcheck(0, &sizes), Err(Error::Config(_))));
    }
}
