//! Shared fixtures for the integration suites: random scenes, a brute-force
//! reference rasterizer and finite-difference helpers.
#![allow(dead_code, clippy::needless_range_loop)]

use gsrecon::gaussian::{Gaussian3D, GaussianSet};
use gsrecon::geometry::{intrinsics_from_fov, Camera, Vec3};
use gsrecon::image::{GrayImage, RgbImage};
use gsrecon::render::{RenderConfig, RenderedImage};
use nalgebra::{Matrix2, Matrix2x3, Matrix3, Quaternion, UnitQuaternion};
use rand::Rng;

/// Camera on a sphere of radius 3 looking at the origin.
pub fn random_camera(rng: &mut impl Rng, width: usize, height: usize) -> Camera {
    let k = intrinsics_from_fov(49.1, width, height).unwrap();
    let az = rng.random_range(0.0..std::f64::consts::TAU);
    let el = rng.random_range(-0.6..0.6f64);
    let pos = Vec3::new(el.cos() * az.sin(), el.sin(), el.cos() * az.cos()) * 3.0;
    Camera::look_at(k, pos, Vec3::zeros(), Vec3::y()).unwrap()
}

pub fn random_gaussian(rng: &mut impl Rng) -> Gaussian3D {
    let mean = Vec3::new(
        rng.random_range(-0.8..0.8),
        rng.random_range(-0.8..0.8),
        rng.random_range(-0.8..0.8),
    );
    let scale = Vec3::new(
        rng.random_range(0.03..0.35),
        rng.random_range(0.03..0.35),
        rng.random_range(0.03..0.35),
    );
    let q = gsrecon::geometry::UnitQuat::new(
        rng.random_range(-1.0..1.0),
        rng.random_range(-1.0..1.0),
        rng.random_range(-1.0..1.0),
        rng.random_range(-1.0..1.0),
    );
    Gaussian3D {
        mean,
        scale,
        rotation: q,
        opacity: rng.random_range(0.05..0.95),
        color: [rng.random(), rng.random(), rng.random()],
    }
}

pub fn random_scene(rng: &mut impl Rng, n: usize) -> GaussianSet {
    GaussianSet::new((0..n).map(|_| random_gaussian(rng)).collect())
}

/// Straightforward rasterizer: every Gaussian against every pixel, no tiles
/// and no bounding boxes. Rotation via nalgebra's quaternion type.
pub fn brute_force_render(set: &GaussianSet, cam: &Camera, cfg: &RenderConfig) -> RenderedImage {
    let k = cam.intrinsics;
    let w2c: Matrix3<f64> = cam.rotation;
    struct Flat {
        mx: f64,
        my: f64,
        inv: Matrix2<f64>,
        opacity: f64,
        color: [f64; 3],
        depth: f64,
        id: usize,
    }
    let mut flats = Vec::new();
    for (id, g) in set.gaussians.iter().enumerate() {
        let t = w2c * (g.mean - cam.position);
        if g.opacity < cfg.alpha_cutoff || !(t.z > cfg.near && t.z <= cfg.far) {
            continue;
        }
        let q = g.rotation;
        let r = UnitQuaternion::from_quaternion(Quaternion::new(q.w, q.x, q.y, q.z)).to_rotation_matrix();
        let s = Matrix3::from_diagonal(&g.scale);
        let sigma = r.matrix() * s * s * r.matrix().transpose();
        let j = Matrix2x3::new(
            k.fx / t.z,
            0.0,
            -k.fx * t.x / (t.z * t.z),
            0.0,
            k.fy / t.z,
            -k.fy * t.y / (t.z * t.z),
        );
        let c = j * w2c * sigma * w2c.transpose() * j.transpose();
        let cov = Matrix2::new(
            c[(0, 0)] + cfg.cov2d_eps,
            0.5 * (c[(0, 1)] + c[(1, 0)]),
            0.5 * (c[(0, 1)] + c[(1, 0)]),
            c[(1, 1)] + cfg.cov2d_eps,
        );
        let Some(inv) = cov.try_inverse() else { continue };
        flats.push(Flat {
            mx: k.fx * t.x / t.z + k.cx,
            my: k.fy * t.y / t.z + k.cy,
            inv,
            opacity: g.opacity,
            color: g.color,
            depth: t.z,
            id,
        });
    }
    flats.sort_by(|a, b| a.depth.partial_cmp(&b.depth).unwrap().then(a.id.cmp(&b.id)));

    let (w, h) = (cam.width(), cam.height());
    let mut rgb = RgbImage::new(w, h);
    let mut alpha = GrayImage::new(w, h);
    let k2 = cfg.footprint_sigma * cfg.footprint_sigma;
    for y in 0..h {
        for x in 0..w {
            let mut trans = 1.0;
            let mut c = [0.0; 3];
            for f in &flats {
                let d = nalgebra::Vector2::new(x as f64 + 0.5 - f.mx, y as f64 + 0.5 - f.my);
                let q = (d.transpose() * f.inv * d)[(0, 0)];
                if q > k2 {
                    continue;
                }
                let a = f.opacity * (-q / 2.0).exp();
                if a < cfg.alpha_cutoff {
                    continue;
                }
                let a = a.min(cfg.alpha_max);
                for ch in 0..3 {
                    c[ch] += f.color[ch] * a * trans;
                }
                trans *= 1.0 - a;
                if trans < cfg.transmittance_floor {
                    break;
                }
            }
            let bg = cfg.background;
            rgb.set(x, y, [c[0] + trans * bg[0], c[1] + trans * bg[1], c[2] + trans * bg[2]]);
            alpha.set(x, y, 1.0 - trans);
        }
    }
    RenderedImage { rgb, alpha, depth: None }
}

/// Linear functional `Σ wr·rgb + Σ wa·alpha` used to probe gradients.
pub struct Probe {
    pub wr: RgbImage,
    pub wa: GrayImage,
}

impl Probe {
    pub fn random(rng: &mut impl Rng, w: usize, h: usize) -> Self {
        Probe {
            wr: RgbImage::from_fn(w, h, |_, _| {
                [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]
            }),
            wa: GrayImage::from_fn(w, h, |_, _| rng.random_range(-1.0..1.0)),
        }
    }

    pub fn eval(&self, img: &RenderedImage) -> f64 {
        let a: f64 = self.wr.data.iter().zip(&img.rgb.data).map(|(w, v)| w * v).sum();
        let b: f64 = self.wa.data.iter().zip(&img.alpha.data).map(|(w, v)| w * v).sum();
        a + b
    }
}

/// Symmetric relative error, the comparison used by every gradient check.
pub fn rel_err(analytic: f64, fd: f64) -> f64 {
    (analytic - fd).abs() / analytic.abs().max(fd.abs()).max(1e-300)
}

/// Tally of gradient comparisons over coordinates whose FD magnitude is
/// above `floor`.
#[derive(Default, Debug)]
pub struct GradTally {
    pub checked: usize,
    pub passed: usize,
    pub worst: f64,
}

impl GradTally {
    pub fn record(&mut self, analytic: f64, fd: f64, floor: f64, tol: f64) {
        if fd.abs() <= floor {
            return;
        }
        let e = rel_err(analytic, fd);
        self.checked += 1;
        if e <= tol {
            self.passed += 1;
        }
        if e > self.worst {
            self.worst = e;
        }
    }

    pub fn fraction(&self) -> f64 {
        if self.checked == 0 {
            1.0
        } else {
            self.passed as f64 / self.checked as f64
        }
    }
}

/// Max abs pixel difference (rgb and alpha) between the tiled renderer and
/// the brute-force reference on one random scene.
pub fn oracle_scene_diff(seed: u64) -> f64 {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let w = rng.random_range(16..=64);
    let h = rng.random_range(16..=64);
    let n = rng.random_range(1..=64);
    let cam = random_camera(&mut rng, w, h);
    let set = random_scene(&mut rng, n);
    let cfg = RenderConfig {
        background: if seed.is_multiple_of(2) { [0.0; 3] } else { [rng.random(), rng.random(), rng.random()] },
        tile: [4, 8, 16][seed as usize % 3],
        ..RenderConfig::default()
    };
    let fast = gsrecon::render::render(&set, &cam, &cfg);
    let slow = brute_force_render(&set, &cam, &cfg);
    let a = fast.rgb.max_abs_diff(&slow.rgb);
    let b = fast
        .alpha
        .data
        .iter()
        .zip(&slow.alpha.data)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max);
    a.max(b)
}

/// Central-difference check of the render backward pass on one random
/// scene, over every parameter coordinate.
pub fn render_grad_check(seed: u64, h: f64, tol: f64) -> GradTally {
    use gsrecon::render::{render, render_backward};
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let (w, hgt) = (16, 16);
    let n = rng.random_range(2..=16);
    let cam = random_camera(&mut rng, w, hgt);
    let set = random_scene(&mut rng, n);
    let cfg = RenderConfig {
        background: [rng.random(), rng.random(), rng.random()],
        ..RenderConfig::default()
    };
    let probe = Probe::random(&mut rng, w, hgt);
    let grads = render_backward(&set, &cam, &cfg, &probe.wr, &probe.wa).unwrap();
    let mut tally = GradTally::default();
    for i in 0..set.len() {
        let base = set.gaussians[i].to_params();
        for c in 0..14 {
            let eval = |delta: f64| {
                let mut p = base;
                p[c] += delta;
                let mut s = set.clone();
                s.gaussians[i] = Gaussian3D::from_params(&p);
                probe.eval(&render(&s, &cam, &cfg))
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            tally.record(grads.params[i][c], fd, 1e-6, tol);
        }
    }
    tally
}

/// Spot check of the full decode -> render -> loss chain on raw grid
/// coordinates.
pub fn chain_grad_check(seed: u64, coords: usize, h: f64, tol: f64) -> GradTally {
    use gsrecon::gaussian::{raw, DecodeConfig, PixelGaussianGrid};
    use gsrecon::loss::LossWeights;
    use gsrecon::optim::{loss_and_grad, FitConfig, FitTarget};
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    // One 8x8 grid view (64 Gaussians) and 16x16 targets: the largest
    // sizes at which 64-bit central differences are expected to work.
    let grid_cams: Vec<Camera> = vec![random_camera(&mut rng, 8, 8)];
    let mut grid = PixelGaussianGrid::zeros(grid_cams).unwrap();
    for px in grid.raw.chunks_mut(raw::CHANNELS) {
        for (k, v) in px.iter_mut().enumerate() {
            *v = if k == raw::OPACITY { rng.random_range(-1.0..2.0) } else { rng.random_range(-1.2..1.2) };
        }
    }
    let targets: Vec<FitTarget> = (0..2)
        .map(|_| {
            let cam = random_camera(&mut rng, 16, 16);
            FitTarget {
                camera: cam,
                rgb: RgbImage::from_fn(16, 16, |_, _| [rng.random(), rng.random(), rng.random()]),
                mask: GrayImage::from_fn(16, 16, |_, _| (rng.random::<f64>() > 0.5) as u8 as f64),
            }
        })
        .collect();
    let cfg = FitConfig {
        decode: DecodeConfig::for_radius(3.0),
        loss: LossWeights::default(),
        ..FitConfig::default()
    };
    let refs: Vec<&FitTarget> = targets.iter().collect();
    let (_, an) = loss_and_grad(&grid, &refs, &cfg).unwrap();
    let mut live: Vec<usize> = (0..an.len()).filter(|&i| an[i].abs() > 1e-5).collect();
    live.shuffle(&mut rng);
    let mut tally = GradTally::default();
    for &i in live.iter().take(coords) {
        let eval = |delta: f64| {
            let mut g = grid.clone();
            g.raw[i] += delta;
            loss_and_grad(&g, &refs, &cfg).unwrap().0.total
        };
        let fd = (eval(h) - eval(-h)) / (2.0 * h);
        tally.record(an[i], fd, 1e-6, tol);
    }
    tally
}
