use crate::error::{Error, Result};
use crate::gaussian::{param, GaussianSet};
use crate::geometry::Camera;
use crate::image::{GrayImage, RgbImage};

use super::project::{project_backward, project_gaussian};
use super::{GaussianGrads, RenderConfig, RenderedImage};

#[derive(Clone, Copy, Debug)]
struct Splat {
    mx: f64,
    my: f64,
    /// Inverse 2D covariance `[[a, b], [b, c]]`.
    ca: f64,
    cb: f64,
    cc: f64,
    opacity: f64,
    color: [f64; 3],
    depth: f64,
    qmax: f64,
    id: u32,
}

/// The per-pixel hot fields of a splat, copied per tile for locality.
#[derive(Clone, Copy, Debug)]
struct Footprint {
    mx: f64,
    my: f64,
    ca: f64,
    cb: f64,
    cc: f64,
    opacity: f64,
    /// Conservative bound on `q` beyond which the pixel cannot contribute.
    qmax: f64,
}

/// Screen-space accumulators per splat: mean2d (2), conic (3), opacity, color (3).
type SplatGrad = [f64; 9];

/// One pixel's contribution, recorded during the replay in the backward pass.
#[derive(Clone, Copy)]
struct Contribution {
    local: u32,
    splat: u32,
    alpha: f64,
    transmittance: f64,
    dx: f64,
    dy: f64,
    clamped: bool,
}

/// Projected, depth-sorted and tile-binned Gaussians for one camera. Shared
/// by the forward and backward passes.
pub struct Prepared<'a> {
    set: &'a GaussianSet,
    cam: Camera,
    cfg: RenderConfig,
    splats: Vec<Splat>,
    tiles_x: usize,
    tile_lists: Vec<Vec<u32>>,
}

impl<'a> Prepared<'a> {
    pub fn new(set: &'a GaussianSet, cam: &Camera, cfg: &RenderConfig) -> Self {
        let (w, h) = (cam.width(), cam.height());
        let tile = cfg.tile.max(1);
        let tiles_x = w.div_ceil(tile);
        let tiles_y = h.div_ceil(tile);
        let k2 = cfg.footprint_sigma * cfg.footprint_sigma;

        // (splat, pixel bbox) for every Gaussian that can touch a pixel.
        let projected = cfg.exec.map_range(set.len(), |i| {
            let g = &set.gaussians[i];
            if g.opacity < cfg.alpha_cutoff {
                return None;
            }
            let p = project_gaussian(cam, g, cfg)?;
            let [sxx, sxy, syy] = p.cov2d;
            let det = sxx * syy - sxy * sxy;
            if !(det > 0.0) {
                return None;
            }
            // Pixels with q beyond this bound cannot pass the footprint or
            // cutoff tests; inflate slightly so the bbox stays conservative.
            let qmax = k2.min(2.0 * (g.opacity / cfg.alpha_cutoff).ln()) * (1.0 + 1e-9) + 1e-12;
            let rx = (qmax * sxx).sqrt();
            let ry = (qmax * syy).sqrt();
            let [mx, my] = p.mean2d;
            let x0 = (mx - rx - 0.5).ceil().max(0.0);
            let x1 = (mx + rx - 0.5).floor().min(w as f64 - 1.0);
            let y0 = (my - ry - 0.5).ceil().max(0.0);
            let y1 = (my + ry - 0.5).floor().min(h as f64 - 1.0);
            if x0 > x1 || y0 > y1 {
                return None;
            }
            let splat = Splat {
                mx,
                my,
                ca: syy / det,
                cb: -sxy / det,
                cc: sxx / det,
                opacity: g.opacity,
                color: g.color,
                depth: p.depth,
                qmax,
                id: i as u32,
            };
            let bbox = [
                x0 as usize / tile,
                x1 as usize / tile,
                y0 as usize / tile,
                y1 as usize / tile,
            ];
            Some((splat, bbox))
        });
        let mut visible: Vec<(Splat, [usize; 4])> = projected.into_iter().flatten().collect();
        // Stable global sort; equal depths keep input order.
        visible.sort_by(|a, b| a.0.depth.total_cmp(&b.0.depth).then(a.0.id.cmp(&b.0.id)));

        let mut tile_lists = vec![Vec::new(); tiles_x * tiles_y];
        for (pos, (_, [tx0, tx1, ty0, ty1])) in visible.iter().enumerate() {
            for ty in *ty0..=*ty1 {
                for tx in *tx0..=*tx1 {
                    tile_lists[ty * tiles_x + tx].push(pos as u32);
                }
            }
        }
        Prepared {
            set,
            cam: *cam,
            cfg: *cfg,
            splats: visible.into_iter().map(|(s, _)| s).collect(),
            tiles_x,
            tile_lists,
        }
    }

    /// Number of Gaussians that survived culling.
    pub fn visible(&self) -> usize {
        self.splats.len()
    }

    fn tile_pixels(&self, t: usize) -> impl Iterator<Item = (usize, usize)> {
        let tile = self.cfg.tile;
        let (tx, ty) = (t % self.tiles_x, t / self.tiles_x);
        let x0 = tx * tile;
        let y0 = ty * tile;
        let x1 = (x0 + tile).min(self.cam.width());
        let y1 = (y0 + tile).min(self.cam.height());
        (y0..y1).flat_map(move |y| (x0..x1).map(move |x| (x, y)))
    }

    fn footprints(&self, list: &[u32]) -> Vec<Footprint> {
        list.iter()
            .map(|&si| {
                let s = &self.splats[si as usize];
                Footprint {
                    mx: s.mx,
                    my: s.my,
                    ca: s.ca,
                    cb: s.cb,
                    cc: s.cc,
                    opacity: s.opacity,
                    qmax: s.qmax,
                }
            })
            .collect()
    }

    /// Walks one pixel front to back, calling `visit` for every contribution.
    /// Returns the final transmittance.
    #[inline]
    fn composite_pixel(
        &self,
        list: &[u32],
        fps: &[Footprint],
        x: usize,
        y: usize,
        mut visit: impl FnMut(Contribution),
    ) -> f64 {
        let cfg = &self.cfg;
        let k2 = cfg.footprint_sigma * cfg.footprint_sigma;
        let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
        let mut t = 1.0;
        for (local, s) in fps.iter().enumerate() {
            let dx = px - s.mx;
            let dy = py - s.my;
            let q = s.ca * dx * dx + 2.0 * s.cb * dx * dy + s.cc * dy * dy;
            if q > s.qmax || q > k2 {
                continue;
            }
            let a = s.opacity * (-0.5 * q).exp();
            if a < cfg.alpha_cutoff {
                continue;
            }
            let clamped = a > cfg.alpha_max;
            let a = if clamped { cfg.alpha_max } else { a };
            visit(Contribution {
                local: local as u32,
                splat: list[local],
                alpha: a,
                transmittance: t,
                dx,
                dy,
                clamped,
            });
            t *= 1.0 - a;
            if t < cfg.transmittance_floor {
                break;
            }
        }
        t
    }

    pub fn forward(&self) -> RenderedImage {
        let (w, h) = (self.cam.width(), self.cam.height());
        let bg = self.cfg.background;
        let with_depth = self.cfg.with_depth;
        let tiles = self.cfg.exec.map_range(self.tile_lists.len(), |t| {
            let list = &self.tile_lists[t];
            let fps = self.footprints(list);
            self.tile_pixels(t)
                .map(|(x, y)| {
                    let mut c = [0.0; 3];
                    let mut d = 0.0;
                    let tf = self.composite_pixel(list, &fps, x, y, |k| {
                        let s = &self.splats[k.splat as usize];
                        let wgt = k.alpha * k.transmittance;
                        for ch in 0..3 {
                            c[ch] += s.color[ch] * wgt;
                        }
                        if with_depth {
                            d += s.depth * wgt;
                        }
                    });
                    let rgb = [c[0] + tf * bg[0], c[1] + tf * bg[1], c[2] + tf * bg[2]];
                    (x, y, rgb, 1.0 - tf, d)
                })
                .collect::<Vec<_>>()
        });
        let mut rgb = RgbImage::new(w, h);
        let mut alpha = GrayImage::new(w, h);
        let mut depth = with_depth.then(|| GrayImage::new(w, h));
        for tile in tiles {
            for (x, y, c, a, d) in tile {
                rgb.set(x, y, c);
                alpha.set(x, y, a);
                if let Some(dimg) = depth.as_mut() {
                    dimg.set(x, y, d);
                }
            }
        }
        RenderedImage { rgb, alpha, depth }
    }

    pub fn backward(&self, grad_rgb: &RgbImage, grad_alpha: &GrayImage) -> Result<GaussianGrads> {
        let (w, h) = (self.cam.width(), self.cam.height());
        if grad_rgb.shape() != (w, h) || grad_alpha.shape() != (w, h) {
            return Err(Error::shape(
                format!("{w}x{h}"),
                format!("rgb {:?}, alpha {:?}", grad_rgb.shape(), grad_alpha.shape()),
            ));
        }
        if grad_rgb.data.iter().chain(&grad_alpha.data).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("upstream image gradient".into()));
        }
        let bg = self.cfg.background;
        let per_tile: Vec<Vec<SplatGrad>> = self.cfg.exec.map_range(self.tile_lists.len(), |t| {
            let list = &self.tile_lists[t];
            let mut acc = vec![[0.0; 9]; list.len()];
            if list.is_empty() {
                return acc;
            }
            let fps = self.footprints(list);
            let mut contribs: Vec<Contribution> = Vec::new();
            for (x, y) in self.tile_pixels(t) {
                let g_rgb = grad_rgb.get(x, y);
                let g_a = grad_alpha.get(x, y);
                if g_rgb == [0.0; 3] && g_a == 0.0 {
                    continue;
                }
                contribs.clear();
                let tf = self.composite_pixel(list, &fps, x, y, |k| contribs.push(k));
                // Color composited behind the current splat, background included.
                let mut behind = [tf * bg[0], tf * bg[1], tf * bg[2]];
                for k in contribs.iter().rev() {
                    let s = &self.splats[k.splat as usize];
                    let g = &mut acc[k.local as usize];
                    let one_minus = 1.0 - k.alpha;
                    let wgt = k.alpha * k.transmittance;
                    let mut g_alpha = g_a * tf / one_minus;
                    for ch in 0..3 {
                        g_alpha += g_rgb[ch] * (s.color[ch] * k.transmittance - behind[ch] / one_minus);
                        g[6 + ch] += g_rgb[ch] * wgt;
                        behind[ch] += s.color[ch] * wgt;
                    }
                    if k.clamped {
                        continue;
                    }
                    // alpha = opacity * exp(-q / 2)
                    g[5] += g_alpha * k.alpha / s.opacity;
                    let g_q = -0.5 * g_alpha * k.alpha;
                    let (dx, dy) = (k.dx, k.dy);
                    g[2] += g_q * dx * dx;
                    g[3] += g_q * 2.0 * dx * dy;
                    g[4] += g_q * dy * dy;
                    g[0] -= g_q * 2.0 * (s.ca * dx + s.cb * dy);
                    g[1] -= g_q * 2.0 * (s.cb * dx + s.cc * dy);
                }
            }
            acc
        });

        // Fixed-order reduction over tiles.
        let mut screen = vec![[0.0; 9]; self.splats.len()];
        for (list, acc) in self.tile_lists.iter().zip(&per_tile) {
            for (&si, g) in list.iter().zip(acc) {
                let dst = &mut screen[si as usize];
                for k in 0..9 {
                    dst[k] += g[k];
                }
            }
        }

        let per_splat = self.cfg.exec.map_range(self.splats.len(), |si| {
            let s = &self.splats[si];
            let sg = &screen[si];
            let mut out = [0.0; 14];
            out[param::OPACITY] = sg[5];
            out[param::COLOR..param::COLOR + 3].copy_from_slice(&sg[6..9]);
            // conic M = Σ⁻¹  =>  dL/dΣ = -M G M
            let m = nalgebra::Matrix2::new(s.ca, s.cb, s.cb, s.cc);
            let gm = nalgebra::Matrix2::new(sg[2], 0.5 * sg[3], 0.5 * sg[3], sg[4]);
            let gs = -(m * gm * m);
            let g = &self.set.gaussians[s.id as usize];
            project_backward(&self.cam, g, [sg[0], sg[1]], [gs[(0, 0)], gs[(0, 1)], gs[(1, 1)]], &mut out);
            out
        });
        let mut grads = GaussianGrads::zeros(self.set.len());
        for (s, g) in self.splats.iter().zip(per_splat) {
            grads.params[s.id as usize] = g;
        }
        Ok(grads)
    }
}
