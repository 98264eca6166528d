//! Composite reconstruction objective: photometric MSE, a multi-scale
//! perceptual proxy, and silhouette MSE on the rendered alpha.
//!
//! `perceptual_proxy` stands in for a learned perceptual metric: it averages,
//! over a 2x average-pool pyramid, the image MSE plus the MSE of
//! finite-difference gradient magnitudes. It is reported under its own name.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::ExecMode;
use crate::image::{GrayImage, RgbImage};
use crate::render::RenderedImage;

/// Name under which the perceptual term appears in logs and reports.
pub const PERCEPTUAL_NAME: &str = "perceptual_proxy";

/// Regularizer inside the gradient-magnitude square root.
const GRAD_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    /// Weight of the perceptual term.
    pub lambda1: f64,
    /// Weight of the silhouette term.
    pub lambda2: f64,
    pub perceptual_levels: usize,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda1: 1.5,
            lambda2: 1.0,
            perceptual_levels: 3,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ViewLoss {
    pub mse: f64,
    pub perceptual: f64,
    pub silhouette: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub mse: f64,
    pub perceptual: f64,
    pub silhouette: f64,
    /// Always `mse + lambda1 * perceptual + lambda2 * silhouette`.
    pub total: f64,
    pub per_view: Vec<ViewLoss>,
}

/// A `width x height x channels` interleaved buffer.
#[derive(Clone, Copy)]
struct Planes<'a> {
    width: usize,
    height: usize,
    channels: usize,
    data: &'a [f64],
}

impl<'a> From<&'a RgbImage> for Planes<'a> {
    fn from(i: &'a RgbImage) -> Self {
        Planes {
            width: i.width,
            height: i.height,
            channels: 3,
            data: &i.data,
        }
    }
}

impl<'a> From<&'a GrayImage> for Planes<'a> {
    fn from(i: &'a GrayImage) -> Self {
        Planes {
            width: i.width,
            height: i.height,
            channels: 1,
            data: &i.data,
        }
    }
}

fn check_shapes(a: Planes, b: Planes) -> Result<()> {
    if (a.width, a.height, a.channels) != (b.width, b.height, b.channels) {
        return Err(Error::shape(
            format!("{}x{}x{}", b.width, b.height, b.channels),
            format!("{}x{}x{}", a.width, a.height, a.channels),
        ));
    }
    Ok(())
}

fn mse_raw(pred: &[f64], gt: &[f64]) -> (f64, Vec<f64>) {
    let n = pred.len().max(1) as f64;
    let mut sum = 0.0;
    let grad = pred
        .iter()
        .zip(gt)
        .map(|(p, g)| {
            let d = p - g;
            sum += d * d;
            2.0 * d / n
        })
        .collect();
    (sum / n, grad)
}

/// Mean squared error and its gradient w.r.t. `pred`.
pub fn mse_loss(pred: &RgbImage, gt: &RgbImage) -> Result<(f64, RgbImage)> {
    check_shapes(pred.into(), gt.into())?;
    let (v, g) = mse_raw(&pred.data, &gt.data);
    Ok((
        v,
        RgbImage {
            width: pred.width,
            height: pred.height,
            data: g,
        },
    ))
}

/// MSE between rendered alpha and the target mask.
pub fn silhouette_loss(pred_alpha: &GrayImage, gt_mask: &GrayImage) -> Result<(f64, GrayImage)> {
    check_shapes(pred_alpha.into(), gt_mask.into())?;
    let (v, g) = mse_raw(&pred_alpha.data, &gt_mask.data);
    Ok((
        v,
        GrayImage {
            width: pred_alpha.width,
            height: pred_alpha.height,
            data: g,
        },
    ))
}

#[derive(Clone)]
struct Level {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

fn pool2(l: &Level, ch: usize) -> Level {
    let (w, h) = (l.width / 2, l.height / 2);
    let mut data = vec![0.0; w * h * ch];
    for y in 0..h {
        for x in 0..w {
            for c in 0..ch {
                let at = |xx: usize, yy: usize| l.data[(yy * l.width + xx) * ch + c];
                data[(y * w + x) * ch + c] = 0.25
                    * (at(2 * x, 2 * y) + at(2 * x + 1, 2 * y) + at(2 * x, 2 * y + 1) + at(2 * x + 1, 2 * y + 1));
            }
        }
    }
    Level { width: w, height: h, data }
}

/// Forward differences `(gx, gy, magnitude)` on the `(w-1) x (h-1)` interior.
fn grad_mag(l: &Level, ch: usize) -> Vec<[f64; 3]> {
    let (w, h) = (l.width, l.height);
    let mut out = Vec::with_capacity((w - 1) * (h - 1) * ch);
    for y in 0..h - 1 {
        for x in 0..w - 1 {
            for c in 0..ch {
                let i = (y * w + x) * ch + c;
                let gx = l.data[i + ch] - l.data[i];
                let gy = l.data[i + w * ch] - l.data[i];
                out.push([gx, gy, (gx * gx + gy * gy + GRAD_EPS).sqrt()]);
            }
        }
    }
    out
}

fn perceptual_planes(pred: Planes, gt: Planes, levels: usize) -> Result<(f64, Vec<f64>)> {
    check_shapes(pred, gt)?;
    if levels == 0 {
        return Err(Error::invalid("perceptual proxy needs at least one level"));
    }
    let min_side = 1usize << levels;
    if pred.width < min_side || pred.height < min_side {
        return Err(Error::invalid(format!(
            "image {}x{} smaller than 2^{levels} = {min_side}",
            pred.width, pred.height
        )));
    }
    let ch = pred.channels;
    let mut ps = vec![Level {
        width: pred.width,
        height: pred.height,
        data: pred.data.to_vec(),
    }];
    let mut gs = vec![Level {
        width: gt.width,
        height: gt.height,
        data: gt.data.to_vec(),
    }];
    for l in 1..levels {
        ps.push(pool2(&ps[l - 1], ch));
        gs.push(pool2(&gs[l - 1], ch));
    }

    let inv_levels = 1.0 / levels as f64;
    let mut value = 0.0;
    // Gradient w.r.t. each pyramid level, before pooling back.
    let mut direct: Vec<Vec<f64>> = Vec::with_capacity(levels);
    for (p, g) in ps.iter().zip(&gs) {
        let (img_mse, mut grad) = mse_raw(&p.data, &g.data);
        let gp = grad_mag(p, ch);
        let gg = grad_mag(g, ch);
        let n = gp.len() as f64;
        let mut gm_mse = 0.0;
        let (w, h) = (p.width, p.height);
        let mut k = 0;
        for y in 0..h - 1 {
            for x in 0..w - 1 {
                for c in 0..ch {
                    let [gx, gy, m] = gp[k];
                    let d = m - gg[k][2];
                    k += 1;
                    gm_mse += d * d;
                    let dm = 2.0 * d / n;
                    let (dgx, dgy) = (dm * gx / m, dm * gy / m);
                    let i = (y * w + x) * ch + c;
                    grad[i + ch] += dgx;
                    grad[i + w * ch] += dgy;
                    grad[i] -= dgx + dgy;
                }
            }
        }
        value += img_mse + gm_mse / n;
        grad.iter_mut().for_each(|v| *v *= inv_levels);
        direct.push(grad);
    }
    value *= inv_levels;

    // Coarse-to-fine: push each level's gradient through its pooling.
    for l in (1..levels).rev() {
        let (fine, coarse) = direct.split_at_mut(l);
        let fine = &mut fine[l - 1];
        let coarse = &coarse[0];
        let (cw, chh) = (ps[l].width, ps[l].height);
        let fw = ps[l - 1].width;
        for y in 0..chh {
            for x in 0..cw {
                for c in 0..ch {
                    let g = 0.25 * coarse[(y * cw + x) * ch + c];
                    for (dx, dy) in [(0, 0), (1, 0), (0, 1), (1, 1)] {
                        fine[((2 * y + dy) * fw + 2 * x + dx) * ch + c] += g;
                    }
                }
            }
        }
    }
    Ok((value, direct.swap_remove(0)))
}

/// Multi-scale image + gradient-magnitude MSE and its gradient w.r.t. `pred`.
pub fn perceptual_proxy(pred: &RgbImage, gt: &RgbImage, levels: usize) -> Result<(f64, RgbImage)> {
    let (v, g) = perceptual_planes(pred.into(), gt.into(), levels)?;
    Ok((
        v,
        RgbImage {
            width: pred.width,
            height: pred.height,
            data: g,
        },
    ))
}

/// Per-view gradients of the total loss.
#[derive(Clone, Debug)]
pub struct ViewGrad {
    pub rgb: RgbImage,
    pub alpha: GrayImage,
}

/// Mean over views of `mse + lambda1 * perceptual + lambda2 * silhouette`.
pub fn total_loss(
    renders: &[RenderedImage],
    gts: &[RgbImage],
    masks: &[GrayImage],
    w: &LossWeights,
    exec: ExecMode,
) -> Result<(LossBreakdown, Vec<ViewGrad>)> {
    if renders.len() != gts.len() || renders.len() != masks.len() {
        return Err(Error::shape(
            format!("{} targets and masks", renders.len()),
            format!("{} targets, {} masks", gts.len(), masks.len()),
        ));
    }
    if renders.is_empty() {
        return Err(Error::invalid("total loss needs at least one view"));
    }
    let n = renders.len() as f64;
    let per = exec.map_range(renders.len(), |i| -> Result<(ViewLoss, ViewGrad)> {
        let (mse, g_mse) = mse_loss(&renders[i].rgb, &gts[i])?;
        let (perc, g_perc) = perceptual_proxy(&renders[i].rgb, &gts[i], w.perceptual_levels)?;
        let (sil, g_sil) = silhouette_loss(&renders[i].alpha, &masks[i])?;
        let mut rgb = g_mse;
        for (a, b) in rgb.data.iter_mut().zip(&g_perc.data) {
            *a = (*a + w.lambda1 * b) / n;
        }
        let mut alpha = g_sil;
        alpha.data.iter_mut().for_each(|a| *a *= w.lambda2 / n);
        Ok((
            ViewLoss {
                mse,
                perceptual: perc,
                silhouette: sil,
            },
            ViewGrad { rgb, alpha },
        ))
    });
    let mut out = LossBreakdown::default();
    let mut grads = Vec::with_capacity(per.len());
    for r in per {
        let (v, g) = r?;
        out.mse += v.mse;
        out.perceptual += v.perceptual;
        out.silhouette += v.silhouette;
        out.per_view.push(v);
        grads.push(g);
    }
    out.mse /= n;
    out.perceptual /= n;
    out.silhouette /= n;
    out.total = out.mse + w.lambda1 * out.perceptual + w.lambda2 * out.silhouette;
    Ok((out, grads))
}
