//! Adam with a warmup + cosine-annealed learning rate, and the fitting loop
//! that drives a [`PixelGaussianGrid`] through decode, render, loss and the
//! two backward passes.

use std::path::Path;
use std::time::Instant;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gaussian::{decode_backward, decode_pixel_gaussians, raw, DecodeConfig, PixelGaussianGrid};
use crate::geometry::Camera;
use crate::image::{GrayImage, RgbImage};
use crate::loss::{total_loss, LossBreakdown, LossWeights};
use crate::render::{GaussianGrads, Prepared, RenderConfig};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimConfig {
    pub lr0: f64,
    pub total_steps: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub lr_min: f64,
    pub warmup_steps: usize,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            lr0: 4e-4,
            total_steps: 2000,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            lr_min: 0.0,
            warmup_steps: 100,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr0 > 0.0 && self.lr_min >= 0.0 && self.lr_min <= self.lr0) {
            return Err(Error::invalid("optimizer needs 0 <= lr_min <= lr0 and lr0 > 0"));
        }
        if !(self.beta1 >= 0.0 && self.beta1 < 1.0 && self.beta2 > 0.0 && self.beta2 < 1.0) {
            return Err(Error::invalid("Adam betas must lie in [0, 1) and (0, 1)"));
        }
        Ok(())
    }
}

/// Learning rate at `step`: linear warmup reaching `lr0` at `warmup_steps`,
/// then cosine annealing down to `lr_min` at `total_steps`.
pub fn lr_at(cfg: &OptimConfig, step: usize) -> Result<f64> {
    if step > cfg.total_steps {
        return Err(Error::invalid(format!(
            "step {step} outside schedule of {} steps",
            cfg.total_steps
        )));
    }
    if step < cfg.warmup_steps {
        return Ok(cfg.lr0 * (step + 1) as f64 / (cfg.warmup_steps + 1) as f64);
    }
    let span = cfg.total_steps.saturating_sub(cfg.warmup_steps);
    let tau = if span == 0 {
        1.0
    } else {
        (step - cfg.warmup_steps) as f64 / span as f64
    };
    Ok(cfg.lr_min + (cfg.lr0 - cfg.lr_min) * 0.5 * (1.0 + (std::f64::consts::PI * tau).cos()))
}

/// Adam moment buffers.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: usize,
}

impl OptimState {
    pub fn new(n: usize) -> Self {
        OptimState {
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
        }
    }

    /// One bias-corrected Adam update of `params` in place.
    pub fn step_slice(&mut self, params: &mut [f64], grads: &[f64], lr: f64, cfg: &OptimConfig) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != params.len() {
            return Err(Error::shape(self.m.len(), format!("{} params, {} grads", params.len(), grads.len())));
        }
        if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
            return Err(Error::NonFinite(format!("gradient coordinate {i}")));
        }
        self.step += 1;
        let bc1 = 1.0 - cfg.beta1.powi(self.step as i32);
        let bc2 = 1.0 - cfg.beta2.powi(self.step as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = cfg.beta1 * self.m[i] + (1.0 - cfg.beta1) * g;
            self.v[i] = cfg.beta2 * self.v[i] + (1.0 - cfg.beta2) * g * g;
            let mh = self.m[i] / bc1;
            let vh = self.v[i] / bc2;
            params[i] -= lr * mh / (vh.sqrt() + cfg.eps);
        }
        Ok(())
    }

    /// Adam update of a raw grid; non-finite gradients are reported by
    /// view, pixel and channel.
    pub fn step(&mut self, grid: &mut PixelGaussianGrid, grads: &[f64], lr: f64, cfg: &OptimConfig) -> Result<()> {
        if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
            let (v, x, y) = grid.locate(i / raw::CHANNELS);
            return Err(Error::NonFinite(format!(
                "gradient at view {v} pixel ({x}, {y}) channel {}",
                i % raw::CHANNELS
            )));
        }
        self.step_slice(&mut grid.raw, grads, lr, cfg)
    }
}

/// One supervised view: camera at render resolution, target image and mask.
#[derive(Clone, Debug)]
pub struct FitTarget {
    pub camera: Camera,
    pub rgb: RgbImage,
    pub mask: GrayImage,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitConfig {
    pub optim: OptimConfig,
    pub loss: LossWeights,
    pub render: RenderConfig,
    pub decode: DecodeConfig,
    /// Views supervised per step; `None` means all.
    pub views_per_step: Option<usize>,
    /// Write a grid checkpoint every this many steps (0 disables).
    pub checkpoint_every: usize,
    pub divergence_factor: f64,
    pub divergence_patience: usize,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            optim: OptimConfig::default(),
            loss: LossWeights::default(),
            render: RenderConfig::default(),
            decode: DecodeConfig::default(),
            views_per_step: None,
            checkpoint_every: 0,
            divergence_factor: 10.0,
            divergence_patience: 50,
        }
    }
}

/// One line of the JSON-lines fit log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitLogRecord {
    pub step: usize,
    pub lr: f64,
    pub mse: f64,
    pub perceptual: f64,
    pub silhouette: f64,
    pub total: f64,
    pub wall_ms: f64,
}

#[derive(Clone, Debug)]
pub struct FitOutcome {
    pub grid: PixelGaussianGrid,
    pub log: Vec<FitLogRecord>,
    /// Loss of the final grid on all targets.
    pub final_loss: LossBreakdown,
}

/// Loss and raw-grid gradient of `grid` against the selected targets.
pub fn loss_and_grad(
    grid: &PixelGaussianGrid,
    targets: &[&FitTarget],
    cfg: &FitConfig,
) -> Result<(LossBreakdown, Vec<f64>)> {
    let set = decode_pixel_gaussians(grid, &cfg.decode)?;
    let prepared: Vec<Prepared> = targets
        .iter()
        .map(|t| Prepared::new(&set, &t.camera, &cfg.render))
        .collect();
    let renders: Vec<_> = prepared.iter().map(Prepared::forward).collect();
    let gts: Vec<RgbImage> = targets.iter().map(|t| t.rgb.clone()).collect();
    let masks: Vec<GrayImage> = targets.iter().map(|t| t.mask.clone()).collect();
    let (breakdown, view_grads) = total_loss(&renders, &gts, &masks, &cfg.loss, cfg.render.exec)?;
    let mut grads = GaussianGrads::zeros(set.len());
    for (p, g) in prepared.iter().zip(&view_grads) {
        grads.add_assign(&p.backward(&g.rgb, &g.alpha)?);
    }
    let raw = decode_backward(grid, &cfg.decode, &grads)?;
    Ok((breakdown, raw))
}

/// Minimizes the composite loss over the raw grid with Adam.
pub fn fit(
    mut grid: PixelGaussianGrid,
    targets: &[FitTarget],
    cfg: &FitConfig,
    seed: u64,
    checkpoint_dir: Option<&Path>,
) -> Result<FitOutcome> {
    cfg.optim.validate()?;
    cfg.render.validate()?;
    if targets.is_empty() {
        return Err(Error::invalid("fit needs at least one target view"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut state = OptimState::new(grid.raw.len());
    let mut log = Vec::with_capacity(cfg.optim.total_steps);
    let mut initial = None;
    let mut above = 0usize;
    let start = Instant::now();
    for step in 0..cfg.optim.total_steps {
        let chosen: Vec<&FitTarget> = match cfg.views_per_step {
            Some(k) if k < targets.len() => {
                let mut idx = sample(&mut rng, targets.len(), k).into_vec();
                idx.sort_unstable();
                idx.into_iter().map(|i| &targets[i]).collect()
            }
            _ => targets.iter().collect(),
        };
        let (loss, grads) = loss_and_grad(&grid, &chosen, cfg)?;
        let lr = lr_at(&cfg.optim, step)?;
        log.push(FitLogRecord {
            step,
            lr,
            mse: loss.mse,
            perceptual: loss.perceptual,
            silhouette: loss.silhouette,
            total: loss.total,
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
        });
        let init = *initial.get_or_insert(loss.total);
        if loss.total > cfg.divergence_factor * init {
            above += 1;
            if above >= cfg.divergence_patience {
                return Err(Error::Diverged {
                    step,
                    loss: loss.total,
                    initial: init,
                });
            }
        } else {
            above = 0;
        }
        state.step(&mut grid, &grads, lr, &cfg.optim)?;
        if let Some(dir) = checkpoint_dir {
            if cfg.checkpoint_every > 0 && (step + 1) % cfg.checkpoint_every == 0 {
                grid.save(&dir.join(format!("grid_{:06}", step + 1)))?;
            }
        }
    }
    let all: Vec<&FitTarget> = targets.iter().collect();
    let (final_loss, _) = loss_and_grad(&grid, &all, cfg)?;
    Ok(FitOutcome {
        grid,
        log,
        final_loss,
    })
}
