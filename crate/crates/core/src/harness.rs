//! Experiment orchestration: configs, content-addressed run directories,
//! single fits and sweeps.
//!
//! A run goes rig -> scene -> inputs -> occlusion -> provider -> fit ->
//! render -> metrics, and writes everything under
//! `<run root>/fit-<config hash>/`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::gaussian::{decode_pixel_gaussians, DecodeConfig, GaussianSet, GridInit, PixelGaussianGrid};
use crate::geometry::{Camera, Vec3};
use crate::image::RgbImage;
use crate::loss::{LossWeights, PERCEPTUAL_NAME};
use crate::metrics::{geometry_metrics, MetricsReport, ViewMetrics};
use crate::occlusion::{apply_occlusion, generate_mask, OcclusionSpec};
use crate::optim::{fit, FitConfig, FitTarget, OptimConfig};
use crate::pose::{poses_for_canonical_views, render_pose_image};
use crate::provider::{provide, write_provider_dir, Provenance, ProviderConfig, ProviderRequest, SceneHandle};
use crate::render::{render, RenderConfig};
use crate::rig::{build_rig, input_plus_targets, same_pose, RigSpec};
use crate::scene::{default_humanoid, raymarch_render, CapsuleScene, RaymarchConfig, Skeleton};

/// Environment variable naming the directory runs are written under.
pub const RUN_ROOT_ENV: &str = "GSRECON_RUN_ROOT";
pub const DEFAULT_RUN_ROOT: &str = "runs";
/// Stereo separations (degrees) the protocol supports.
pub const STEREO_SEPARATIONS: [f64; 3] = [45.0, 90.0, 135.0];
const POSE_TOL: f64 = 1e-9;

/// `explicit`, else `$GSRECON_RUN_ROOT`, else `./runs`.
pub fn run_root(explicit: Option<&Path>) -> PathBuf {
    explicit
        .map(Path::to_path_buf)
        .or_else(|| std::env::var_os(RUN_ROOT_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from(DEFAULT_RUN_ROOT))
}

/// Rotation of a joint's subtree applied to the rest pose.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Articulation {
    pub joint: usize,
    pub axis: [f64; 3],
    pub degrees: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneConfig {
    pub articulations: Vec<Articulation>,
}

impl SceneConfig {
    pub fn skeleton(&self) -> Result<Skeleton> {
        let mut s = Skeleton::rest_pose();
        for a in &self.articulations {
            if a.joint >= s.len() {
                return Err(Error::Config(format!("articulation joint {} out of range", a.joint)));
            }
            s = s.rotate_subtree(a.joint, Vec3::from(a.axis), a.degrees);
        }
        s.validate()?;
        Ok(s)
    }

    pub fn build(&self) -> Result<(Skeleton, CapsuleScene)> {
        let s = self.skeleton()?;
        let scene = default_humanoid(&s)?;
        Ok((s, scene))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalSplit {
    /// Evaluate on rig views whose pose no supervised view shares.
    #[default]
    Holdout,
    /// Evaluate on every rig view (parity runs).
    All,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub rig: RigSpec,
    pub scene: SceneConfig,
    pub raymarch: RaymarchConfig,
    pub occlusion: Option<OcclusionSpec>,
    pub provider: ProviderConfig,
    /// Per-view grid side; must divide the rig resolution.
    pub grid_resolution: usize,
    pub grid_init: GridInit,
    pub optim: OptimConfig,
    pub loss: LossWeights,
    pub render: RenderConfig,
    pub views_per_step: Option<usize>,
    /// Replace a provider view that shares an input's pose with that input
    /// (occluded pixels still come from the provider).
    pub anchor_inputs: bool,
    /// One azimuth for single input; two for stereo.
    pub input_azimuths: Vec<f64>,
    pub eval: EvalSplit,
    pub opacity_threshold: f64,
    /// Surface samples in the geometric reference cloud.
    pub geometry_samples: usize,
    pub seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            rig: RigSpec::default().with_resolution(128, 128),
            scene: SceneConfig::default(),
            raymarch: RaymarchConfig::default(),
            occlusion: None,
            provider: ProviderConfig::Oracle,
            grid_resolution: 64,
            grid_init: GridInit::default(),
            optim: OptimConfig {
                lr0: DEFAULT_FIT_LR,
                ..OptimConfig::default()
            },
            loss: LossWeights::default(),
            render: RenderConfig::default(),
            views_per_step: None,
            anchor_inputs: true,
            input_azimuths: vec![0.0],
            eval: EvalSplit::Holdout,
            opacity_threshold: 0.05,
            geometry_samples: 4096,
            seed: 0,
        }
    }
}

/// Peak learning rate used by experiment fits. The grid is raw
/// (pre-activation) parameters, so it takes a much larger step than a
/// network would.
pub const DEFAULT_FIT_LR: f64 = 0.03;

fn cfg_err(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        let r = &self.rig;
        if r.width != r.height {
            return Err(cfg_err(format!("rig images must be square, got {}x{}", r.width, r.height)));
        }
        if self.grid_resolution == 0 || !r.width.is_multiple_of(self.grid_resolution) {
            return Err(cfg_err(format!(
                "grid resolution {} must divide the rig resolution {}",
                self.grid_resolution, r.width
            )));
        }
        match self.input_azimuths.as_slice() {
            [_] => {}
            [a, b] => {
                let sep = (b - a).rem_euclid(360.0);
                if !STEREO_SEPARATIONS.iter().any(|s| (s - sep).abs() < 1e-9) {
                    return Err(cfg_err(format!(
                        "stereo separation {sep} deg not in {STEREO_SEPARATIONS:?}"
                    )));
                }
            }
            other => return Err(cfg_err(format!("need 1 or 2 input azimuths, got {}", other.len()))),
        }
        if let Some(o) = &self.occlusion {
            o.validate().map_err(|e| cfg_err(e.to_string()))?;
        }
        if let ProviderConfig::Degraded {
            noise_sigma,
            pose_jitter_deg,
            ..
        } = self.provider
        {
            if !(noise_sigma >= 0.0 && pose_jitter_deg >= 0.0) {
                return Err(cfg_err("degraded provider needs non-negative sigma and jitter"));
            }
        }
        if !(self.opacity_threshold > 0.0 && self.opacity_threshold < 1.0) {
            return Err(cfg_err("opacity_threshold must lie in (0, 1)"));
        }
        self.optim.validate().map_err(|e| cfg_err(e.to_string()))?;
        self.render.validate().map_err(|e| cfg_err(e.to_string()))?;
        self.scene.skeleton().map_err(|e| match e {
            Error::Config(_) => e,
            other => cfg_err(other.to_string()),
        })?;
        Ok(())
    }

    /// Loads a config file, or the config embedded in a run manifest.
    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| cfg_err(format!("{}: {e}", path.display())))?;
        let value: serde_json::Value =
            serde_json::from_slice(&bytes).map_err(|e| cfg_err(format!("{}: {e}", path.display())))?;
        let value = if value.get("config_hash").is_some() {
            value["config"].clone()
        } else {
            value
        };
        serde_json::from_value(value).map_err(|e| cfg_err(format!("{}: {e}", path.display())))
    }

    /// Hex SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn run_dir(&self, root: &Path) -> PathBuf {
        root.join(format!("fit-{}", &self.hash()[..16]))
    }

    pub fn decode(&self) -> DecodeConfig {
        DecodeConfig::for_radius(self.rig.radius)
    }

    pub fn stereo_separation(&self) -> Option<f64> {
        match self.input_azimuths.as_slice() {
            [a, b] => Some((b - a).rem_euclid(360.0)),
            _ => None,
        }
    }
}

/// One supervised image and where it came from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SupervisedView {
    /// `input` or `provider`.
    pub source: String,
    pub index: usize,
    pub azimuth: f64,
    /// Rig view sharing this pose, if any.
    pub rig_view: Option<usize>,
    /// Input whose image replaced this provider view.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub anchored_to: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentManifest {
    pub tool_version: String,
    pub config_hash: String,
    pub config: ExperimentConfig,
    pub provenance: Option<Provenance>,
    /// Artifact name -> path relative to the run directory.
    pub artifacts: BTreeMap<String, PathBuf>,
    pub timings_ms: BTreeMap<String, f64>,
    pub supervised: Vec<SupervisedView>,
    pub eval_views: Vec<usize>,
    /// `complete`, or `failed in <stage>: <error>`.
    pub status: String,
}

impl ExperimentManifest {
    fn new(cfg: &ExperimentConfig) -> Self {
        ExperimentManifest {
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            config_hash: cfg.hash(),
            config: cfg.clone(),
            provenance: None,
            artifacts: BTreeMap::new(),
            timings_ms: BTreeMap::new(),
            supervised: Vec::new(),
            eval_views: Vec::new(),
            status: "running".into(),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_slice(&fs::read(path)?)?)
    }
}

/// Report written as `report.json`: protocol tags plus the metrics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    /// Requested occlusion fraction (0 for clean input).
    pub occlusion: f64,
    /// Achieved silhouette coverage per input.
    pub occlusion_coverage: Vec<f64>,
    pub stereo_separation: Option<f64>,
    pub supervised_views: usize,
    pub eval_views: Vec<usize>,
    pub metrics: MetricsReport,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct RunOptions {
    /// Replace an existing run directory for the same config.
    pub overwrite: bool,
    /// Return the stored report of an existing complete run instead of
    /// failing.
    pub reuse: bool,
    pub verbose: bool,
}

#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub dir: PathBuf,
    pub manifest: ExperimentManifest,
    pub report: RunReport,
}

pub const REPORT_FILE: &str = "report.json";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const GRID_STEM: &str = "grid";

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    fs::write(path, bytes)?;
    Ok(())
}

fn azimuth_of(c: &Camera) -> f64 {
    c.position.x.atan2(c.position.z).to_degrees().rem_euclid(360.0)
}

struct Run<'a> {
    cfg: &'a ExperimentConfig,
    dir: PathBuf,
    manifest: ExperimentManifest,
    clock: Instant,
    verbose: bool,
}

impl Run<'_> {
    /// Registers an artifact and makes sure its parent directory exists.
    fn artifact(&mut self, name: &str, rel: impl Into<PathBuf>) -> Result<PathBuf> {
        let rel = rel.into();
        let abs = self.dir.join(&rel);
        if let Some(parent) = abs.parent() {
            fs::create_dir_all(parent)?;
        }
        self.manifest.artifacts.insert(name.to_string(), rel);
        Ok(abs)
    }

    fn stage<T>(&mut self, name: &str, f: impl FnOnce(&mut Self) -> Result<T>) -> Result<T> {
        if self.verbose {
            eprintln!("[{}] {name}", self.manifest.config_hash.get(..8).unwrap_or(""));
        }
        self.clock = Instant::now();
        let out = f(self).map_err(|e| match e {
            Error::Stage { .. } => e,
            other => other.in_stage(name),
        });
        self.manifest
            .timings_ms
            .insert(name.to_string(), self.clock.elapsed().as_secs_f64() * 1e3);
        out
    }
}

/// Runs one experiment end to end. On failure the manifest written so far
/// is saved with a `failed` status and the stage error is returned.
pub fn run_fit(cfg: &ExperimentConfig, root: &Path, opts: &RunOptions) -> Result<RunOutcome> {
    cfg.validate()?;
    let dir = cfg.run_dir(root);
    let manifest_path = dir.join(MANIFEST_FILE);
    if dir.exists() {
        let complete = ExperimentManifest::load(&manifest_path)
            .map(|m| m.status == "complete")
            .unwrap_or(false);
        if opts.reuse && complete {
            let report: RunReport = serde_json::from_slice(&fs::read(dir.join(REPORT_FILE))?)?;
            let manifest = ExperimentManifest::load(&manifest_path)?;
            return Ok(RunOutcome { dir, manifest, report });
        }
        if !opts.overwrite {
            return Err(cfg_err(format!(
                "run directory {} already exists; pass --overwrite to replace it",
                dir.display()
            )));
        }
        fs::remove_dir_all(&dir)?;
    }
    fs::create_dir_all(&dir)?;
    let mut run = Run {
        cfg,
        dir: dir.clone(),
        manifest: ExperimentManifest::new(cfg),
        clock: Instant::now(),
        verbose: opts.verbose,
    };
    write_json(&dir.join("config.json"), cfg)?;
    match pipeline(&mut run) {
        Ok(report) => {
            run.manifest.status = "complete".into();
            write_json(&manifest_path, &run.manifest)?;
            Ok(RunOutcome {
                dir,
                manifest: run.manifest,
                report,
            })
        }
        Err(e) => {
            run.manifest.status = format!("failed: {e}");
            // Best effort; the stage error is what the caller needs.
            let _ = write_json(&manifest_path, &run.manifest);
            Err(e)
        }
    }
}

fn pipeline(run: &mut Run) -> Result<RunReport> {
    let cfg = run.cfg;
    let rig = run.stage("rig", |_| build_rig(&cfg.rig))?;
    let (skeleton, scene) = run.stage("scene", |_| cfg.scene.build())?;

    // Clean renders at every rig view (evaluation ground truth) and at the
    // inputs.
    let references = run.stage("reference", |r| {
        let refs: Vec<_> = rig.cameras.iter().map(|c| raymarch_render(&scene, c, &cfg.raymarch)).collect();
        for (v, rf) in refs.iter().enumerate() {
            rf.rgb.save_png(&r.artifact(&format!("reference_{v:02}"), format!("reference/view_{v:02}.png"))?)?;
        }
        Ok(refs)
    })?;
    let inputs = run.stage("inputs", |_| {
        cfg.input_azimuths
            .iter()
            .map(|&a| {
                let cam = cfg.rig.camera_at(a)?;
                Ok((cam, raymarch_render(&scene, &cam, &cfg.raymarch)))
            })
            .collect::<Result<Vec<_>>>()
    })?;

    let (observed, masks, coverage) = run.stage("occlusion", |r| {
        let mut observed = Vec::new();
        let mut masks = Vec::new();
        let mut coverage = Vec::new();
        for (i, (_, rf)) in inputs.iter().enumerate() {
            match &cfg.occlusion {
                Some(spec) => {
                    let spec_i = OcclusionSpec {
                        seed: spec.seed.wrapping_add(i as u64),
                        ..*spec
                    };
                    let m = generate_mask(&rf.alpha, &spec_i)?;
                    m.mask.save_mask_png(&r.artifact(&format!("occluder_mask_{i}"), format!("inputs/occluder_mask_{i}.png"))?)?;
                    observed.push(apply_occlusion(&rf.rgb, &m.mask, spec.fill)?);
                    coverage.push(m.coverage);
                    masks.push(Some(m.mask));
                }
                None => {
                    observed.push(rf.rgb.clone());
                    masks.push(None);
                }
            }
            observed[i].save_png(&r.artifact(&format!("input_{i}"), format!("inputs/input_{i}.png"))?)?;
        }
        Ok((observed, masks, coverage))
    })?;

    let (targets, response) = run.stage("provider", |r| {
        let (_, targets) = input_plus_targets(&cfg.rig, cfg.input_azimuths[0])?;
        let req = ProviderRequest {
            inputs: observed.iter().cloned().zip(inputs.iter().map(|(c, _)| *c)).collect(),
            targets: targets.clone(),
            scene: Some(SceneHandle {
                scene: &scene,
                raymarch: cfg.raymarch,
            }),
        };
        let resp = provide(&cfg.provider, &req)?;
        write_provider_dir(&r.artifact("provider", "provider")?, &resp, &targets)?;
        let poses = poses_for_canonical_views(&skeleton, &targets.cameras)?;
        for (k, p) in poses.iter().enumerate() {
            let img = render_pose_image(p, &skeleton.bones(), cfg.rig.width, cfg.rig.height);
            img.save_png(&r.dir.join(format!("provider/pose_{k}.png")))?;
        }
        r.manifest.provenance = Some(resp.provenance.clone());
        Ok((targets, resp))
    })?;

    // Supervision: every input (its occluded pixels filled from the
    // provider view at the same pose, when there is one) plus the four
    // provider views, anchored to the inputs when enabled.
    let (fit_targets, eval_views) = run.stage("supervision", |r| {
        let mut fit_targets = Vec::new();
        let mut sup = Vec::new();
        let mut anchors = vec![None; targets.len()];
        for (i, (cam, rf)) in inputs.iter().enumerate() {
            let covering = targets.find_pose(cam, POSE_TOL);
            let rgb = match (covering, &masks[i]) {
                (Some(k), Some(m)) => {
                    let pv = &response.views[k];
                    RgbImage::from_fn(cam.width(), cam.height(), |x, y| {
                        if m.get(x, y) > 0.5 { pv.get(x, y) } else { observed[i].get(x, y) }
                    })
                }
                _ => observed[i].clone(),
            };
            if let (Some(k), true) = (covering, cfg.anchor_inputs) {
                anchors[k] = Some(i);
            }
            fit_targets.push(FitTarget {
                camera: *cam,
                rgb,
                mask: rf.alpha.clone(),
            });
            sup.push(SupervisedView {
                source: "input".into(),
                index: i,
                azimuth: azimuth_of(cam),
                rig_view: rig.find_pose(cam, POSE_TOL),
                anchored_to: None,
            });
        }
        for (k, cam) in targets.cameras.iter().enumerate() {
            let (rgb, mask) = match anchors[k] {
                Some(i) => (fit_targets[i].rgb.clone(), fit_targets[i].mask.clone()),
                None => (response.views[k].clone(), response.silhouettes[k].clone()),
            };
            fit_targets.push(FitTarget { camera: *cam, rgb, mask });
            sup.push(SupervisedView {
                source: "provider".into(),
                index: k,
                azimuth: azimuth_of(cam),
                rig_view: rig.find_pose(cam, POSE_TOL),
                anchored_to: anchors[k],
            });
        }
        let eval_views: Vec<usize> = match cfg.eval {
            EvalSplit::All => (0..rig.len()).collect(),
            EvalSplit::Holdout => (0..rig.len())
                .filter(|&v| !fit_targets.iter().any(|t| same_pose(&t.camera, &rig.cameras[v], POSE_TOL)))
                .collect(),
        };
        write_json(&r.artifact("supervision", "supervision.json")?, &sup)?;
        // Re-read the log and check the split against it.
        let logged: Vec<SupervisedView> = serde_json::from_slice(&fs::read(r.dir.join("supervision.json"))?)?;
        if cfg.eval == EvalSplit::Holdout {
            if let Some(v) = logged.iter().filter_map(|s| s.rig_view).find(|v| eval_views.contains(v)) {
                return Err(Error::invalid(format!("held-out view {v} is supervised")));
            }
        }
        r.manifest.supervised = logged;
        r.manifest.eval_views = eval_views.clone();
        Ok((fit_targets, eval_views))
    })?;

    let decode = cfg.decode();
    let fitted = run.stage("fit", |r| {
        let factor = cfg.rig.width / cfg.grid_resolution;
        let mut cams = Vec::new();
        let mut images = Vec::new();
        for (i, (cam, _)) in inputs.iter().enumerate() {
            cams.push(*cam);
            images.push(observed[i].clone());
        }
        // Provider views as supervised, i.e. after anchoring.
        for (k, cam) in targets.cameras.iter().enumerate() {
            cams.push(*cam);
            images.push(fit_targets[inputs.len() + k].rgb.clone());
        }
        let cams: Vec<Camera> = cams
            .iter()
            .map(|c| Ok(c.with_intrinsics(c.intrinsics.resized(cfg.grid_resolution, cfg.grid_resolution)?)))
            .collect::<Result<_>>()?;
        let images: Vec<RgbImage> = images.iter().map(|im| im.downsample(factor)).collect();
        let grid = PixelGaussianGrid::from_images(cams, &images, &decode, &cfg.grid_init, cfg.seed)?;
        let fit_cfg = FitConfig {
            optim: cfg.optim,
            loss: cfg.loss,
            render: cfg.render,
            decode,
            views_per_step: cfg.views_per_step,
            ..FitConfig::default()
        };
        let out = fit(grid, &fit_targets, &fit_cfg, cfg.seed, None)?;
        let mut log = String::new();
        for rec in &out.log {
            log.push_str(&serde_json::to_string(rec)?);
            log.push('\n');
        }
        fs::write(r.artifact("fit_log", "fit_log.jsonl")?, log)?;
        out.grid.save(&r.artifact("grid", GRID_STEM)?)?;
        Ok(out.grid)
    })?;

    let set = run.stage("render", |r| {
        let set = decode_pixel_gaussians(&fitted, &decode)?;
        let renders: Vec<_> = rig.cameras.iter().map(|c| render(&set, c, &cfg.render)).collect();
        for (v, img) in renders.iter().enumerate() {
            img.rgb.save_png(&r.artifact(&format!("render_{v:02}"), format!("renders/view_{v:02}.png"))?)?;
        }
        Ok((set, renders))
    })?;

    run.stage("metrics", |r| {
        let (set, renders) = &set;
        let rgb: Vec<RgbImage> = renders.iter().map(|x| x.rgb.clone()).collect();
        let refs: Vec<RgbImage> = references.iter().map(|x| x.rgb.clone()).collect();
        let metrics = metrics_for(
            cfg,
            &EvalInputs {
                scene: &scene,
                azimuths: &rig.azimuths,
                references: &refs,
                renders: &rgb,
                set,
                eval_views: &eval_views,
            },
            &response.provenance,
            cfg.opacity_threshold,
        )?;
        let report = RunReport {
            occlusion: cfg.occlusion.as_ref().map_or(0.0, |o| o.fraction),
            occlusion_coverage: coverage.clone(),
            stereo_separation: cfg.stereo_separation(),
            supervised_views: r.manifest.supervised.len(),
            eval_views: eval_views.clone(),
            metrics,
        };
        write_json(&r.artifact("report", REPORT_FILE)?, &report)?;
        Ok(report)
    })
}

struct EvalInputs<'a> {
    scene: &'a CapsuleScene,
    azimuths: &'a [f64],
    references: &'a [RgbImage],
    renders: &'a [RgbImage],
    set: &'a GaussianSet,
    eval_views: &'a [usize],
}

fn metrics_for(cfg: &ExperimentConfig, e: &EvalInputs, provenance: &Provenance, threshold: f64) -> Result<MetricsReport> {
    let per_view = e
        .eval_views
        .iter()
        .map(|&v| ViewMetrics::compute(v, e.azimuths[v], &e.renders[v], &e.references[v], cfg.loss.perceptual_levels))
        .collect::<Result<Vec<_>>>()?;
    let (mean_psnr, mean_ssim, mean_perceptual) = MetricsReport::aggregate(&per_view);
    let geometry = geometry_metrics(e.set, e.scene, threshold, cfg.geometry_samples, cfg.seed)?;
    Ok(MetricsReport {
        per_view,
        mean_psnr,
        mean_ssim,
        mean_perceptual,
        perceptual_metric: PERCEPTUAL_NAME.to_string(),
        geometry,
        opacity_threshold: threshold,
        provenance: provenance.clone(),
        config: serde_json::to_value(cfg)?,
    })
}

/// Loads the fitted grid of a complete run.
pub fn load_run_grid(dir: &Path) -> Result<(ExperimentManifest, PixelGaussianGrid)> {
    let manifest = ExperimentManifest::load(&dir.join(MANIFEST_FILE))?;
    if manifest.status != "complete" {
        return Err(Error::invalid(format!("run {} is not complete: {}", dir.display(), manifest.status)));
    }
    let grid = PixelGaussianGrid::load(&dir.join(GRID_STEM))?;
    Ok((manifest, grid))
}

/// Recomputes a run's metrics from its grid checkpoint, rendering every rig
/// view afresh. With the stored threshold this reproduces the run report.
pub fn evaluate_run(dir: &Path, threshold: Option<f64>) -> Result<MetricsReport> {
    let (manifest, grid) = load_run_grid(dir)?;
    let cfg = &manifest.config;
    let rig = build_rig(&cfg.rig)?;
    let (_, scene) = cfg.scene.build()?;
    let set = decode_pixel_gaussians(&grid, &cfg.decode())?;
    let references: Vec<RgbImage> = rig
        .cameras
        .iter()
        .map(|c| raymarch_render(&scene, c, &cfg.raymarch).rgb)
        .collect();
    let renders: Vec<RgbImage> = rig.cameras.iter().map(|c| render(&set, c, &cfg.render).rgb).collect();
    let provenance = manifest.provenance.clone().unwrap_or(Provenance::Oracle);
    let threshold = threshold.unwrap_or(cfg.opacity_threshold);
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(cfg_err("opacity threshold must lie in (0, 1)"));
    }
    metrics_for(
        cfg,
        &EvalInputs {
            scene: &scene,
            azimuths: &rig.azimuths,
            references: &references,
            renders: &renders,
            set: &set,
            eval_views: &manifest.eval_views,
        },
        &provenance,
        threshold,
    )
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    /// Input occlusion fractions 0, .25, .5, .75.
    Occlusion,
    /// Stereo separations 45, 90, 135 degrees.
    Stereo,
    /// Degraded provider at increasing noise/jitter.
    Degradation,
}

impl std::str::FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "occlusion" => Ok(SweepAxis::Occlusion),
            "stereo" => Ok(SweepAxis::Stereo),
            "degradation" | "provider" => Ok(SweepAxis::Degradation),
            other => Err(cfg_err(format!("unknown sweep axis {other:?}"))),
        }
    }
}

/// (noise sigma, pose jitter in degrees) per degradation level.
pub const DEGRADATION_LEVELS: [(f64, f64); 4] = [(0.0, 0.0), (0.05, 2.5), (0.1, 5.0), (0.2, 10.0)];

fn derive_seed(base: u64, i: usize) -> u64 {
    base ^ 0x9E37_79B9_7F4A_7C15u64.wrapping_mul(i as u64 + 1)
}

/// The per-level configs of a sweep, keyed by level value.
pub fn sweep_configs(base: &ExperimentConfig, axis: SweepAxis) -> Vec<(f64, ExperimentConfig)> {
    // Only the level's own random component gets a derived seed; the fit
    // seed is shared so rows differ by the swept factor alone.
    let mut out = Vec::new();
    match axis {
        SweepAxis::Occlusion => {
            for (i, f) in [0.0, 0.25, 0.5, 0.75].into_iter().enumerate() {
                let mut c = base.clone();
                c.occlusion = (f > 0.0).then(|| OcclusionSpec {
                    fraction: f,
                    seed: derive_seed(base.occlusion.as_ref().map_or(0, |o| o.seed), i),
                    ..base.occlusion.unwrap_or_default()
                });
                out.push((f, c));
            }
        }
        SweepAxis::Stereo => {
            let a0 = base.input_azimuths[0];
            for sep in STEREO_SEPARATIONS {
                let mut c = base.clone();
                c.input_azimuths = vec![a0, a0 + sep];
                out.push((sep, c));
            }
        }
        SweepAxis::Degradation => {
            for (i, (sigma, jitter)) in DEGRADATION_LEVELS.into_iter().enumerate() {
                let mut c = base.clone();
                c.provider = ProviderConfig::Degraded {
                    noise_sigma: sigma,
                    pose_jitter_deg: jitter,
                    seed: derive_seed(base.seed, i),
                };
                out.push((sigma, c));
            }
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub level: f64,
    pub config_hash: String,
    pub run_dir: PathBuf,
    pub mean_psnr: Option<f64>,
    pub mean_ssim: Option<f64>,
    pub mean_perceptual: Option<f64>,
    pub cd_cm: Option<f64>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub axis: SweepAxis,
    pub base_hash: String,
    pub rows: Vec<SweepRow>,
}

impl SweepReport {
    pub fn to_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| format!("{x:?}")).unwrap_or_default();
        let mut s = String::from("level,config_hash,mean_psnr,mean_ssim,mean_perceptual,cd_cm,error\n");
        for r in &self.rows {
            s.push_str(&format!(
                "{:?},{},{},{},{},{},{}\n",
                r.level,
                r.config_hash,
                opt(r.mean_psnr),
                opt(r.mean_ssim),
                opt(r.mean_perceptual),
                opt(r.cd_cm),
                r.error.as_deref().unwrap_or("").replace([',', '\n'], ";")
            ));
        }
        s
    }
}

/// One run per level; failures are recorded in their row and the sweep
/// continues. Writes `sweep.csv` and `sweep.json` under
/// `<root>/sweep-<axis>-<base hash>/`.
pub fn run_sweep(base: &ExperimentConfig, axis: SweepAxis, root: &Path, opts: &RunOptions) -> Result<(PathBuf, SweepReport)> {
    base.validate()?;
    let mut rows = Vec::new();
    for (level, cfg) in sweep_configs(base, axis) {
        let run_dir = cfg.run_dir(root);
        let mut row = SweepRow {
            level,
            config_hash: cfg.hash(),
            run_dir: run_dir.clone(),
            mean_psnr: None,
            mean_ssim: None,
            mean_perceptual: None,
            cd_cm: None,
            error: None,
        };
        match run_fit(&cfg, root, opts) {
            Ok(out) => {
                let m = &out.report.metrics;
                row.mean_psnr = Some(m.mean_psnr);
                row.mean_ssim = Some(m.mean_ssim);
                row.mean_perceptual = Some(m.mean_perceptual);
                row.cd_cm = m.geometry.as_ref().map(|g| g.cd_cm);
            }
            Err(e) => row.error = Some(e.to_string()),
        }
        rows.push(row);
    }
    let report = SweepReport {
        axis,
        base_hash: base.hash(),
        rows,
    };
    let name = serde_json::to_value(axis)?.as_str().unwrap_or("sweep").to_string();
    let dir = root.join(format!("sweep-{name}-{}", &report.base_hash[..16]));
    fs::create_dir_all(&dir)?;
    fs::write(dir.join("sweep.csv"), report.to_csv())?;
    write_json(&dir.join("sweep.json"), &report)?;
    Ok((dir, report))
}

/// Exit code for an error surfaced by the CLI: 2 for configuration
/// problems, 3 for failures inside a stage.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::Json(_) => 2,
        _ => 3,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ExperimentConfig {
        ExperimentConfig {
            rig: RigSpec::default().with_resolution(32, 32),
            grid_resolution: 8,
            optim: OptimConfig {
                lr0: DEFAULT_FIT_LR,
                total_steps: 4,
                warmup_steps: 1,
                ..OptimConfig::default()
            },
            geometry_samples: 256,
            ..ExperimentConfig::default()
        }
    }

    #[test]
    fn config_validation() {
        assert!(ExperimentConfig::default().validate().is_ok());
        let mut c = tiny();
        c.input_azimuths = vec![0.0, 60.0];
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        c.input_azimuths = vec![350.0, 80.0];
        assert!(c.validate().is_ok());
        c.input_azimuths = vec![];
        assert!(c.validate().is_err());
        let mut c = tiny();
        c.grid_resolution = 7;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        let mut c = tiny();
        c.occlusion = Some(OcclusionSpec {
            fraction: 1.0,
            ..OcclusionSpec::default()
        });
        assert!(matches!(c.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn unknown_fields_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        fs::write(&p, r#"{"grid_resolutoin": 32}"#).unwrap();
        assert!(matches!(ExperimentConfig::load(&p), Err(Error::Config(_))));
        fs::write(&p, r#"{"grid_resolution": 32, "seed": 4}"#).unwrap();
        let c = ExperimentConfig::load(&p).unwrap();
        assert_eq!((c.grid_resolution, c.seed), (32, 4));
    }

    #[test]
    fn hash_tracks_content() {
        let a = tiny();
        let mut b = tiny();
        assert_eq!(a.hash(), b.hash());
        b.seed = 1;
        assert_ne!(a.hash(), b.hash());
    }

    #[test]
    fn single_run_artifacts_and_split() {
        let root = tempfile::tempdir().unwrap();
        let out = run_fit(&tiny(), root.path(), &RunOptions::default()).unwrap();
        for v in 0..16 {
            assert!(out.dir.join(format!("renders/view_{v:02}.png")).exists());
        }
        assert!(out.dir.join(REPORT_FILE).exists());
        assert!(out.dir.join("grid.bin").exists() || out.dir.join("grid.json").exists());
        assert_eq!(out.report.supervised_views, 5);
        // The input shares its pose with canonical view 0: 4 supervised
        // poses, 12 held out.
        assert_eq!(out.report.eval_views, [1, 2, 3, 5, 6, 7, 9, 10, 11, 13, 14, 15]);
        assert_eq!(out.manifest.status, "complete");
        assert_eq!(out.report.metrics.perceptual_metric, PERCEPTUAL_NAME);
        // Same config again is refused, reused, or replaced on request.
        assert!(matches!(run_fit(&tiny(), root.path(), &RunOptions::default()), Err(Error::Config(_))));
        let again = run_fit(&tiny(), root.path(), &RunOptions { reuse: true, ..RunOptions::default() }).unwrap();
        assert_eq!(again.report, out.report);
        // Re-evaluating the checkpoint reproduces the stored metrics.
        assert_eq!(evaluate_run(&out.dir, None).unwrap(), out.report.metrics);
    }

    #[test]
    fn occluded_stereo_run_is_tagged() {
        let root = tempfile::tempdir().unwrap();
        let mut c = tiny();
        c.rig = RigSpec::default().with_resolution(64, 64);
        c.grid_resolution = 16;
        c.occlusion = Some(OcclusionSpec::default());
        c.input_azimuths = vec![0.0, 45.0];
        let out = run_fit(&c, root.path(), &RunOptions::default()).unwrap();
        assert_eq!(out.report.occlusion, 0.5);
        assert_eq!(out.report.stereo_separation, Some(45.0));
        assert_eq!(out.report.supervised_views, 6);
        assert!(out.dir.join("inputs/occluder_mask_0.png").exists());
        assert!(out.dir.join("inputs/occluder_mask_1.png").exists());
        assert!(out.report.occlusion_coverage.iter().all(|c| (c - 0.5).abs() <= 0.02));
        // The 45 degree input adds a fifth supervised pose (rig view 2).
        assert_eq!(out.report.eval_views.len(), 11);
        assert!(!out.report.eval_views.contains(&2));
        let json: serde_json::Value = serde_json::from_slice(&fs::read(out.dir.join(REPORT_FILE)).unwrap()).unwrap();
        assert_eq!(json["occlusion"], 0.5);
    }

    #[test]
    fn inputs_anchor_provider_views_at_shared_poses() {
        let root = tempfile::tempdir().unwrap();
        let mut c = tiny();
        c.provider = ProviderConfig::Degraded {
            noise_sigma: 0.1,
            pose_jitter_deg: 5.0,
            seed: 3,
        };
        c.input_azimuths = vec![0.0, 90.0];
        let out = run_fit(&c, root.path(), &RunOptions::default()).unwrap();
        let anchored: Vec<_> = out.manifest.supervised.iter().map(|s| s.anchored_to).collect();
        assert_eq!(anchored, [None, None, Some(0), Some(1), None, None]);
        assert_eq!(out.report.supervised_views, 6);
        assert_eq!(out.report.eval_views.len(), 12);

        c.anchor_inputs = false;
        let out = run_fit(&c, root.path(), &RunOptions::default()).unwrap();
        assert!(out.manifest.supervised.iter().all(|s| s.anchored_to.is_none()));
    }

    #[test]
    fn stage_failure_keeps_manifest() {
        let root = tempfile::tempdir().unwrap();
        let mut c = tiny();
        c.provider = ProviderConfig::File {
            dir: root.path().join("missing"),
        };
        let e = run_fit(&c, root.path(), &RunOptions::default()).unwrap_err();
        assert!(matches!(&e, Error::Stage { stage, .. } if stage == "provider"), "{e}");
        assert_eq!(exit_code(&e), 3);
        let m = ExperimentManifest::load(&c.run_dir(root.path()).join(MANIFEST_FILE)).unwrap();
        assert!(m.status.starts_with("failed"));
        assert!(m.timings_ms.contains_key("occlusion"));
    }

    #[test]
    fn sweep_levels() {
        let base = tiny();
        let occ: Vec<f64> = sweep_configs(&base, SweepAxis::Occlusion).iter().map(|x| x.0).collect();
        assert_eq!(occ, [0.0, 0.25, 0.5, 0.75]);
        let st = sweep_configs(&base, SweepAxis::Stereo);
        assert_eq!(st.iter().map(|x| x.0).collect::<Vec<_>>(), STEREO_SEPARATIONS);
        assert!(st.iter().all(|(_, c)| c.validate().is_ok()));
        assert_eq!(sweep_configs(&base, SweepAxis::Degradation).len(), DEGRADATION_LEVELS.len());
    }

    #[test]
    fn stereo_sweep_rows_copy_reports() {
        let root = tempfile::tempdir().unwrap();
        let mut base = tiny();
        base.optim.total_steps = 2;
        let (dir, rep) = run_sweep(&base, SweepAxis::Stereo, root.path(), &RunOptions::default()).unwrap();
        assert_eq!(rep.rows.len(), 3);
        for row in &rep.rows {
            let r: RunReport = serde_json::from_slice(&fs::read(row.run_dir.join(REPORT_FILE)).unwrap()).unwrap();
            assert_eq!(row.mean_psnr, Some(r.metrics.mean_psnr));
        }
        let csv = fs::read_to_string(dir.join("sweep.csv")).unwrap();
        assert_eq!(csv.lines().count(), 4);
    }
}
