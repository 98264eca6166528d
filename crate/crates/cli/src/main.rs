use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand, ValueEnum};

use gsrecon::gaussian::decode_pixel_gaussians;
use gsrecon::gradcheck::{gradcheck, GradcheckSizes};
use gsrecon::harness::{
    evaluate_run, exit_code, load_run_grid, run_fit, run_root, run_sweep, EvalSplit, ExperimentConfig, RunOptions,
    SweepAxis, RUN_ROOT_ENV,
};
use gsrecon::image::{write_flat, DType, FlatHeader};
use gsrecon::metrics::MetricsReport;
use gsrecon::occlusion::{apply_occlusion, generate_mask, OccluderShape, OcclusionSpec};
use gsrecon::ply::{read_ply, write_ply, PlyFormat};
use gsrecon::provider::ProviderConfig;
use gsrecon::render::render;
use gsrecon::rig::build_rig;
use gsrecon::scene::raymarch_render;
use gsrecon::{Camera, Error, ExecMode, GaussianSet};

#[derive(Parser)]
#[command(name = "gsrecon", version, about = "Pixel-aligned Gaussian splatting reconstruction experiments")]
struct Cli {
    /// Directory runs are written under.
    #[arg(long, global = true, env = RUN_ROOT_ENV)]
    run_root: Option<PathBuf>,
    /// Disable data-parallel loops.
    #[arg(long, global = true)]
    sequential: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print the evaluation rig as a JSON array of cameras.
    Rig(ConfigArgs),
    /// Sphere-trace the analytic humanoid from one rig azimuth.
    RenderScene {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, default_value_t = 0.0)]
        azimuth: f64,
        /// Output PNG.
        #[arg(long)]
        out: PathBuf,
        /// Also write the silhouette as a 1-bit PNG.
        #[arg(long)]
        alpha: Option<PathBuf>,
    },
    /// Render a Gaussian set (PLY or run checkpoint) from one rig azimuth.
    Render {
        #[command(flatten)]
        source: GaussianSource,
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, default_value_t = 0.0)]
        azimuth: f64,
        /// Output PNG.
        #[arg(long)]
        out: PathBuf,
        /// Also write unclamped f64 radiance as `<stem>.json` + `<stem>.bin`.
        #[arg(long)]
        hdr: Option<PathBuf>,
    },
    /// Occlude an input view at a silhouette coverage fraction.
    Occlude {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, default_value_t = 0.0)]
        azimuth: f64,
        #[arg(long, default_value_t = 0.5)]
        fraction: f64,
        #[arg(long, value_enum, default_value_t = Shape::Rectangles)]
        shape: Shape,
        #[arg(long, default_value_t = 3)]
        max_pieces: usize,
        /// Seed for occluder placement (`--seed` seeds the scene config).
        #[arg(long, default_value_t = 0)]
        mask_seed: u64,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Run one experiment end to end.
    Fit {
        #[command(flatten)]
        config: ConfigArgs,
        #[command(flatten)]
        run: RunFlags,
    },
    /// Recompute metrics of a finished run from its checkpoint.
    Eval {
        /// Run directory.
        run_dir: PathBuf,
        /// Opacity threshold for point extraction (default: the run's).
        #[arg(long)]
        threshold: Option<f64>,
        /// Report geometry at several opacity thresholds.
        #[arg(long)]
        sweep_threshold: bool,
        /// Metrics JSON path (default: `<run_dir>/eval.json`).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run one experiment per level along an axis.
    Sweep {
        #[arg(long, value_enum)]
        axis: Axis,
        #[command(flatten)]
        config: ConfigArgs,
        #[command(flatten)]
        run: RunFlags,
    },
    /// Finite-difference check of the renderer and the training chain.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 20)]
        scenes: usize,
        #[arg(long, default_value_t = 16)]
        gaussians: usize,
        #[arg(long, default_value_t = 16)]
        size: usize,
        #[arg(long, default_value_t = 32)]
        chain_coords: usize,
        /// Write the JSON report here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Exit with status 3 when the check fails.
        #[arg(long)]
        strict: bool,
    },
    /// Write a run's Gaussians (or a grid checkpoint) as PLY.
    ExportPly {
        #[command(flatten)]
        source: GaussianSource,
        /// Output PLY path.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = Format::Binary)]
        format: Format,
    },
}

#[derive(Args)]
struct ConfigArgs {
    /// Experiment config JSON (or a run manifest).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Square render resolution of the rig.
    #[arg(long)]
    resolution: Option<usize>,
    /// Per-view grid side; must divide the resolution.
    #[arg(long)]
    grid: Option<usize>,
    /// Optimizer steps.
    #[arg(long)]
    steps: Option<usize>,
    /// Peak learning rate.
    #[arg(long)]
    lr: Option<f64>,
    /// Global seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Input azimuth in degrees; pass twice for stereo.
    #[arg(long = "input-azimuth")]
    input_azimuths: Vec<f64>,
    /// Occluded share of the input silhouette (0 disables occlusion).
    #[arg(long)]
    occlusion: Option<f64>,
    #[arg(long, value_enum)]
    provider: Option<Provider>,
    /// Directory of precomputed provider views (`--provider file`).
    #[arg(long)]
    provider_dir: Option<PathBuf>,
    /// Pixel noise sigma of the degraded provider.
    #[arg(long, default_value_t = 0.05)]
    noise: f64,
    /// Azimuth jitter (degrees) of the degraded provider.
    #[arg(long, default_value_t = 2.5)]
    jitter: f64,
    /// Evaluate on all rig views, supervised ones included.
    #[arg(long)]
    eval_all: bool,
    /// Supervised views sampled per step (default: all).
    #[arg(long)]
    views_per_step: Option<usize>,
    /// Keep provider views at input poses instead of replacing them with the inputs.
    #[arg(long)]
    no_anchor: bool,
}

#[derive(Args)]
struct RunFlags {
    /// Replace an existing run directory.
    #[arg(long)]
    overwrite: bool,
    /// Return the stored report of an identical finished run.
    #[arg(long)]
    reuse: bool,
    /// Suppress per-step progress.
    #[arg(long, short)]
    quiet: bool,
}

#[derive(Args)]
#[group(required = true, multiple = false)]
struct GaussianSource {
    /// Run directory holding a grid checkpoint.
    #[arg(long)]
    run: Option<PathBuf>,
    /// Gaussian PLY file.
    #[arg(long)]
    ply: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Shape {
    Rectangles,
    Ellipses,
}

#[derive(Clone, Copy, ValueEnum)]
enum Provider {
    Oracle,
    File,
    Degraded,
}

#[derive(Clone, Copy, ValueEnum)]
enum Axis {
    Occlusion,
    Stereo,
    Degradation,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Ascii,
    Binary,
}

impl ConfigArgs {
    fn resolve(&self, exec: ExecMode) -> Result<ExperimentConfig, Error> {
        let mut c = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        if let Some(r) = self.resolution {
            c.rig.width = r;
            c.rig.height = r;
        }
        if let Some(g) = self.grid {
            c.grid_resolution = g;
        }
        if let Some(s) = self.steps {
            c.optim.total_steps = s;
            c.optim.warmup_steps = c.optim.warmup_steps.min(s);
        }
        if let Some(lr) = self.lr {
            c.optim.lr0 = lr;
        }
        if let Some(s) = self.seed {
            c.seed = s;
        }
        if !self.input_azimuths.is_empty() {
            c.input_azimuths = self.input_azimuths.clone();
        }
        if let Some(f) = self.occlusion {
            c.occlusion = (f > 0.0).then(|| OcclusionSpec {
                fraction: f,
                ..c.occlusion.unwrap_or_default()
            });
        }
        if let Some(p) = self.provider {
            c.provider = match p {
                Provider::Oracle => ProviderConfig::Oracle,
                Provider::File => ProviderConfig::File {
                    dir: self
                        .provider_dir
                        .clone()
                        .ok_or_else(|| Error::Config("--provider file needs --provider-dir".into()))?,
                },
                Provider::Degraded => ProviderConfig::Degraded {
                    noise_sigma: self.noise,
                    pose_jitter_deg: self.jitter,
                    seed: c.seed,
                },
            };
        }
        if self.eval_all {
            c.eval = EvalSplit::All;
        }
        if self.no_anchor {
            c.anchor_inputs = false;
        }
        if self.views_per_step.is_some() {
            c.views_per_step = self.views_per_step;
        }
        c.render.exec = exec;
        c.raymarch.exec = exec;
        c.validate()?;
        Ok(c)
    }
}

impl RunFlags {
    fn options(&self) -> RunOptions {
        RunOptions {
            overwrite: self.overwrite,
            reuse: self.reuse,
            verbose: !self.quiet,
        }
    }
}

impl GaussianSource {
    fn load(&self) -> anyhow::Result<GaussianSet> {
        if let Some(p) = &self.ply {
            return Ok(read_ply(p)?);
        }
        let dir = self.run.as_ref().expect("clap enforces one source");
        let (manifest, grid) = load_run_grid(dir)?;
        Ok(decode_pixel_gaussians(&grid, &manifest.config.decode())?)
    }
}

fn camera_at(cfg: &ExperimentConfig, azimuth: f64) -> Result<Camera, Error> {
    cfg.rig.camera_at(azimuth)
}

fn print_metrics(m: &MetricsReport) {
    println!("{:>4} {:>8} {:>8} {:>7} {:>10}", "view", "azimuth", "psnr", "ssim", "perceptual");
    for v in &m.per_view {
        println!("{:>4} {:>8.2} {:>8.3} {:>7.4} {:>10.5}", v.view, v.azimuth, v.psnr, v.ssim, v.perceptual);
    }
    println!("{:>4} {:>8} {:>8.3} {:>7.4} {:>10.5}", "mean", "", m.mean_psnr, m.mean_ssim, m.mean_perceptual);
    match &m.geometry {
        Some(g) => println!(
            "geometry: cd {:.4} cm  p2s {:.4} cm  nc {:.4}  ({} points at opacity >= {})",
            g.cd_cm, g.p2s_cm, g.nc, g.n_points, m.opacity_threshold
        ),
        None => println!("geometry: skipped, no Gaussian at opacity >= {}", m.opacity_threshold),
    }
    println!("perceptual column: {}", m.perceptual_metric);
}

fn write_json(path: &Path, v: &impl serde::Serialize) -> anyhow::Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(path, serde_json::to_vec_pretty(v)?).with_context(|| path.display().to_string())
}

fn run(cli: Cli) -> anyhow::Result<ExitCode> {
    let exec = if cli.sequential { ExecMode::Sequential } else { ExecMode::default() };
    let root = run_root(cli.run_root.as_deref());
    match cli.command {
        Command::Rig(config) => {
            let cfg = config.resolve(exec)?;
            let rig = build_rig(&cfg.rig)?;
            println!("{}", serde_json::to_string_pretty(&rig.cameras)?);
        }
        Command::RenderScene {
            config,
            azimuth,
            out,
            alpha,
        } => {
            let cfg = config.resolve(exec)?;
            let (_, scene) = cfg.scene.build()?;
            let r = raymarch_render(&scene, &camera_at(&cfg, azimuth)?, &cfg.raymarch);
            r.rgb.save_png(&out)?;
            if let Some(a) = alpha {
                r.alpha.save_mask_png(&a)?;
            }
        }
        Command::Render {
            source,
            config,
            azimuth,
            out,
            hdr,
        } => {
            let cfg = config.resolve(exec)?;
            let set = source.load()?;
            let img = render(&set, &camera_at(&cfg, azimuth)?, &cfg.render);
            img.rgb.save_png(&out)?;
            if let Some(stem) = hdr {
                let header = FlatHeader {
                    shape: vec![img.height(), img.width(), 3],
                    dtype: DType::F64,
                    meta: serde_json::json!({ "azimuth": azimuth, "gaussians": set.len() }),
                };
                write_flat(&stem, &header, &img.rgb.data)?;
            }
        }
        Command::Occlude {
            config,
            azimuth,
            fraction,
            shape,
            max_pieces,
            mask_seed,
            out_dir,
        } => {
            let cfg = config.resolve(exec)?;
            let spec = OcclusionSpec {
                fraction,
                shape: match shape {
                    Shape::Rectangles => OccluderShape::Rectangles,
                    Shape::Ellipses => OccluderShape::Ellipses,
                },
                max_pieces,
                seed: mask_seed,
                ..OcclusionSpec::default()
            };
            spec.validate().map_err(|e| Error::Config(e.to_string()))?;
            let (_, scene) = cfg.scene.build()?;
            let r = raymarch_render(&scene, &camera_at(&cfg, azimuth)?, &cfg.raymarch);
            let m = generate_mask(&r.alpha, &spec)?;
            std::fs::create_dir_all(&out_dir)?;
            apply_occlusion(&r.rgb, &m.mask, spec.fill)?.save_png(&out_dir.join("occluded.png"))?;
            r.rgb.save_png(&out_dir.join("clean.png"))?;
            m.mask.save_mask_png(&out_dir.join("occluder_mask.png"))?;
            write_json(
                &out_dir.join("occlusion.json"),
                &serde_json::json!({ "spec": spec, "coverage": m.coverage, "azimuth": azimuth }),
            )?;
            println!("coverage {:.4}", m.coverage);
        }
        Command::Fit { config, run } => {
            let cfg = config.resolve(exec)?;
            let out = run_fit(&cfg, &root, &run.options())?;
            print_metrics(&out.report.metrics);
            println!("run: {}", out.dir.display());
        }
        Command::Eval {
            run_dir,
            threshold,
            sweep_threshold,
            out,
        } => {
            let m = evaluate_run(&run_dir, threshold)?;
            print_metrics(&m);
            let mut json = serde_json::to_value(&m)?;
            if sweep_threshold {
                let mut rows = Vec::new();
                for t in [0.01, 0.05, 0.1, 0.25, 0.5] {
                    let g = evaluate_run(&run_dir, Some(t))?.geometry;
                    println!("threshold {t:>5}: {}", match &g {
                        Some(g) => format!("cd {:.4} p2s {:.4} nc {:.4} n {}", g.cd_cm, g.p2s_cm, g.nc, g.n_points),
                        None => "empty".into(),
                    });
                    rows.push(serde_json::json!({ "threshold": t, "geometry": g }));
                }
                json["threshold_sweep"] = rows.into();
            }
            write_json(&out.unwrap_or_else(|| run_dir.join("eval.json")), &json)?;
        }
        Command::Sweep { axis, config, run } => {
            let cfg = config.resolve(exec)?;
            let axis = match axis {
                Axis::Occlusion => SweepAxis::Occlusion,
                Axis::Stereo => SweepAxis::Stereo,
                Axis::Degradation => SweepAxis::Degradation,
            };
            let (dir, report) = run_sweep(&cfg, axis, &root, &run.options())?;
            print!("{}", report.to_csv());
            println!("sweep: {}", dir.display());
            if report.rows.iter().any(|r| r.error.is_some()) {
                return Ok(ExitCode::from(3));
            }
        }
        Command::Gradcheck {
            seed,
            scenes,
            gaussians,
            size,
            chain_coords,
            out,
            strict,
        } => {
            let sizes = GradcheckSizes {
                scenes,
                max_gaussians: gaussians,
                width: size,
                height: size,
                chain_coords,
                ..GradcheckSizes::default()
            };
            let report = gradcheck(seed, &sizes)?;
            let text = serde_json::to_string_pretty(&report)?;
            match out {
                Some(p) => write_json(&p, &report)?,
                None => println!("{text}"),
            }
            eprintln!(
                "gradcheck {}: renderer {}/{} (worst {:.2e}), chain {}/{} (worst {:.2e})",
                if report.pass { "pass" } else { "FAIL" },
                report.renderer.passed,
                report.renderer.checked,
                report.renderer.worst_rel,
                report.chain.passed,
                report.chain.checked,
                report.chain.worst_rel
            );
            if strict && !report.pass {
                return Ok(ExitCode::from(3));
            }
        }
        Command::ExportPly { source, out, format } => {
            let set = source.load()?;
            let fmt = match format {
                Format::Ascii => PlyFormat::Ascii,
                Format::Binary => PlyFormat::BinaryLittleEndian,
            };
            write_ply(&set, &out, fmt)?;
            println!("{} Gaussians -> {}", set.len(), out.display());
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            let code = e.downcast_ref::<Error>().map_or(3, exit_code);
            ExitCode::from(code as u8)
        }
    }
}
