use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

use voxband::geometry::{TriangleMesh, Vec3, VolumeSpec};
use voxband::io::{read_field, read_mesh, write_field, write_mesh, Capture};
use voxband::metrics::{normal_error, p2s_chamfer_with, psnr, ssim, DistanceOptions, MetricsReport, SurfaceSampling};
use voxband::pipeline::{reconstruct, train_stage, GroundTruth, Networks, PipelineConfig, TrainOptions, TrainStage};
use voxband::sparsecnn::{save_checkpoint, DEFAULT_LEARNING_RATE};
use voxband::synth::{camera_ring, render_views, shapes, Intrinsics, RenderOptions, Shading};
use voxband::texture::{
    bake_atlas, depth_renders, gt_color_volume, load_texture_checkpoint, regress_blend_weights, save_texture_checkpoint,
    train_texture, write_textured_obj, TextureInputs, ViewImages,
};
use voxband::tsdf::{mesh_to_tsdf, quantization_study, surface_shell};
use voxband::{Error, ErrorKind, Result};

#[derive(Parser)]
#[command(name = "voxband", version, about = "Sparse coarse-to-fine TSDF reconstruction toolkit")]
struct Cli {
    /// Pipeline configuration (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true, default_value_t = 42)]
    seed: u64,
    /// Worker threads (0 = all cores).
    #[arg(long, global = true, env = "VOXBAND_THREADS")]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum StageArg {
    Coarse,
    Fine,
    Texture,
}

#[derive(Subcommand)]
enum Command {
    /// Camera ring and ray-cast renders of a mesh.
    SynthRender {
        /// Mesh file, or @humanoid, @sphere, @painted-sphere.
        #[arg(long)]
        mesh: String,
        #[arg(long, default_value_t = 6)]
        views: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 512)]
        size: u32,
        /// Ring radius (cm).
        #[arg(long, default_value_t = 300.0)]
        radius: f64,
        /// Ring height above the volume centre (cm).
        #[arg(long, default_value_t = 0.0)]
        height: f64,
        /// Focal length as a multiple of the image size.
        #[arg(long, default_value_t = 1.2)]
        focal: f64,
        /// Raw vertex colours instead of headlight shading.
        #[arg(long)]
        unlit: bool,
    },
    /// Exact TSDF of a mesh (dense up to R=128, surface shell above).
    GtTsdf {
        #[arg(long)]
        mesh: String,
        #[arg(long)]
        resolution: u32,
        #[arg(long)]
        out: PathBuf,
    },
    /// Mean TSDF discretisation error per resolution.
    QuantizeStudy {
        #[arg(long)]
        mesh: String,
        #[arg(long, value_delimiter = ',', default_value = "32,64,128,256,512")]
        resolutions: Vec<u32>,
        #[arg(long, default_value_t = 100_000)]
        samples: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Capture to mesh.
    Reconstruct {
        #[arg(long)]
        capture: PathBuf,
        /// Coarse network weights.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Fine network weights; without them the fine stage is skipped.
        #[arg(long)]
        fine_checkpoint: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Blend-weight regression and atlas baking for a mesh.
    Texture {
        #[arg(long)]
        capture: PathBuf,
        #[arg(long)]
        mesh: String,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value_t = 2048)]
        atlas_res: u32,
        #[arg(long)]
        out: PathBuf,
    },
    /// Desk-scale training of one stage.
    TrainToy {
        #[arg(long, value_enum)]
        stage: StageArg,
        #[arg(long)]
        capture: PathBuf,
        /// Ground truth: mesh file (coloured for the texture stage) or SVF1 TSDF.
        #[arg(long)]
        gt: String,
        /// Adam steps.
        #[arg(long, default_value_t = 2000)]
        epochs: usize,
        #[arg(long, default_value_t = DEFAULT_LEARNING_RATE)]
        lr: f64,
        /// Trained coarse weights, needed by the fine stage.
        #[arg(long)]
        coarse_checkpoint: Option<PathBuf>,
        /// Surface for the texture stage's PSDF and band (default: the ground truth).
        #[arg(long)]
        mesh: Option<String>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Mesh distances, plus normal error and image metrics against a capture.
    Eval {
        #[arg(long)]
        pred: String,
        #[arg(long)]
        gt: String,
        /// Capture whose cameras (and colour images) are used for rendering.
        #[arg(long)]
        views: Option<PathBuf>,
        /// Scale both meshes so the ground truth is this tall (cm).
        #[arg(long)]
        normalize_height: Option<f64>,
        /// Area-uniform samples instead of vertices for P2S.
        #[arg(long)]
        area_samples: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Serialize)]
struct ErrorJson<'a> {
    error: &'a str,
    message: String,
}

fn exit_code(kind: ErrorKind) -> u8 {
    match kind {
        ErrorKind::Config => 2,
        ErrorKind::Io => 3,
        ErrorKind::Validation => 4,
        ErrorKind::Numeric => 5,
    }
}

fn load_mesh(spec: &str) -> Result<TriangleMesh> {
    match spec {
        "@humanoid" => Ok(shapes::humanoid()),
        "@sphere" => Ok(shapes::icosphere(20.0, 5)),
        "@painted-sphere" => Ok(shapes::painted_sphere(20.0, 6, 8.0)),
        s if s.starts_with('@') => Err(Error::Config(format!("unknown built-in mesh '{s}'"))),
        path => {
            let mut m = read_mesh(path)?;
            m.validate()?;
            Ok(m)
        }
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("plain data");
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn run(cli: Cli) -> Result<()> {
    let cfg = match &cli.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    let center = Vec3::from(cfg.volume_center);
    match cli.command {
        Command::SynthRender {
            mesh,
            views,
            out,
            size,
            radius,
            height,
            focal,
            unlit,
        } => {
            let mesh = load_mesh(&mesh)?;
            let cams = camera_ring(views, radius, height, center, &Intrinsics::square(size, focal))?;
            let opts = RenderOptions {
                shading: if unlit { Shading::Unlit } else { Shading::Headlight },
                ..Default::default()
            };
            let renders = render_views(&mesh, &cams, &opts);
            Capture::from_renders(cams, &renders).save(&out)
        }
        Command::GtTsdf { mesh, resolution, out } => {
            let mesh = load_mesh(&mesh)?;
            let spec = VolumeSpec::centered(center, cfg.volume_edge, resolution)?;
            let active = if resolution <= 128 {
                voxband::sparsevol::ActiveSet::dense(spec)
            } else {
                surface_shell(&spec, &mesh, cfg.truncation)?
            };
            let tsdf = mesh_to_tsdf(&mesh, Arc::new(active), cfg.truncation)?;
            write_field(&out, tsdf.field())
        }
        Command::QuantizeStudy {
            mesh,
            resolutions,
            samples,
            out,
        } => {
            let mesh = load_mesh(&mesh)?;
            let rows = quantization_study(&mesh, center, cfg.volume_edge, &resolutions, cfg.truncation, samples, cli.seed)?;
            let mut csv = String::from("resolution,mean_error_cm,n_effective_samples\n");
            for r in &rows {
                csv.push_str(&format!("{},{},{}\n", r.resolution, r.mean_error_cm, r.n_effective_samples));
            }
            std::fs::write(&out, csv).map_err(|e| Error::io(&out, e))
        }
        Command::Reconstruct {
            capture,
            checkpoint,
            fine_checkpoint,
            out,
            report,
        } => {
            let mut cfg = cfg;
            if let Some(c) = checkpoint {
                cfg.coarse_checkpoint = Some(c.display().to_string());
            }
            if let Some(c) = fine_checkpoint {
                cfg.fine_checkpoint = Some(c.display().to_string());
            }
            let capture = Capture::load(&capture)?;
            let nets = Networks::from_config(&cfg)?;
            let (mesh, rep) = reconstruct(&capture, &cfg, &nets)?;
            write_mesh(&out, &mesh)?;
            if let Some(r) = report {
                write_json(&r, &rep)?;
            }
            Ok(())
        }
        Command::Texture {
            capture,
            mesh,
            checkpoint,
            atlas_res,
            out,
        } => {
            let capture = Capture::load(&capture)?;
            let mesh = load_mesh(&mesh)?;
            let ckpt = checkpoint
                .map(|p| p.display().to_string())
                .or(cfg.texture_checkpoint.clone())
                .ok_or_else(|| Error::Config("texture needs --checkpoint or texture_checkpoint".into()))?;
            let model = load_texture_checkpoint(cfg.texture_net, &ckpt)?;
            let band = Arc::new(surface_shell(&cfg.fine_spec()?, &mesh, cfg.texture_band)?);
            let depths = depth_renders(&mesh, &capture.cameras);
            let weights = regress_blend_weights(
                band,
                &capture.cameras,
                &capture.colors,
                &depths,
                &model,
                &cfg.texture_extractor,
            )?;
            let views = ViewImages::new(&capture.cameras, &capture.colors)?;
            let atlas = bake_atlas(&mesh, &weights, &views, atlas_res)?;
            if atlas.hole_texels > 0 {
                log::warn!("{} atlas texels are unobserved by every view", atlas.hole_texels);
            }
            write_textured_obj(&out, "textured", &atlas)?;
            write_field(out.join("blend_weights.svf"), weights.field())
        }
        Command::TrainToy {
            stage,
            capture,
            gt,
            epochs,
            lr,
            coarse_checkpoint,
            mesh,
            out,
            report,
        } => {
            if cfg.coarse_resolution > 64 {
                return Err(Error::Config(format!(
                    "train-toy is desk-scale only: coarse resolution {} exceeds 64",
                    cfg.coarse_resolution
                )));
            }
            let capture = Capture::load(&capture)?;
            let opts = TrainOptions {
                steps: epochs,
                lr,
                seed: cli.seed,
            };
            match stage {
                StageArg::Coarse | StageArg::Fine => {
                    let gt = if gt.ends_with(".svf") {
                        GroundTruth::Field(read_field(&gt, cfg.truncation)?)
                    } else {
                        GroundTruth::Mesh(load_mesh(&gt)?)
                    };
                    let (stage, coarse) = match stage {
                        StageArg::Coarse => (TrainStage::Coarse, None),
                        _ => {
                            let mut c = cfg.clone();
                            if let Some(p) = coarse_checkpoint {
                                c.coarse_checkpoint = Some(p.display().to_string());
                            }
                            (TrainStage::Fine, Some(Networks::from_config(&c)?.coarse))
                        }
                    };
                    let (net, rep) = train_stage(stage, &capture, &gt, &cfg, coarse.as_ref(), &opts)?;
                    save_checkpoint(&net, &out)?;
                    if let Some(r) = report {
                        write_json(&r, &rep)?;
                    }
                    Ok(())
                }
                StageArg::Texture => {
                    let gt_mesh = load_mesh(&gt)?;
                    let surface = match &mesh {
                        Some(m) => load_mesh(m)?,
                        None => gt_mesh.clone(),
                    };
                    let band = Arc::new(surface_shell(&cfg.fine_spec()?, &surface, cfg.texture_band)?);
                    let depths = depth_renders(&surface, &capture.cameras);
                    let inputs = TextureInputs::from_images(
                        band.clone(),
                        &capture.cameras,
                        &capture.colors,
                        &depths,
                        &cfg.texture_extractor,
                    )?;
                    let views = ViewImages::new(&capture.cameras, &capture.colors)?;
                    let gt_colors = gt_color_volume(&gt_mesh, &band)?;
                    let (model, rep) = train_texture(&inputs, &views, &gt_colors, &cfg.texture_net, &opts)?;
                    save_texture_checkpoint(&model, &out)?;
                    if let Some(r) = report {
                        write_json(&r, &rep)?;
                    }
                    Ok(())
                }
            }
        }
        Command::Eval {
            pred,
            gt,
            views,
            normalize_height,
            area_samples,
            out,
        } => {
            let pred = load_mesh(&pred)?;
            let gt = load_mesh(&gt)?;
            let opts = DistanceOptions {
                sampling: match area_samples {
                    Some(samples) => SurfaceSampling::Area { samples, seed: cli.seed },
                    None => SurfaceSampling::Vertices,
                },
                normalize_height,
            };
            let mut report = MetricsReport {
                distances: Some(p2s_chamfer_with(&pred, &gt, &opts)?),
                ..Default::default()
            };
            if let Some(dir) = views {
                let capture = Capture::load(&dir)?;
                report.normal_error_deg = Some(normal_error(&pred, &gt, &capture.cameras)?);
                if pred.colors.is_some() {
                    let renders = render_views(&pred, &capture.cameras, &RenderOptions::default());
                    let n = renders.len() as f64;
                    let (mut p, mut s) = (0.0, 0.0);
                    for (r, c) in renders.iter().zip(&capture.colors) {
                        p += psnr(&r.color, c)?;
                        s += ssim(&r.color, c)?;
                    }
                    report.psnr_db = Some(p / n);
                    report.ssim = Some(s / n);
                }
            }
            report.save(&out)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("{}", serde_json::json!({"error": "config", "message": e.to_string()}));
            return ExitCode::from(2);
        }
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let kind = e.kind();
            let name = match kind {
                ErrorKind::Config => "config",
                ErrorKind::Io => "io",
                ErrorKind::Validation => "validation",
                ErrorKind::Numeric => "numeric",
            };
            let body = ErrorJson {
                error: name,
                message: e.to_string(),
            };
            eprintln!("{}", serde_json::to_string(&body).expect("plain data"));
            ExitCode::from(exit_code(kind))
        }
    }
}
