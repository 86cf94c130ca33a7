//! Command-line surface: `gen-data`, `train`, `render`, `extract-mesh`,
//! `eval` and `grow-dry-run`.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::Serialize;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::growth::{gather_samples, grow, DepthProvider, DepthSource, GrowthReport};
use crate::io::{read_dataset, read_json, read_obj, read_ply_points, write_dataset, write_json, write_obj, write_png, CameraFile, CameraRecord};
use crate::losses::ssim;
use crate::mesh::{extract_mesh, TriangleMesh};
use crate::metrics::{chamfer_distance, f1_score, psnr};
use crate::model::Model;
use crate::scene::{Camera, ImageBuffer, Vec3};
use crate::seed::substream;
use crate::synth::{generate_dataset, half_coverage_variant, AnalyticScene, SyntheticDataset};
use crate::train::{load_model, run, Trainer};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_FAILURE: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "sdfsplat", version, about = "SDF-regularized Gaussian splatting on a level-of-detail grid")]
pub struct Cli {
    /// TOML run configuration; missing keys take their defaults.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Overrides the `seed` key.
    #[arg(long, global = true, value_name = "N")]
    pub seed: Option<u64>,
    /// Single worker thread and a fixed reduction order.
    #[arg(long, global = true)]
    pub deterministic: bool,
    /// Checkpoint to continue training from.
    #[arg(long, global = true, value_name = "PATH")]
    pub resume: Option<PathBuf>,
    /// Overrides the `out` key.
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render an analytic scene into a dataset directory (`--out`, else the `dataset` key).
    GenData,
    /// Initialize from the dataset's sparse points and train.
    Train,
    /// Render a checkpoint from every camera of a cameras.json.
    Render {
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
        /// Defaults to the dataset's cameras.json.
        #[arg(long, value_name = "PATH")]
        cameras: Option<PathBuf>,
    },
    /// Marching cubes on the finest-level SDF.
    ExtractMesh {
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
        /// Defaults to the `mesh_resolution` key.
        #[arg(long)]
        resolution: Option<usize>,
    },
    /// Chamfer distance and F1 of a mesh, plus PSNR and SSIM of a checkpoint on the held-out views.
    Eval {
        #[arg(long, value_name = "PATH")]
        mesh: PathBuf,
        /// OBJ mesh or PLY points; defaults to samples of the analytic scene.
        #[arg(long, value_name = "PATH")]
        reference: Option<PathBuf>,
        #[arg(long, value_name = "PATH")]
        checkpoint: Option<PathBuf>,
    },
    /// Report what one growth step would insert, leaving the checkpoint untouched.
    GrowDryRun {
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
    },
}

/// Geometry and image scores written by `eval`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub chamfer: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub f1_tau: f64,
    pub samples: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub psnr: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ssim: Option<f64>,
}

#[derive(Clone, Debug, Serialize)]
struct DryRunReport {
    samples: usize,
    hit_pixels: usize,
    after_filter: usize,
    growth: GrowthReport,
}

#[derive(Clone, Debug, Serialize)]
struct TrainReport {
    iterations: usize,
    initial_total: f64,
    final_total: f64,
    gaussians: usize,
    checkpoint: PathBuf,
    log: PathBuf,
}

/// Parses `args` (program name first), runs the subcommand and returns the exit status.
pub fn run_cli<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match execute(&cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_FAILURE
        }
    }
}

/// Config file plus command-line overrides.
pub fn resolve_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if cli.deterministic {
        cfg.deterministic = true;
    }
    if let Some(o) = &cli.out {
        cfg.out = o.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn execute(cli: &Cli) -> Result<()> {
    let mut cfg = resolve_config(cli)?;
    if let Command::GenData = cli.command {
        // the dataset lands in --out when given
        if cli.out.is_none() {
            cfg.out = cfg.dataset.clone();
        }
    }
    cfg.save_resolved(&cfg.out)?;
    if cfg.deterministic {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().map_err(|e| Error::Config(e.to_string()))?;
        pool.install(|| dispatch(cli, &cfg))
    } else {
        dispatch(cli, &cfg)
    }
}

fn dispatch(cli: &Cli, cfg: &RunConfig) -> Result<()> {
    let out = &cfg.out;
    match &cli.command {
        Command::GenData => {
            let ds = make_dataset(cfg)?;
            write_dataset(out, &ds)?;
            println!("wrote {} views and {} points to {}", ds.cameras.len(), ds.sparse_points.len(), out.display());
        }
        Command::Train => {
            let ds = read_dataset(&cfg.dataset)?;
            let mut trainer = build_trainer(cfg, &ds)?;
            if let Some(p) = &cli.resume {
                trainer.load_checkpoint(p)?;
            }
            let s = run(&mut trainer, out)?;
            let report = TrainReport {
                iterations: s.iterations,
                initial_total: s.initial_total,
                final_total: s.final_total,
                gaussians: s.gaussians,
                checkpoint: s.checkpoint,
                log: s.log,
            };
            write_json(&out.join("train_summary.json"), &report)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
        Command::Render { checkpoint, cameras } => {
            let model = load_model(checkpoint)?;
            let path = cameras.clone().unwrap_or_else(|| cfg.dataset.join("cameras.json"));
            let file: CameraFile = read_json(&path)?;
            let bg = Vec3::from(cfg.background);
            for (i, rec) in file.cameras.iter().enumerate() {
                let img = model.render(&rec.to_camera()?, &bg).color;
                write_png(&out.join(format!("render_{i:03}.png")), &img)?;
            }
            println!("rendered {} views to {}", file.cameras.len(), out.display());
        }
        Command::ExtractMesh { checkpoint, resolution } => {
            let model = load_model(checkpoint)?;
            let mesh = extract_mesh(&model, resolution.unwrap_or(cfg.mesh_resolution))?;
            let path = out.join("mesh.obj");
            write_obj(&path, &mesh.vertices, &mesh.triangles)?;
            println!("wrote {} vertices and {} triangles to {}", mesh.vertices.len(), mesh.triangles.len(), path.display());
        }
        Command::Eval { mesh, reference, checkpoint } => {
            let (v, t) = read_obj(mesh)?;
            let pred = TriangleMesh { vertices: v, triangles: t, normals: None };
            let gt = reference_points(cfg, reference.as_deref())?;
            let mut report = evaluate_mesh(&pred, &gt, cfg)?;
            if let Some(p) = checkpoint {
                let model = load_model(p)?;
                let ds = read_dataset(&cfg.dataset)?;
                let (ps, ss) = image_scores(&model, &ds, &Vec3::from(cfg.background))?;
                report.psnr = Some(ps);
                report.ssim = Some(ss);
            }
            write_json(&out.join("metrics.json"), &report)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
        Command::GrowDryRun { checkpoint } => {
            let model = load_model(checkpoint)?;
            let file: CameraFile = read_json(&cfg.dataset.join("cameras.json"))?;
            let views: Vec<Camera> = file.cameras.iter().map(CameraRecord::to_camera).collect::<Result<_>>()?;
            let scene = AnalyticScene::by_name(&cfg.scene)?;
            let gcfg = cfg.growth_config();
            let provider = match gcfg.depth_source {
                DepthSource::Oracle => DepthProvider::Oracle(&scene),
                DepthSource::SelfRender => DepthProvider::Model(&model),
            };
            let (samples, hits, filtered) = gather_samples(&model, &views, provider, &gcfg);
            let mut scratch = model.clone();
            let growth = grow(&mut scratch, &views, provider, &gcfg, gcfg.trigger_iteration, &mut substream(cfg.seed, "grow-dry-run"))?;
            let report = DryRunReport { samples: samples.len(), hit_pixels: hits, after_filter: filtered, growth };
            write_json(&out.join("grow_dry_run.json"), &report)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
    }
    Ok(())
}

/// The synthetic dataset described by `cfg`.
pub fn make_dataset(cfg: &RunConfig) -> Result<SyntheticDataset> {
    let scene = AnalyticScene::by_name(&cfg.scene)?;
    let ds = generate_dataset(&scene, cfg.n_cameras, cfg.image_size, cfg.sparse_points, cfg.seed)?;
    Ok(if cfg.half_coverage { half_coverage_variant(&ds) } else { ds })
}

/// Initial model from the dataset's sparse points.
pub fn init_model(cfg: &RunConfig, ds: &SyntheticDataset) -> Result<Model> {
    let eyes: Vec<Vec3> = ds.train.iter().map(|&i| ds.cameras[i].center()).collect();
    let mut rng = substream(cfg.seed, "init");
    let mut model = Model::init_from_points(&ds.sparse_points, ds.scene.bounds, &eyes, &cfg.init_config(), &mut rng)?;
    if cfg.init_colors {
        model.init_colors_from_points(&ds.sparse_points, &ds.sparse_colors)?;
    }
    Ok(model)
}

/// Trainer over the training split, growing from every camera.
pub fn build_trainer(cfg: &RunConfig, ds: &SyntheticDataset) -> Result<Trainer> {
    let model = init_model(cfg, ds)?;
    let views = ds.train.iter().map(|&i| (ds.cameras[i].clone(), ds.images[i].clone())).collect();
    Trainer::new(cfg.train_config(), model, views, ds.cameras.clone(), Some(ds.scene.clone()))
}

fn reference_points(cfg: &RunConfig, reference: Option<&Path>) -> Result<Vec<Vec3>> {
    let mut rng = substream(cfg.seed, "eval-samples");
    match reference {
        None => Ok(AnalyticScene::by_name(&cfg.scene)?.surface_samples(cfg.eval_samples, &mut rng)),
        Some(p) if p.extension().is_some_and(|e| e.eq_ignore_ascii_case("ply")) => Ok(read_ply_points(p)?.0),
        Some(p) => {
            let (v, t) = read_obj(p)?;
            TriangleMesh { vertices: v, triangles: t, normals: None }.sample_points(cfg.eval_samples, &mut rng)
        }
    }
}

/// Samples `eval_samples` points from `mesh` and scores them against `reference`.
pub fn evaluate_mesh(mesh: &TriangleMesh, reference: &[Vec3], cfg: &RunConfig) -> Result<EvalReport> {
    if mesh.is_empty() {
        return Err(Error::InvalidInput("mesh has no triangles".into()));
    }
    let pts = mesh.sample_points(cfg.eval_samples, &mut substream(cfg.seed, "eval-samples"))?;
    let f = f1_score(&pts, reference, cfg.f1_tau)?;
    Ok(EvalReport {
        chamfer: chamfer_distance(&pts, reference)?,
        precision: f.precision,
        recall: f.recall,
        f1: f.f1,
        f1_tau: cfg.f1_tau,
        samples: pts.len(),
        psnr: None,
        ssim: None,
    })
}

/// Mean PSNR and SSIM over the held-out views.
pub fn image_scores(model: &Model, ds: &SyntheticDataset, background: &Vec3) -> Result<(f64, f64)> {
    if ds.eval.is_empty() {
        return Err(Error::InvalidInput("dataset has no held-out views".into()));
    }
    let mut p = 0.0;
    let mut s = 0.0;
    for &i in &ds.eval {
        let img: ImageBuffer = model.render(&ds.cameras[i], background).color;
        p += psnr(&img, &ds.images[i])?;
        s += ssim(&img, &ds.images[i])?;
    }
    let n = ds.eval.len() as f64;
    Ok((p / n, s / n))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn usage_errors_exit_one() {
        assert_eq!(run_cli(["sdfsplat"]), EXIT_USAGE);
        assert_eq!(run_cli(["sdfsplat", "frobnicate"]), EXIT_USAGE);
        assert_eq!(run_cli(["sdfsplat", "train", "--seed", "x"]), EXIT_USAGE);
        assert_eq!(run_cli(["sdfsplat", "--help"]), EXIT_OK);
    }

    #[test]
    fn runtime_errors_exit_two() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("o");
        let bad = dir.path().join("bad.toml");
        std::fs::write(&bad, "no_such_key = 1\n").unwrap();
        let code = run_cli(["sdfsplat", "--config", bad.to_str().unwrap(), "--out", out.to_str().unwrap(), "train"]);
        assert_eq!(code, EXIT_FAILURE);
        let missing = dir.path().join("missing.digs");
        let code = run_cli(["sdfsplat", "--out", out.to_str().unwrap(), "extract-mesh", "--checkpoint", missing.to_str().unwrap()]);
        assert_eq!(code, EXIT_FAILURE);
    }

    #[test]
    fn overrides_apply_on_top_of_the_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.toml");
        std::fs::write(&p, "seed = 5\nout = \"a\"\n").unwrap();
        let cli = Cli::try_parse_from(["sdfsplat", "--config", p.to_str().unwrap(), "--seed", "9", "--deterministic", "train"]).unwrap();
        let cfg = resolve_config(&cli).unwrap();
        assert_eq!((cfg.seed, cfg.deterministic, cfg.out.as_path()), (9, true, Path::new("a")));
    }
}
