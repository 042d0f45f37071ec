//! Command-line entry points: `gen-scene`, `train`, `render`, `eval`.
//!
//! Every command reads one optional TOML configuration (`--config`) whose
//! values are overridden by explicit flags. Exit codes: 0 success, 1 runtime
//! failure, 2 usage or configuration error (including unreadable inputs).

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use log::info;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Pose;
use crate::io_util::write_atomic_bytes;
use crate::scenedata::{
    generate_dataset, load_dataset, load_scene_spec, parse_toml, preset, read_text, write_dataset, write_pfm,
    write_png, PRESETS,
};
use crate::trainer::{
    evaluate, render_view, EvalConfig, IterationRecord, RenderOptions, SamplerKind, Stage, TrainConfig, TrainState,
    TrainingData,
};

/// Contents of the `--config` file.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl FileConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let cfg: Self = parse_toml(p, &read_text(p)?)?;
                cfg.train.validate()?;
                Ok(cfg)
            }
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "fusionfield", version, about = "Camera + LiDAR neural field reconstruction")]
pub struct Cli {
    /// TOML configuration file; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Single-threaded, bit-reproducible execution.
    #[arg(long, global = true)]
    pub deterministic: bool,
    /// Increase log verbosity (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset (images, depth maps, LiDAR scans, manifest).
    GenScene {
        /// Built-in scene name.
        #[arg(long, conflicts_with = "scene", required_unless_present = "scene")]
        preset: Option<String>,
        /// Custom scene description (TOML).
        #[arg(long)]
        scene: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the three training stages and write checkpoints, log and grid.
    Train {
        /// Dataset directory or manifest.
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        overrides: TrainOverrides,
    },
    /// Render a color image (PNG) and range map (PFM) from a checkpoint.
    Render {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Camera-to-world pose as 12 row-major numbers of a 3x4 matrix.
        #[arg(long, num_args = 12, allow_negative_numbers = true, conflicts_with = "manifest")]
        pose: Option<Vec<f64>>,
        /// Take pose and intrinsics from a frame of this dataset.
        #[arg(long, requires = "frame")]
        manifest: Option<PathBuf>,
        #[arg(long)]
        frame: Option<usize>,
        /// Output prefix; `.png` and `.pfm` are appended.
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        render: RenderOverrides,
    },
    /// Render every test frame and write a metric report (text + CSV).
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        /// Text report path; the CSV table goes next to it with `.csv`.
        #[arg(long)]
        report: PathBuf,
        /// Also write the rendered test views to this directory.
        #[arg(long)]
        views: Option<PathBuf>,
        #[command(flatten)]
        render: RenderOverrides,
    },
}

#[derive(Debug, Clone, Default, clap::Args)]
pub struct TrainOverrides {
    #[arg(long)]
    pub seed: Option<u64>,
    /// `ogm` (learned occupancy sampling) or `uniform`.
    #[arg(long)]
    pub sampler: Option<SamplerKind>,
    #[arg(long)]
    pub samples_per_ray: Option<usize>,
    #[arg(long)]
    pub stage1_iters: Option<u64>,
    #[arg(long)]
    pub stage2_iters: Option<u64>,
    #[arg(long)]
    pub stage3_iters: Option<u64>,
    #[arg(long)]
    pub lidar_batch: Option<usize>,
    #[arg(long)]
    pub camera_batch: Option<usize>,
}

impl TrainOverrides {
    pub fn apply(&self, c: &mut TrainConfig) {
        macro_rules! set {
            ($($f:ident),*) => {$( if let Some(v) = self.$f { c.$f = v; } )*};
        }
        set!(seed, sampler, samples_per_ray, stage1_iters, stage2_iters, stage3_iters, lidar_batch, camera_batch);
    }
}

#[derive(Debug, Clone, Default, clap::Args)]
pub struct RenderOverrides {
    #[arg(long)]
    pub sampler: Option<SamplerKind>,
    #[arg(long)]
    pub samples_per_ray: Option<usize>,
}

/// Outcome of one command.
#[derive(Debug)]
pub struct CommandResult {
    pub exit_code: i32,
    pub summary: String,
    pub artifacts: Vec<PathBuf>,
}

enum Failure {
    Usage(Error),
    Runtime(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) | Error::Version { .. } => Failure::Usage(e),
            _ => Failure::Runtime(e),
        }
    }
}

/// Errors while reading user-supplied inputs are usage errors.
trait InputContext<T> {
    fn input(self) -> std::result::Result<T, Failure>;
}

impl<T> InputContext<T> for Result<T> {
    fn input(self) -> std::result::Result<T, Failure> {
        self.map_err(Failure::Usage)
    }
}

type Outcome = std::result::Result<(String, Vec<PathBuf>), Failure>;

pub fn run(cli: &Cli) -> CommandResult {
    let outcome = dispatch(cli);
    match outcome {
        Ok((summary, artifacts)) => CommandResult {
            exit_code: 0,
            summary,
            artifacts,
        },
        Err(Failure::Usage(e)) => CommandResult {
            exit_code: 2,
            summary: format!("error: {e}"),
            artifacts: Vec::new(),
        },
        Err(Failure::Runtime(e)) => CommandResult {
            exit_code: 1,
            summary: format!("error: {e}"),
            artifacts: Vec::new(),
        },
    }
}

fn dispatch(cli: &Cli) -> Outcome {
    let mut file = FileConfig::load(cli.config.as_deref()).input()?;
    file.train.deterministic |= cli.deterministic;
    match &cli.command {
        Command::GenScene { preset: name, scene, out } => gen_scene(name.as_deref(), scene.as_deref(), out),
        Command::Train {
            dataset,
            out,
            overrides,
        } => {
            overrides.apply(&mut file.train);
            train(file.train, dataset, out)
        }
        Command::Render {
            checkpoint,
            pose,
            manifest,
            frame,
            out,
            render,
        } => render_cmd(cli, checkpoint, pose.as_deref(), manifest.as_deref(), *frame, out, render),
        Command::Eval {
            checkpoint,
            dataset,
            report,
            views,
            render,
        } => eval_cmd(cli, &file.eval, checkpoint, dataset, report, views.as_deref(), render),
    }
}

fn gen_scene(name: Option<&str>, scene: Option<&Path>, out: &Path) -> Outcome {
    let spec = match (name, scene) {
        (Some(n), _) => preset(n).map_err(|e| {
            Failure::Usage(Error::Config(format!("{e} (available: {})", PRESETS.join(", "))))
        })?,
        (None, Some(p)) => load_scene_spec(p).input()?,
        (None, None) => return Err(Failure::Usage(Error::Config("pass --preset or --scene".into()))),
    };
    let dataset = generate_dataset(&spec).input()?;
    let manifest = write_dataset(&dataset, out)?;
    Ok((
        format!(
            "wrote {} camera frames and {} LiDAR scans",
            dataset.cameras.len(),
            dataset.scans.len()
        ),
        vec![manifest],
    ))
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn train(config: TrainConfig, dataset: &Path, out: &Path) -> Outcome {
    config.validate().input()?;
    let ds = load_dataset(dataset).input()?;
    let data = TrainingData::prepare(&ds).input()?;
    create_dir(out)?;
    let mut state = TrainState::new(config, data.meta).input()?;

    let log_path = out.join("train_log.jsonl");
    let partial = out.join("train_log.jsonl.partial");
    let file = File::create(&partial).map_err(|e| Error::io(&partial, e))?;
    let mut log = BufWriter::new(file);
    let mut artifacts = Vec::new();
    let mut last = None;
    for (stage, name) in [
        (Stage::Sigma, "stage1"),
        (Stage::Color, "stage2"),
        (Stage::Joint, "stage3"),
    ] {
        let mut sink = |r: &IterationRecord| -> Result<()> {
            let line = serde_json::to_string(r).map_err(|e| Error::Contract(e.to_string()))?;
            writeln!(log, "{line}").map_err(|e| Error::io(&partial, e))?;
            last = Some(r.clone());
            Ok(())
        };
        state.run_stage(stage, &data, &mut sink)?;
        let path = out.join(format!("checkpoint_{name}.ffck"));
        state.save(&path)?;
        info!("{name} complete at iteration {}", state.progress.iteration);
        artifacts.push(path);
    }
    let final_path = out.join("checkpoint_final.ffck");
    state.save(&final_path)?;
    artifacts.push(final_path);
    log.flush().map_err(|e| Error::io(&partial, e))?;
    drop(log);
    std::fs::rename(&partial, &log_path).map_err(|e| Error::io(&log_path, e))?;
    artifacts.push(log_path);
    let ogm_path = out.join("ogm.bin");
    state.ogm.export(&ogm_path)?;
    artifacts.push(ogm_path);
    let summary = match last {
        Some(r) => format!(
            "trained {} iterations; final loss {:.5} (λ1 {}, ε {:.5})",
            r.iteration, r.total, r.lambda1, r.epsilon
        ),
        None => "schedule had no iterations".into(),
    };
    Ok((summary, artifacts))
}

fn render_options(state: &TrainState, cli: &Cli, o: &RenderOverrides) -> RenderOptions {
    let mut opts = RenderOptions::from_config(&state.config);
    opts.deterministic |= cli.deterministic;
    if let Some(s) = o.sampler {
        opts.sampler = s;
    }
    if let Some(n) = o.samples_per_ray {
        opts.samples_per_ray = n;
    }
    opts
}

fn render_cmd(
    cli: &Cli,
    checkpoint: &Path,
    pose: Option<&[f64]>,
    manifest: Option<&Path>,
    frame: Option<usize>,
    out: &Path,
    overrides: &RenderOverrides,
) -> Outcome {
    let state = TrainState::load(checkpoint).input()?;
    let (pose, intrinsics) = match (pose, manifest, frame) {
        (Some(p), _, _) => {
            let rows: [f64; 12] = p
                .try_into()
                .map_err(|_| Failure::Usage(Error::Config("--pose takes 12 numbers".into())))?;
            (Pose::from_rows_3x4(&rows).input()?, state.meta.reference_intrinsics)
        }
        (None, Some(m), Some(i)) => {
            let ds = load_dataset(m).input()?;
            let f = ds.cameras.get(i).ok_or_else(|| {
                Failure::Usage(Error::Config(format!(
                    "frame {i} out of range ({} frames)",
                    ds.cameras.len()
                )))
            })?;
            (f.pose, f.intrinsics)
        }
        _ => {
            return Err(Failure::Usage(Error::Config(
                "pass --pose or --manifest with --frame".into(),
            )))
        }
    };
    let opts = render_options(&state, cli, overrides);
    let (image, depth) = render_view(&state, &pose, &intrinsics, &opts).input()?;
    let png = with_suffix(out, "png");
    let pfm = with_suffix(out, "pfm");
    write_png(&png, &image)?;
    write_pfm(&pfm, &depth)?;
    Ok((
        format!("rendered {}x{} view", image.width, image.height),
        vec![png, pfm],
    ))
}

fn with_suffix(prefix: &Path, ext: &str) -> PathBuf {
    let mut s = prefix.as_os_str().to_owned();
    s.push(".");
    s.push(ext);
    PathBuf::from(s)
}

fn eval_cmd(
    cli: &Cli,
    eval: &EvalConfig,
    checkpoint: &Path,
    dataset: &Path,
    report: &Path,
    views: Option<&Path>,
    overrides: &RenderOverrides,
) -> Outcome {
    let state = TrainState::load(checkpoint).input()?;
    let ds = load_dataset(dataset).input()?;
    let opts = render_options(&state, cli, overrides);
    let (rep, rendered) = evaluate(&state, &ds, eval, &opts).input()?;
    let text = rep.to_text()?;
    let csv = rep.to_csv()?;
    let csv_path = report.with_extension("csv");
    if let Some(parent) = report.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    write_atomic_bytes(report, text.as_bytes())?;
    write_atomic_bytes(&csv_path, csv.as_bytes())?;
    let mut artifacts = vec![report.to_path_buf(), csv_path];
    if let Some(dir) = views {
        create_dir(dir)?;
        for v in &rendered {
            let png = dir.join(format!("cam_{:03}.png", v.index));
            let pfm = dir.join(format!("cam_{:03}.pfm", v.index));
            write_png(&png, &v.image)?;
            write_pfm(&pfm, &v.depth)?;
            artifacts.extend([png, pfm]);
        }
    }
    let mean = rep.mean()?;
    let mut summary = format!("{} test views: PSNR {:.3} dB, MS-SSIM {:.4}", rep.images.len(), mean.psnr, mean.mssim);
    if let (Some(s), Some(a), Some(q)) = (mean.silog, mean.abs_rel, mean.sq_rel) {
        summary.push_str(&format!(", SILog {s:.4}, absErrRel {a:.4}, sqErrRel {q:.4}"));
    }
    Ok((summary, artifacts))
}
