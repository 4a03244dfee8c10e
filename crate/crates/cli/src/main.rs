use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use log::{info, warn};
use serde::Serialize;

use dynagmap::eval::{psnr, ssim};
use dynagmap::io::{self, SequenceDir};
use dynagmap::pipeline::{Mapper, Metrics, RunOptions};
use dynagmap::protocol::run_track_predict_protocol;
use dynagmap::render::{render, RenderSettings};
use dynagmap::sim::{generate_scene, SceneSpec};
use dynagmap::{Error, FlowMode, ManageConfig, Pose};

const THREADS_ENV: &str = "DYNAGMAP_THREADS";

#[derive(Parser)]
#[command(name = "dynagmap", version, about = "Dynamic Gaussian-splatting mapping on posed RGB-D sequences")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum FlowModeArg {
    Linearized,
    Exact,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic scene description into a sequence directory.
    Synth {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Map a sequence and write metrics, the final checkpoint and optional renders.
    Run {
        #[arg(long)]
        seq: PathBuf,
        /// JSON mapping configuration; defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Treat every pixel as static.
        #[arg(long)]
        no_dynamic: bool,
        #[arg(long, value_enum, conflicts_with = "no_dynamic")]
        flow_mode: Option<FlowModeArg>,
        /// Write the render of every frame to OUT/renders.
        #[arg(long)]
        dump_renders: bool,
    },
    /// Render a checkpoint at an arbitrary pose and time.
    Render {
        #[arg(long)]
        checkpoint: PathBuf,
        /// World-from-camera pose as "tx ty tz qx qy qz qw".
        #[arg(long, allow_hyphen_values = true)]
        pose: String,
        #[arg(long, allow_hyphen_values = true)]
        time: f64,
        /// Camera intrinsics; defaults to intrinsics.txt beside the checkpoint.
        #[arg(long)]
        intrinsics: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Map every K-th frame and score interpolated and extrapolated renders.
    Track {
        #[arg(long)]
        seq: PathBuf,
        #[arg(long)]
        interval: i64,
        /// Comma-separated frame offsets, e.g. "3,5,10".
        #[arg(long, allow_hyphen_values = true)]
        targets: String,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score rendered frames against ground truth.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        /// Directory of frame_*.mask.pgm motion masks for DynaPSNR.
        #[arg(long)]
        mask: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Failure with the process exit status it maps to.
struct Failure {
    code: u8,
    msg: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        // bad inputs are usage errors, anything later is a runtime failure
        let code = match e {
            Error::Load { .. } | Error::Config(_) | Error::SpecValidation(_) => 2,
            _ => 1,
        };
        Failure { code, msg: e.to_string() }
    }
}

fn usage(msg: impl Into<String>) -> Failure {
    Failure { code: 2, msg: msg.into() }
}

type CliResult<T = ()> = Result<T, Failure>;

fn ensure_dir(path: &Path) -> CliResult {
    fs::create_dir_all(path).map_err(|e| usage(format!("cannot create {}: {e}", path.display())))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Failure::from(Error::from(e)))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Failure { code: 1, msg: format!("cannot write {}: {e}", path.display()) })
}

fn load_config(path: Option<&Path>) -> CliResult<ManageConfig> {
    match path {
        Some(p) => Ok(ManageConfig::load(p)?),
        None => Ok(ManageConfig::default()),
    }
}

fn configure_threads() -> CliResult {
    let Ok(raw) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .map_err(|_| usage(format!("{THREADS_ENV} must be a non-negative integer, got {raw:?}")))?;
    if n > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Failure { code: 1, msg: e.to_string() })?;
    }
    Ok(())
}

fn synth(spec_path: &Path, out: &Path) -> CliResult {
    let text = fs::read_to_string(spec_path).map_err(|e| usage(format!("{}: {e}", spec_path.display())))?;
    let spec: SceneSpec =
        serde_json::from_str(&text).map_err(|e| usage(format!("{}: {e}", spec_path.display())))?;
    let seq = generate_scene(&spec)?;
    io::write_sequence(out, &seq.cam, &seq.frames)?;
    info!("wrote {} frames to {}", seq.frames.len(), out.display());
    Ok(())
}

struct RunArgs<'a> {
    seq: &'a Path,
    config: Option<&'a Path>,
    out: &'a Path,
    no_dynamic: bool,
    flow_mode: Option<FlowModeArg>,
    dump_renders: bool,
}

fn run(args: RunArgs) -> CliResult {
    let seq = SequenceDir::open(args.seq)?;
    let mut config = load_config(args.config)?;
    if let Some(mode) = args.flow_mode {
        config.flow_mode = match mode {
            FlowModeArg::Linearized => FlowMode::Linearized,
            FlowModeArg::Exact => FlowMode::ExactCorrespondence,
        };
    }
    ensure_dir(args.out)?;
    let renders = args.out.join("renders");
    if args.dump_renders {
        ensure_dir(&renders)?;
    }
    let options = RunOptions {
        no_dynamic: args.no_dynamic,
        keep_renders: args.dump_renders,
        ..Default::default()
    };
    let mut mapper = Mapper::new(seq.cam, config, options)?;
    let mut per_frame = Vec::with_capacity(seq.indices.len());
    for frame in seq.frames() {
        let frame = frame?;
        let (m, img) = mapper.process_frame(&frame)?;
        if let Some(img) = img {
            io::write_ppm(&io::rgb_path(&renders, frame.timestamp), &img)?;
        }
        per_frame.push(m);
    }
    let metrics = Metrics::from_frames(per_frame);
    write_json(&args.out.join("metrics.json"), &metrics)?;
    io::save_checkpoint(&args.out.join("checkpoint.jsonl"), &mapper.map)?;
    io::write_intrinsics(&args.out.join(io::INTRINSICS_FILE), &seq.cam)?;
    Ok(())
}

fn parse_pose(text: &str) -> CliResult<Pose> {
    let v: Vec<f64> = text
        .split(|c: char| c.is_whitespace() || c == ',')
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<f64>())
        .collect::<Result<_, _>>()
        .map_err(|e| usage(format!("--pose: {e}")))?;
    if v.len() != 7 {
        return Err(usage(format!("--pose needs 7 numbers (tx ty tz qx qy qz qw), got {}", v.len())));
    }
    Pose::from_components([v[0], v[1], v[2]], v[3], v[4], v[5], v[6]).map_err(|e| usage(format!("--pose: {e}")))
}

fn render_cmd(checkpoint: &Path, pose: &str, time: f64, intrinsics: Option<&Path>, out: &Path) -> CliResult {
    let pose = parse_pose(pose)?;
    if !time.is_finite() {
        return Err(usage("--time must be finite"));
    }
    let intrinsics = match intrinsics {
        Some(p) => p.to_path_buf(),
        None => checkpoint.with_file_name(io::INTRINSICS_FILE),
    };
    let cam = io::read_intrinsics(&intrinsics)?;
    let map = io::load_checkpoint(checkpoint)?;
    let settings = RenderSettings::with_lambda_alpha(map.config.lambda_alpha);
    let img = render(&map, &cam, &pose, time, &settings)?.rgb;
    io::write_ppm(out, &img)?;
    Ok(())
}

fn track(seq: &Path, interval: i64, targets: &str, config: Option<&Path>, out: &Path) -> CliResult {
    if interval < 1 {
        return Err(usage("--interval must be >= 1"));
    }
    let targets: Vec<i64> = targets
        .split(',')
        .map(|s| s.trim().parse::<i64>())
        .collect::<Result<_, _>>()
        .map_err(|e| usage(format!("--targets: {e}")))?;
    let config = load_config(config)?;
    let (cam, frames) = io::load_sequence(seq)?;
    let table = run_track_predict_protocol(&frames, &cam, &config, &RunOptions::default(), interval, &targets)?;
    for c in table.cells.iter().filter(|c| c.skipped) {
        warn!("{:?} offset {} has no target frame in the sequence", c.mode, c.offset);
    }
    write_json(out, &table)
}

#[derive(Serialize)]
struct EvalFrame {
    frame: i64,
    psnr: f64,
    ssim: f64,
    dyna_psnr: Option<f64>,
}

#[derive(Serialize)]
struct EvalSummary {
    frames: usize,
    psnr: f64,
    ssim: f64,
    dyna_psnr: Option<f64>,
}

#[derive(Serialize)]
struct EvalReport {
    per_frame: Vec<EvalFrame>,
    summary: EvalSummary,
}

fn frame_indices(dir: &Path) -> CliResult<Vec<i64>> {
    let entries = fs::read_dir(dir).map_err(|e| usage(format!("{}: {e}", dir.display())))?;
    let mut out: Vec<i64> = entries
        .filter_map(|e| e.ok())
        .filter_map(|e| {
            let name = e.file_name().to_string_lossy().into_owned();
            name.strip_prefix("frame_")?.strip_suffix(".rgb.ppm")?.parse().ok()
        })
        .collect();
    out.sort_unstable();
    if out.is_empty() {
        return Err(usage(format!("{} has no frame_*.rgb.ppm files", dir.display())));
    }
    Ok(out)
}

fn eval_cmd(pred: &Path, gt: &Path, mask: Option<&Path>, out: &Path) -> CliResult {
    let mut per_frame = Vec::new();
    for idx in frame_indices(pred)? {
        let p = io::read_ppm(&io::rgb_path(pred, idx))?;
        let g = io::read_ppm(&io::rgb_path(gt, idx))?;
        let dyna_psnr = match mask {
            Some(dir) => {
                let m = io::read_mask_pgm(&io::mask_path(dir, idx))?;
                if m.count() > 0 {
                    Some(psnr(&p, &g, Some(&m))?)
                } else {
                    None
                }
            }
            None => None,
        };
        per_frame.push(EvalFrame { frame: idx, psnr: psnr(&p, &g, None)?, ssim: ssim(&p, &g)?, dyna_psnr });
    }
    let n = per_frame.len() as f64;
    let dyna: Vec<f64> = per_frame.iter().filter_map(|f| f.dyna_psnr).collect();
    let summary = EvalSummary {
        frames: per_frame.len(),
        psnr: per_frame.iter().map(|f| f.psnr).sum::<f64>() / n,
        ssim: per_frame.iter().map(|f| f.ssim).sum::<f64>() / n,
        dyna_psnr: (!dyna.is_empty()).then(|| dyna.iter().sum::<f64>() / dyna.len() as f64),
    };
    write_json(out, &EvalReport { per_frame, summary })
}

fn dispatch(cli: Cli) -> CliResult {
    configure_threads()?;
    match cli.command {
        Command::Synth { spec, out } => synth(&spec, &out),
        Command::Run { seq, config, out, no_dynamic, flow_mode, dump_renders } => run(RunArgs {
            seq: &seq,
            config: config.as_deref(),
            out: &out,
            no_dynamic,
            flow_mode,
            dump_renders,
        }),
        Command::Render { checkpoint, pose, time, intrinsics, out } => {
            render_cmd(&checkpoint, &pose, time, intrinsics.as_deref(), &out)
        }
        Command::Track { seq, interval, targets, config, out } => {
            track(&seq, interval, &targets, config.as_deref(), &out)
        }
        Command::Eval { pred, gt, mask, out } => eval_cmd(&pred, &gt, mask.as_deref(), &out),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.msg);
            ExitCode::from(f.code)
        }
    }
}
