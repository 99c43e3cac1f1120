//! Command-line surface: `synth`, `init`, `track`, `eval`, `render-debug`.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::data::FrameSource;
use crate::error::{Error, Result};
use crate::geometry::AnisoScale;
use crate::init::{initialize, resolve_onset_pose, InitResult};
use crate::io::{read_json, read_sequence, read_track_result, write_eval_report, write_init_result, write_pgm, write_track_result};
use crate::metrics::evaluate;
use crate::raster::rasterize_hard;
use crate::synth::{write_synthetic, ObjectSpec, SynthConfig};
use crate::tracker::{track_bidirectional, TrackerConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_TRACKING_FAILED: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "anchortrack", version, about = "Hand-held object 6D tracking from monocular observations")]
struct Cli {
    /// JSON file overriding tracker configuration fields.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Log progress to standard error.
    #[arg(short, long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic sequence with ground truth.
    Synth(SynthArgs),
    /// Detect the onset frame and recover metric scales.
    Init(InitArgs),
    /// Track the object through the sequence.
    Track(TrackArgs),
    /// Compare a tracking result with ground truth.
    Eval(EvalArgs),
    /// Write a PGM overlay of observed masks and the tracked silhouette.
    RenderDebug(RenderArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ObjectKind {
    Cube,
    Cylinder,
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    frames: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum)]
    object: Option<ObjectKind>,
    /// Canonical mesh (OBJ) to use instead of a primitive.
    #[arg(long, conflicts_with = "object")]
    mesh: Option<PathBuf>,
    /// JSON file with synthesizer settings; flags take precedence.
    #[arg(long)]
    synth_config: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct InitArgs {
    #[arg(long)]
    seq: PathBuf,
    /// Defaults to `<seq>/init.json`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct TrackArgs {
    #[arg(long)]
    seq: PathBuf,
    #[arg(long)]
    init: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    seq: PathBuf,
    #[arg(long)]
    pred: PathBuf,
    #[arg(long)]
    gt: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, Args)]
struct RenderArgs {
    #[arg(long)]
    seq: PathBuf,
    #[arg(long)]
    track: PathBuf,
    #[arg(long)]
    frame: usize,
    #[arg(long)]
    out: PathBuf,
}

struct StderrLogger;

impl log::Log for StderrLogger {
    fn enabled(&self, _: &log::Metadata) -> bool {
        true
    }

    fn log(&self, record: &log::Record) {
        eprintln!("[{}] {}", record.level(), record.args());
    }

    fn flush(&self) {}
}

static LOGGER: StderrLogger = StderrLogger;

/// Parses `argv` (including the program name) and runs the command; returns the exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    if cli.verbose && log::set_logger(&LOGGER).is_ok() {
        log::set_max_level(log::LevelFilter::Info);
    }
    match dispatch(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_DATA
        }
    }
}

fn tracker_config(path: Option<&Path>) -> Result<TrackerConfig> {
    let cfg = match path {
        Some(p) => read_json::<TrackerConfig>(p)?,
        None => TrackerConfig::default(),
    };
    cfg.validate()?;
    Ok(cfg)
}

fn dispatch(cli: &Cli) -> Result<i32> {
    match &cli.command {
        Command::Synth(a) => synth(a),
        Command::Init(a) => {
            let cfg = tracker_config(cli.config.as_deref())?;
            let seq = read_sequence(&a.seq)?;
            let (init, _) = initialize(&seq, &cfg, seq.onset_pose.as_ref(), seq.gt.as_ref())?;
            let out = a.out.clone().unwrap_or_else(|| a.seq.join("init.json"));
            write_init_result(&init, &out)?;
            println!("onset frame {}, hand scale {:.4}, object scale {:.4}", init.iof_index, init.hand_scale, init.object_scale);
            Ok(EXIT_OK)
        }
        Command::Track(a) => {
            let cfg = tracker_config(cli.config.as_deref())?;
            let seq = read_sequence(&a.seq)?;
            let init: InitResult = read_json(&a.init)?;
            init.validate(seq.frame_count()).map_err(|e| Error::schema(&a.init, e.to_string()))?;
            let onset = resolve_onset_pose(seq.onset_pose.as_ref(), seq.gt.as_ref(), init.iof_index, &cfg)?;
            let result = track_bidirectional(&seq, &cfg, &init.track_inputs(onset))?;
            write_track_result(&result, &a.out)?;
            match &result.failure {
                Some(reason) => {
                    eprintln!("tracking failure: {reason}");
                    Ok(EXIT_TRACKING_FAILED)
                }
                None => {
                    println!("tracked {} frames", result.frames.len());
                    Ok(EXIT_OK)
                }
            }
        }
        Command::Eval(a) => {
            let seq = read_sequence(&a.seq)?;
            let gt = read_json(&a.gt)?;
            let pred = read_track_result(&a.pred)?;
            let report = evaluate(&seq, &gt, &pred, a.seed)?;
            write_eval_report(&report, &a.out)?;
            println!(
                "rot {:.3} deg, trans {:.3} mm, MPJPE {:.3} mm, CD {:.4} cm2, F@5 {:.1}%, F@10 {:.1}%",
                report.rot_err_deg, report.trans_err_mm, report.mpjpe_mm, report.cd_cm2, report.f5_pct, report.f10_pct
            );
            Ok(EXIT_OK)
        }
        Command::RenderDebug(a) => {
            render_debug(a)?;
            Ok(EXIT_OK)
        }
    }
}

fn synth(a: &SynthArgs) -> Result<i32> {
    let mut cfg = match &a.synth_config {
        Some(p) => read_json::<SynthConfig>(p)?,
        None => SynthConfig::default(),
    };
    if let Some(n) = a.frames {
        cfg.frames = n;
        cfg.onset_frame = cfg.onset_frame.min(n.saturating_sub(1));
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    match (a.object, &a.mesh) {
        (Some(ObjectKind::Cube), _) => cfg.object = ObjectSpec::Cube,
        (Some(ObjectKind::Cylinder), _) => cfg.object = ObjectSpec::Cylinder,
        (None, Some(p)) => cfg.object = ObjectSpec::Mesh { path: p.clone() },
        (None, None) => {}
    }
    let seq = write_synthetic(&cfg, &a.out)?;
    println!("wrote {} frames to {}", seq.frames.len(), a.out.display());
    Ok(EXIT_OK)
}

/// Gray levels: background 0, hand 64, object 128, tracked silhouette outline 255.
fn render_debug(a: &RenderArgs) -> Result<()> {
    let seq = read_sequence(&a.seq)?;
    let track = read_track_result(&a.track)?;
    let est = track
        .frames
        .iter()
        .find(|f| f.index == a.frame)
        .ok_or_else(|| Error::InvalidConfig(format!("frame {} was not tracked", a.frame)))?;
    let frame = seq.frame(a.frame)?;
    let k = seq.meta().intrinsics;
    let scale: AnisoScale = est.object_scale;
    let (sil, _) = rasterize_hard(seq.canonical_mesh(), &est.object_pose, &scale, &k);
    let (w, h) = (k.width, k.height);
    let mut px = vec![0u8; w * h];
    for v in 0..h {
        for u in 0..w {
            let i = v * w + u;
            if frame.mask_hand.get(u, v) {
                px[i] = 64;
            } else if frame.mask_obj.get(u, v) {
                px[i] = 128;
            }
            if sil.get(u, v) {
                let edge = [(-1i64, 0i64), (1, 0), (0, -1), (0, 1)].iter().any(|(du, dv)| {
                    let (x, y) = (u as i64 + du, v as i64 + dv);
                    x < 0 || y < 0 || x >= w as i64 || y >= h as i64 || !sil.get(x as usize, y as usize)
                });
                if edge {
                    px[i] = 255;
                }
            }
        }
    }
    write_pgm(&a.out, w, h, &px)
}
