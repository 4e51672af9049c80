//! `vsyn`: synopsis building, video forensics and tracking evaluation.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use vsyn::eval::{evaluate, AnnotationSet};
use vsyn::forensics::{
    busyness_test, busyness_train, camera_monitor, forgery_scan, trespass_monitor, write_events, AlarmEvent,
    BusynessMatrix, Polygon,
};
use vsyn::synopsis::{run_synopsis, Execution};
use vsyn::synthgen::{generate, SceneScript};
use vsyn::video_io::{open_sequence, FrameSource, SequenceWriter};
use vsyn::{Config, RunSummary};

const EXIT_ALARMS: u8 = 3;

#[derive(Parser, Debug)]
#[command(name = "vsyn", version, about = "Video synopsis and surveillance forensics")]
struct Cli {
    /// JSON config file; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Suppress progress and the run summary on stderr.
    #[arg(long, short, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Condense a fixed-camera sequence into a short synopsis.
    Synopsize(SynopsizeArgs),
    /// Scan a sequence for deleted, frozen or replayed frames.
    Forgery(AlarmArgs),
    /// Watch for occlusion or covering of the camera.
    CameraMonitor(CameraArgs),
    /// Learn or test normal motion per image block.
    #[command(subcommand)]
    Anomaly(AnomalyCommand),
    /// Alarm on foreground inside user-defined zones.
    Trespass(TrespassArgs),
    /// Score tracks against ground-truth annotations.
    Eval(EvalArgs),
    /// Render a synthetic scene script to a frame directory.
    #[command(hide = true)]
    Synthgen(SynthgenArgs),
}

#[derive(Args, Debug)]
struct InputArgs {
    /// Frame directory or concatenated PNM file.
    input: PathBuf,
    /// Override the stream frame rate.
    #[arg(long)]
    fps: Option<f64>,
    /// Also write the run summary as JSON here.
    #[arg(long)]
    summary: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SynopsizeArgs {
    #[command(flatten)]
    input: InputArgs,
    /// Output directory for synopsis frames, manifest.json and summary.json.
    #[arg(long)]
    out: PathBuf,
    /// Tubes scheduled together in each synopsis frame.
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    cluster_size: Option<u64>,
    /// Smallest region kept, as a fraction of the frame area.
    #[arg(long)]
    min_area_frac: Option<f64>,
    /// Background model history in frames.
    #[arg(long)]
    bg_history: Option<usize>,
    /// Squared Mahalanobis distance accepted as background.
    #[arg(long)]
    bg_var_threshold: Option<f64>,
    /// Luminance ratio at or above which a darker pixel is a shadow.
    #[arg(long)]
    bg_shadow_threshold: Option<f64>,
    /// Original frames between stored background snapshots.
    #[arg(long)]
    snapshot_interval: Option<u64>,
    /// Write the object tracks as an annotation file.
    #[arg(long)]
    tracks_out: Option<PathBuf>,
    /// Run every stage on one thread.
    #[arg(long)]
    sequential: bool,
}

#[derive(Args, Debug)]
struct AlarmOut {
    /// Alarm file, one JSON event per line.
    #[arg(long)]
    out: PathBuf,
    /// Exit with status 3 when any alarm is raised.
    #[arg(long)]
    fail_on_alarm: bool,
}

#[derive(Args, Debug)]
struct AlarmArgs {
    #[command(flatten)]
    input: InputArgs,
    #[command(flatten)]
    alarms: AlarmOut,
    /// Robust z-score above which a transition is an outlier.
    #[arg(long)]
    k: Option<f64>,
    /// Sliding window for the median and MAD.
    #[arg(long)]
    window: Option<usize>,
}

#[derive(Args, Debug)]
struct CameraArgs {
    #[command(flatten)]
    input: InputArgs,
    #[command(flatten)]
    alarms: AlarmOut,
    /// Foreground share of the frame that counts as covered.
    #[arg(long)]
    tau: Option<f64>,
    /// Consecutive covered frames before an alarm.
    #[arg(long)]
    persistence: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum AnomalyCommand {
    /// Learn the busyness matrix from normal footage.
    Train(AnomalyTrainArgs),
    /// Report blocks whose motion exceeds the learned matrix.
    Test(AnomalyTestArgs),
}

#[derive(Args, Debug)]
struct AnomalyTrainArgs {
    #[command(flatten)]
    input: InputArgs,
    /// Matrix output file.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct AnomalyTestArgs {
    #[command(flatten)]
    input: InputArgs,
    #[command(flatten)]
    alarms: AlarmOut,
    /// Matrix written by `anomaly train`.
    #[arg(long)]
    matrix: PathBuf,
    /// Relative excess over the learned maximum that counts as anomalous.
    #[arg(long)]
    margin: Option<f64>,
}

#[derive(Args, Debug)]
struct TrespassArgs {
    #[command(flatten)]
    input: InputArgs,
    #[command(flatten)]
    alarms: AlarmOut,
    /// JSON list of `{id, points: [[x, y], ...]}` zones.
    #[arg(long)]
    zones: PathBuf,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// Tracks as written by `synopsize --tracks-out`.
    #[arg(long)]
    detections: PathBuf,
    /// Ground-truth annotation file.
    #[arg(long)]
    annotations: PathBuf,
    /// Report JSON output.
    #[arg(long)]
    out: PathBuf,
    /// Precision/recall curve CSV output.
    #[arg(long)]
    curve: Option<PathBuf>,
    /// Minimum IoU for a detection to match a box.
    #[arg(long)]
    iou: Option<f64>,
}

#[derive(Args, Debug)]
struct SynthgenArgs {
    /// Scene script JSON.
    script: PathBuf,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: &Cli) -> Result<u8> {
    let mut config = match &cli.config {
        Some(path) => Config::load(path).with_context(|| format!("loading config {}", path.display()))?,
        None => Config::default(),
    };
    let report = |s: &RunSummary, path: Option<&PathBuf>| -> Result<()> {
        if let Some(path) = path {
            write_text(path, &s.to_json()?)?;
        }
        if !cli.quiet {
            eprintln!("{s}");
        }
        Ok(())
    };
    match &cli.command {
        Command::Synopsize(a) => synopsize(a, &mut config, cli.quiet, report),
        Command::Forgery(a) => {
            if let Some(k) = a.k {
                config.forgery.k = k;
            }
            if let Some(w) = a.window {
                config.forgery.window = w;
            }
            config.validate()?;
            let (source, clock) = open(&a.input)?;
            let (_, events) = forgery_scan(source, &config.flow, &config.forgery)?;
            finish_alarms("forgery", &a.input, clock, events, &a.alarms, report)
        }
        Command::CameraMonitor(a) => {
            if let Some(tau) = a.tau {
                config.tamper.tau = tau;
            }
            if let Some(p) = a.persistence {
                config.tamper.persistence = p;
            }
            config.validate()?;
            let (source, clock) = open(&a.input)?;
            let events = camera_monitor(source, &config.bg, &config.regions, &config.tamper)?;
            finish_alarms("camera-monitor", &a.input, clock, events, &a.alarms, report)
        }
        Command::Anomaly(AnomalyCommand::Train(a)) => {
            config.validate()?;
            let (source, (frames, start)) = open(&a.input)?;
            let matrix = busyness_train(source, &config.flow, &config.busyness)?;
            write_text(&a.out, &matrix.to_json()?)?;
            let mut s = RunSummary::new("anomaly train", &a.input.input, frames, start.elapsed().as_secs_f64());
            s.outputs.push(a.out.clone());
            report(&s, a.input.summary.as_ref())?;
            Ok(0)
        }
        Command::Anomaly(AnomalyCommand::Test(a)) => {
            if let Some(m) = a.margin {
                config.busyness.margin = m;
            }
            config.validate()?;
            let text = fs::read_to_string(&a.matrix).with_context(|| format!("reading {}", a.matrix.display()))?;
            let matrix = BusynessMatrix::from_json(&text)?;
            let (source, clock) = open(&a.input)?;
            let events = busyness_test(source, &matrix, &config.flow, &config.busyness)?;
            finish_alarms("anomaly test", &a.input, clock, events, &a.alarms, report)
        }
        Command::Trespass(a) => {
            config.validate()?;
            let text = fs::read_to_string(&a.zones).with_context(|| format!("reading {}", a.zones.display()))?;
            let zones = Polygon::list_from_json(&text)?;
            let (source, clock) = open(&a.input)?;
            let events = trespass_monitor(source, &zones, &config.bg, &config.regions, &config.trespass)?;
            finish_alarms("trespass", &a.input, clock, events, &a.alarms, report)
        }
        Command::Eval(a) => {
            if let Some(iou) = a.iou {
                config.eval.iou_threshold = iou;
            }
            config.validate()?;
            let dets = read_annotations(&a.detections)?;
            let truth = read_annotations(&a.annotations)?;
            let detections = dets.frames.iter().flat_map(|f| f.boxes.iter().map(move |b| (f.frame, b.bbox())));
            let r = evaluate(detections, &truth, config.eval.iou_threshold)?;
            write_text(&a.out, &r.to_json()?)?;
            if let Some(path) = &a.curve {
                let mut w = BufWriter::new(create(path)?);
                r.write_curve_csv(&mut w).and_then(|_| w.flush()).with_context(|| format!("writing {}", path.display()))?;
            }
            if !cli.quiet {
                eprintln!(
                    "eval: precision {:.4}, recall {:.4}, AP {:.4}",
                    r.precision, r.recall, r.average_precision
                );
            }
            Ok(0)
        }
        Command::Synthgen(a) => {
            let text = fs::read_to_string(&a.script).with_context(|| format!("reading {}", a.script.display()))?;
            let scene = generate(&SceneScript::from_json(&text)?)?;
            let meta = scene.write_to(&a.out)?;
            if !cli.quiet {
                eprintln!("synthgen: {} frames written to {}", meta.frame_count, a.out.display());
            }
            Ok(0)
        }
    }
}

fn synopsize(
    a: &SynopsizeArgs,
    config: &mut Config,
    quiet: bool,
    report: impl Fn(&RunSummary, Option<&PathBuf>) -> Result<()>,
) -> Result<u8> {
    if let Some(cs) = a.cluster_size {
        config.synopsis.cluster_size = cs as usize;
    }
    if let Some(i) = a.snapshot_interval {
        config.synopsis.bg_snapshot_interval = i;
    }
    if let Some(f) = a.min_area_frac {
        config.regions.min_area_frac = f;
    }
    if let Some(h) = a.bg_history {
        config.bg.history = h;
    }
    if let Some(v) = a.bg_var_threshold {
        config.bg.var_threshold = v;
    }
    if let Some(s) = a.bg_shadow_threshold {
        config.bg.shadow_threshold = s;
    }
    config.validate()?;

    let (source, (_, start)) = open(&a.input)?;
    let meta = source.meta().clone();
    let mut writer = SequenceWriter::create(&a.out, meta.fps)?;
    let execution = if a.sequential { Execution::Sequential } else { Execution::Concurrent };
    let mut written = 0u64;
    let run = run_synopsis(source, &meta, &config.synopsis_config(), execution, |frame| {
        writer.push(&frame)?;
        written += 1;
        if !quiet && written.is_multiple_of(500) {
            eprintln!("synopsize: {written} synopsis frames written");
        }
        Ok(())
    })?;
    writer.finish()?;

    let manifest_path = a.out.join("manifest.json");
    write_text(&manifest_path, &run.manifest.to_json()?)?;
    let mut s = RunSummary::new("synopsize", &a.input.input, meta.frame_count, start.elapsed().as_secs_f64());
    s.frame_reduction = Some(run.manifest.summary.fr);
    s.outputs.push(a.out.clone());
    s.outputs.push(manifest_path);
    if let Some(path) = &a.tracks_out {
        let tracks = AnnotationSet::from_boxes(
            run.tubes.iter().flat_map(|t| t.frames.iter().map(|f| (f.original_frame_index, t.object_id, f.bbox))),
        );
        write_text(path, &tracks.to_json()?)?;
        s.outputs.push(path.clone());
    }
    let summary_path = a.out.join("summary.json");
    s.outputs.push(summary_path.clone());
    write_text(&summary_path, &s.to_json()?)?;
    report(&s, a.input.summary.as_ref())?;
    Ok(0)
}

/// Opens the input; also returns its frame count and the run start time.
fn open(input: &InputArgs) -> Result<(FrameSource, (u64, Instant))> {
    let start = Instant::now();
    let source = open_sequence(&input.input, input.fps).with_context(|| format!("opening {}", input.input.display()))?;
    let frames = source.meta().frame_count;
    Ok((source, (frames, start)))
}

fn finish_alarms(
    name: &str,
    input: &InputArgs,
    (frames, start): (u64, Instant),
    events: Vec<AlarmEvent>,
    out: &AlarmOut,
    report: impl Fn(&RunSummary, Option<&PathBuf>) -> Result<()>,
) -> Result<u8> {
    let mut w = BufWriter::new(create(&out.out)?);
    write_events(&mut w, &events)?;
    w.flush().with_context(|| format!("writing {}", out.out.display()))?;
    let mut s = RunSummary::new(name, &input.input, frames, start.elapsed().as_secs_f64());
    s.alarms = Some(events.len());
    s.outputs.push(out.out.clone());
    report(&s, input.summary.as_ref())?;
    Ok(if out.fail_on_alarm && !events.is_empty() { EXIT_ALARMS } else { 0 })
}

fn read_annotations(path: &Path) -> Result<AnnotationSet> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(AnnotationSet::from_json(&text)?)
}

fn create(path: &Path) -> Result<File> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    File::create(path).with_context(|| format!("creating {}", path.display()))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    let mut f = create(path)?;
    f.write_all(text.as_bytes()).with_context(|| format!("writing {}", path.display()))
}
