//! `gridvid` — command-line front end for grid-image video generation.
//!
//! Every failure is classified by the subsystem that raised it and mapped
//! to a stable exit code, with one machine-readable line on stderr of the
//! form `error: class=<class> <message>`:
//!
//! | code | class    | raised by                                        |
//! |------|----------|--------------------------------------------------|
//! | 2    | usage    | argument parsing (clap)                          |
//! | 3    | config   | run-config files                                 |
//! | 4    | data     | corpus files, GVF clips, dataset indexes         |
//! | 5    | model    | checkpoints and model construction/training      |
//! | 6    | pipeline | generation orchestration                         |
//! | 7    | metrics  | evaluation math                                  |
//! | 8    | domain   | schedule/grid/latent/diffusion invariants        |
//! | 1    | runtime  | anything else (I/O, malformed CSV, ...)          |

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{ensure, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use gridvid_core::corpus::{self, CorpusError, Video, CHANNELS};
use gridvid_core::diffusion::DiffusionError;
use gridvid_core::grid::{GridError, GridImage};
use gridvid_core::io::checkpoint::CheckpointError;
use gridvid_core::io::config::{ConfigError, RunConfig};
use gridvid_core::io::gvf::{self, GvfError};
use gridvid_core::latent::LatentError;
use gridvid_core::metrics::{
    self, Classifier, FeatureExtractor, GrammarClassifier, MetricsError, SignatureExtractor,
};
use gridvid_core::models::{self, ModelError, ModelRole};
use gridvid_core::pipeline::{
    generate_video, interpolate_from_key_grid, memory_probe, GridGenerators, GvfStreamSink,
    ModelGenerators, PipelineError, VideoManifest,
};
use gridvid_core::schedule::{self, ScheduleError, ScheduleParams};

#[derive(Parser)]
#[command(
    name = "gridvid",
    version,
    about = "Text-to-video over 2x2 frame grids: corpus, training, generation, metrics"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthetic moving-shape corpus tools.
    #[command(subcommand)]
    Corpus(CorpusCommand),
    /// Train one model role on a corpus and write a checkpoint.
    Train(TrainArgs),
    /// Generate a video from text and stream it to a GVF file.
    Generate(GenerateArgs),
    /// Densify a caller-supplied key grid into one full segment.
    InterpOnly(InterpOnlyArgs),
    /// Print the generation plan for a frame count as JSON.
    Plan(PlanArgs),
    /// Compute a metric over clip directories and write a CSV row.
    Evaluate(EvaluateArgs),
    /// Measure peak resident memory across video lengths.
    Memprobe(MemprobeArgs),
    /// Render a CSV produced by `evaluate` or `memprobe` as an SVG chart.
    Plot(PlotArgs),
}

#[derive(Subcommand)]
enum CorpusCommand {
    /// Render random scenes into GVF clips plus an index.json.
    Build(CorpusBuildArgs),
}

#[derive(Args)]
struct CorpusBuildArgs {
    /// Number of scenes to render.
    #[arg(long)]
    scenes: u64,
    /// Frames per clip.
    #[arg(long)]
    frames: u64,
    /// Corpus seed; a seed fixes every scene draw.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory (created if missing).
    #[arg(long)]
    out: PathBuf,
    /// Frame edge length in pixels.
    #[arg(long, default_value_t = 30)]
    frame_size: u32,
}

#[derive(Args)]
struct TrainArgs {
    /// Which model to train.
    #[arg(long, value_enum)]
    role: RoleArg,
    /// Corpus directory (must contain index.json).
    #[arg(long)]
    data: PathBuf,
    /// Run-config file (`key = value` lines).
    #[arg(long)]
    config: PathBuf,
    /// Checkpoint file to write.
    #[arg(long)]
    out: PathBuf,
    /// Overrides the config's training seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Clone, Copy, ValueEnum)]
enum RoleArg {
    Key,
    Interp1,
    Interp2,
    Nextkey,
}

impl RoleArg {
    fn role(self) -> ModelRole {
        match self {
            RoleArg::Key => ModelRole::KeyGrid,
            RoleArg::Interp1 => ModelRole::Interp1,
            RoleArg::Interp2 => ModelRole::Interp2,
            RoleArg::Nextkey => ModelRole::NextKeyGrid,
        }
    }
}

#[derive(Args)]
struct GenerateArgs {
    /// Scene description, e.g. "a red square moving right at speed 1 on a
    /// black background from (5, 15)".
    #[arg(long)]
    prompt: String,
    /// Frames to produce.
    #[arg(long)]
    frames: u64,
    /// Directory holding `<role>.gvck` checkpoints.
    #[arg(long)]
    ckpt_dir: PathBuf,
    /// Sampling seed; reruns with the same seed are byte-identical.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output GVF file.
    #[arg(long)]
    out: PathBuf,
    /// Also write the run manifest (plan digest, per-call timings, memory).
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Run-config file; only sampler knobs (steps, guidance) are read.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct InterpOnlyArgs {
    /// GVF file whose frames are the key frames of one segment, in order.
    #[arg(long)]
    keygrid: PathBuf,
    /// Scene description the interpolators are conditioned on.
    #[arg(long)]
    prompt: String,
    /// Directory holding `<role>.gvck` checkpoints.
    #[arg(long)]
    ckpt_dir: PathBuf,
    /// Output GVF file (one segment long).
    #[arg(long)]
    out: PathBuf,
    /// Sampling seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Also write the run manifest.
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Run-config file; only sampler knobs (steps, guidance) are read.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct PlanArgs {
    /// Frames the plan must cover.
    #[arg(long)]
    frames: u64,
    /// Schedule parameters as FRAMES_PER_GRID,KEY_STRIDE (default 4,9).
    #[arg(long, value_parser = parse_schedule_params)]
    params: Option<ScheduleParams>,
}

#[derive(Clone, Copy, ValueEnum)]
enum MetricArg {
    Clipsim,
    Fvd,
    Bfvd,
    Is,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Which metric to compute.
    #[arg(long, value_enum)]
    metric: MetricArg,
    /// First clip directory (index.json if present, else *.gvf sorted).
    #[arg(long)]
    a: PathBuf,
    /// Second clip directory; required for fvd and bfvd.
    #[arg(
        long,
        required_if_eq_any([("metric", "fvd"), ("metric", "bfvd")])
    )]
    b: Option<PathBuf>,
    /// CSV file to write.
    #[arg(long)]
    out: PathBuf,
    /// Clip length for bfvd.
    #[arg(long, default_value_t = 16)]
    block_len: u64,
}

#[derive(Args)]
struct MemprobeArgs {
    /// Video lengths to probe, comma separated.
    #[arg(long, value_delimiter = ',', default_value = "28,112,448")]
    frames: Vec<u64>,
    /// CSV file to write.
    #[arg(long)]
    out: PathBuf,
    /// Run-config file; only layout and schedule keys are read.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct PlotArgs {
    /// Input CSV (an `evaluate` or `memprobe` output).
    #[arg(long = "in")]
    input: PathBuf,
    /// Output SVG file.
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let (code, class) = classify(&err);
            eprintln!("error: class={class} {err:#}");
            ExitCode::from(code)
        }
    }
}

/// Maps the deepest recognized cause to an exit code and class word.
/// Scanning the whole chain means a context-wrapped domain error still
/// reports as the subsystem that actually failed.
fn classify(err: &anyhow::Error) -> (u8, &'static str) {
    let mut out = (1, "runtime");
    for cause in err.chain() {
        let hit = if cause.is::<ConfigError>() {
            Some((3, "config"))
        } else if cause.is::<GvfError>() || cause.is::<CorpusError>() {
            Some((4, "data"))
        } else if cause.is::<CheckpointError>() || cause.is::<ModelError>() {
            Some((5, "model"))
        } else if cause.is::<PipelineError>() {
            Some((6, "pipeline"))
        } else if cause.is::<MetricsError>() {
            Some((7, "metrics"))
        } else if cause.is::<ScheduleError>()
            || cause.is::<GridError>()
            || cause.is::<LatentError>()
            || cause.is::<DiffusionError>()
        {
            Some((8, "domain"))
        } else {
            None
        };
        if let Some(hit) = hit {
            out = hit;
        }
    }
    out
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Corpus(CorpusCommand::Build(args)) => corpus_build(args),
        Command::Train(args) => train(args),
        Command::Generate(args) => generate(args),
        Command::InterpOnly(args) => interp_only(args),
        Command::Plan(args) => plan(args),
        Command::Evaluate(args) => evaluate(args),
        Command::Memprobe(args) => memprobe(args),
        Command::Plot(args) => plot(args),
    }
}

fn corpus_build(args: CorpusBuildArgs) -> Result<()> {
    let index = corpus::build_dataset(
        &args.out,
        args.scenes,
        args.frames,
        args.frame_size,
        args.seed,
    )?;
    println!(
        "built {} clips ({} frames each, {} px) in {}",
        index.n_scenes,
        index.frames_per_video,
        index.frame_size,
        args.out.display()
    );
    Ok(())
}

fn load_config(path: &Path) -> Result<RunConfig> {
    let text = fs::read_to_string(path)
        .with_context(|| format!("cannot read config {}", path.display()))?;
    Ok(RunConfig::parse(&text)?)
}

fn sampler_knobs(config: &Option<PathBuf>) -> Result<(u32, u32, f64)> {
    let cfg = match config {
        Some(path) => load_config(path)?,
        None => RunConfig::default(),
    };
    Ok((cfg.steps_key, cfg.steps_interp, cfg.guidance_scale))
}

fn train(args: TrainArgs) -> Result<()> {
    let config = load_config(&args.config)?;
    let (index, videos) = corpus::load_dataset(&args.data)?;
    let role = args.role.role();
    let seed = args.seed.unwrap_or(config.seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let model = models::train_role(role, &videos, &config, &mut rng)?;
    ensure_parent(&args.out)?;
    model.save(&args.out)?;
    let final_loss = model.loss_history().last().copied().unwrap_or(f64::NAN);
    println!(
        "trained {} on {} clips: {} steps, final loss {:.6} -> {}",
        role.word(),
        index.entries.len(),
        model.steps_trained(),
        final_loss,
        args.out.display()
    );
    Ok(())
}

fn write_manifest(path: &Path, manifest: &VideoManifest) -> Result<()> {
    ensure_parent(path)?;
    let json = serde_json::to_vec_pretty(manifest)?;
    fs::write(path, json).with_context(|| format!("cannot write {}", path.display()))?;
    Ok(())
}

fn generate(args: GenerateArgs) -> Result<()> {
    let (steps_key, steps_interp, guidance) = sampler_knobs(&args.config)?;
    let mut generators =
        ModelGenerators::from_dir(&args.ckpt_dir, steps_key, steps_interp, guidance)?;
    let params = generators.schedule_params().clone();
    let fs_px = generators.layout().frame_size();
    ensure_parent(&args.out)?;
    let mut sink = GvfStreamSink::create(&args.out, &args.prompt, args.frames, fs_px, fs_px, CHANNELS)
        .with_context(|| format!("cannot create {}", args.out.display()))?;
    let manifest = generate_video(
        &args.prompt,
        args.frames,
        &mut generators,
        &params,
        &mut sink,
        args.seed,
    )?;
    if let Some(path) = &args.manifest {
        write_manifest(path, &manifest)?;
    }
    println!(
        "wrote {} frames to {} (peak {} frames resident, seed {})",
        manifest.n_frames,
        args.out.display(),
        manifest.memory.peak_resident_frames,
        manifest.seed
    );
    Ok(())
}

fn interp_only(args: InterpOnlyArgs) -> Result<()> {
    let (_, steps_interp, guidance) = sampler_knobs(&args.config)?;
    let key_video = gvf::read_gvf(&args.keygrid)?;
    let mut generators = ModelGenerators::from_dir(&args.ckpt_dir, 0, steps_interp, guidance)?;
    let layout = generators.layout();
    let key_grid = GridImage::pack(layout, key_video.frames())?;
    let n_frames = generators.schedule_params().segment_length();
    let fs_px = layout.frame_size();
    ensure_parent(&args.out)?;
    let mut sink = GvfStreamSink::create(&args.out, &args.prompt, n_frames, fs_px, fs_px, CHANNELS)
        .with_context(|| format!("cannot create {}", args.out.display()))?;
    let manifest = interpolate_from_key_grid(
        &key_grid,
        &args.prompt,
        &mut generators,
        &mut sink,
        args.seed,
    )?;
    if let Some(path) = &args.manifest {
        write_manifest(path, &manifest)?;
    }
    println!(
        "interpolated {} key frames into {} frames at {}",
        layout.cells(),
        manifest.n_frames,
        args.out.display()
    );
    Ok(())
}

fn parse_schedule_params(raw: &str) -> Result<ScheduleParams, String> {
    let (f, k) = raw
        .split_once(',')
        .ok_or_else(|| "expected FRAMES_PER_GRID,KEY_STRIDE (e.g. 4,9)".to_owned())?;
    let frames_per_grid: u32 = f
        .trim()
        .parse()
        .map_err(|e| format!("frames_per_grid: {e}"))?;
    let key_stride: u64 = k.trim().parse().map_err(|e| format!("key_stride: {e}"))?;
    ScheduleParams::new(frames_per_grid, key_stride).map_err(|e| e.to_string())
}

fn plan(args: PlanArgs) -> Result<()> {
    let params = args.params.unwrap_or_else(ScheduleParams::default_2x2);
    let plan = schedule::full_plan(args.frames, &params)?;
    println!("{}", serde_json::to_string_pretty(&plan)?);
    Ok(())
}

/// Loads clips from a directory: via index.json when present, otherwise
/// every `*.gvf` file in name order.
fn load_videos(dir: &Path) -> Result<Vec<Video>> {
    if dir.join("index.json").exists() {
        let (_, videos) = corpus::load_dataset(dir)?;
        return Ok(videos);
    }
    let entries = fs::read_dir(dir)
        .with_context(|| format!("cannot read clip directory {}", dir.display()))?;
    let mut paths: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|ext| ext == "gvf"))
        .collect();
    paths.sort();
    ensure!(!paths.is_empty(), "no .gvf clips in {}", dir.display());
    paths
        .iter()
        .map(|p| gvf::read_gvf(p).map_err(anyhow::Error::from))
        .collect()
}

fn evaluate(args: EvaluateArgs) -> Result<()> {
    let set_a = load_videos(&args.a)?;
    let set_b = match &args.b {
        Some(dir) => Some(load_videos(dir)?),
        None => None,
    };
    let extractor = SignatureExtractor;
    let classifier = GrammarClassifier;
    let (name, value, n_b, feature_id) = match args.metric {
        MetricArg::Clipsim => {
            ensure!(!set_a.is_empty(), "no clips to score");
            let mut total = 0.0;
            for video in &set_a {
                total += metrics::clipsim_proxy(video, video.prompt())?;
            }
            ("clipsim", total / set_a.len() as f64, 0, extractor.id())
        }
        MetricArg::Fvd => {
            let b = set_b.as_ref().expect("clap enforces --b for fvd");
            ("fvd", metrics::fvd(&set_a, b, &extractor)?, b.len(), extractor.id())
        }
        MetricArg::Bfvd => {
            let b = set_b.as_ref().expect("clap enforces --b for bfvd");
            (
                "bfvd",
                metrics::block_fvd(&set_a, b, args.block_len, &extractor)?,
                b.len(),
                extractor.id(),
            )
        }
        MetricArg::Is => (
            "is",
            metrics::inception_score(&set_a, &classifier)?,
            0,
            classifier.id(),
        ),
    };
    ensure_parent(&args.out)?;
    let mut writer = csv::Writer::from_path(&args.out)
        .with_context(|| format!("cannot write {}", args.out.display()))?;
    writer.write_record(["metric", "value", "n_a", "n_b", "extractor"])?;
    writer.write_record([
        name,
        &value.to_string(),
        &set_a.len().to_string(),
        &n_b.to_string(),
        feature_id,
    ])?;
    writer.flush()?;
    println!("{name} = {value} (n_a={}, n_b={n_b})", set_a.len());
    Ok(())
}

fn memprobe(args: MemprobeArgs) -> Result<()> {
    let config = match &args.config {
        Some(path) => load_config(path)?,
        None => RunConfig::default(),
    };
    let reports = memory_probe(&config, &args.frames)?;
    ensure_parent(&args.out)?;
    let mut writer = csv::Writer::from_path(&args.out)
        .with_context(|| format!("cannot write {}", args.out.display()))?;
    writer.write_record(["n_frames", "peak_frames", "peak_bytes"])?;
    for report in &reports {
        writer.write_record([
            report.requested_frames.to_string(),
            report.peak_resident_frames.to_string(),
            report.peak_resident_bytes.to_string(),
        ])?;
        println!(
            "{} frames: peak {} frames resident ({} bytes)",
            report.requested_frames, report.peak_resident_frames, report.peak_resident_bytes
        );
    }
    writer.flush()?;
    Ok(())
}

fn plot(args: PlotArgs) -> Result<()> {
    let mut reader = csv::Reader::from_path(&args.input)
        .with_context(|| format!("cannot read {}", args.input.display()))?;
    let headers: Vec<String> = reader.headers()?.iter().map(str::to_owned).collect();
    ensure!(headers.len() >= 2, "CSV needs at least two columns to plot");
    let mut rows: Vec<Vec<String>> = Vec::new();
    for record in reader.records() {
        let record = record?;
        ensure!(
            record.len() >= 2,
            "CSV row {} has fewer than two fields",
            rows.len() + 2
        );
        rows.push(record.iter().map(str::to_owned).collect());
    }
    ensure!(!rows.is_empty(), "CSV has no data rows");

    let numeric_x = rows.iter().all(|r| r[0].parse::<f64>().is_ok());
    let svg = if numeric_x {
        let points: Vec<(f64, f64)> = rows
            .iter()
            .map(|r| -> Result<(f64, f64)> {
                Ok((
                    r[0].parse::<f64>()?,
                    r[1].parse::<f64>()
                        .with_context(|| format!("column {:?} is not numeric", headers[1]))?,
                ))
            })
            .collect::<Result<_>>()?;
        line_chart(&headers[0], &headers[1], &points)
    } else {
        let bars: Vec<(String, f64)> = rows
            .iter()
            .map(|r| -> Result<(String, f64)> {
                Ok((
                    r[0].clone(),
                    r[1].parse::<f64>()
                        .with_context(|| format!("column {:?} is not numeric", headers[1]))?,
                ))
            })
            .collect::<Result<_>>()?;
        bar_chart(&headers[1], &bars)
    };
    ensure_parent(&args.out)?;
    fs::write(&args.out, svg).with_context(|| format!("cannot write {}", args.out.display()))?;
    println!("plotted {} rows to {}", rows.len(), args.out.display());
    Ok(())
}

const SVG_W: f64 = 640.0;
const SVG_H: f64 = 400.0;
const MARGIN_L: f64 = 70.0;
const MARGIN_R: f64 = 24.0;
const MARGIN_T: f64 = 40.0;
const MARGIN_B: f64 = 52.0;

fn svg_open(title: &str) -> String {
    format!(
        concat!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" ",
            "viewBox=\"0 0 {w} {h}\" font-family=\"sans-serif\" font-size=\"12\">\n",
            "<rect width=\"{w}\" height=\"{h}\" fill=\"#ffffff\"/>\n",
            "<text x=\"{cx}\" y=\"22\" text-anchor=\"middle\" font-size=\"15\">{t}</text>\n"
        ),
        w = SVG_W,
        h = SVG_H,
        cx = SVG_W / 2.0,
        t = xml_escape(title),
    )
}

fn axes(x_label: &str, y_max: f64) -> String {
    let plot_h = SVG_H - MARGIN_T - MARGIN_B;
    let mut out = String::new();
    // Left and bottom axis lines.
    out.push_str(&format!(
        "<line x1=\"{l}\" y1=\"{t}\" x2=\"{l}\" y2=\"{b}\" stroke=\"#333\"/>\n\
         <line x1=\"{l}\" y1=\"{b}\" x2=\"{r}\" y2=\"{b}\" stroke=\"#333\"/>\n",
        l = MARGIN_L,
        t = MARGIN_T,
        b = SVG_H - MARGIN_B,
        r = SVG_W - MARGIN_R,
    ));
    // Four y ticks from 0 to y_max.
    for i in 0..=4 {
        let v = y_max * i as f64 / 4.0;
        let y = SVG_H - MARGIN_B - plot_h * i as f64 / 4.0;
        out.push_str(&format!(
            "<line x1=\"{l0}\" y1=\"{y}\" x2=\"{l}\" y2=\"{y}\" stroke=\"#333\"/>\n\
             <text x=\"{lt}\" y=\"{yt}\" text-anchor=\"end\">{v}</text>\n",
            l0 = MARGIN_L - 5.0,
            l = MARGIN_L,
            y = y,
            lt = MARGIN_L - 9.0,
            yt = y + 4.0,
            v = format_num(v),
        ));
    }
    out.push_str(&format!(
        "<text x=\"{cx}\" y=\"{y}\" text-anchor=\"middle\">{t}</text>\n",
        cx = (MARGIN_L + SVG_W - MARGIN_R) / 2.0,
        y = SVG_H - 10.0,
        t = xml_escape(x_label),
    ));
    out
}

fn line_chart(x_label: &str, y_label: &str, points: &[(f64, f64)]) -> String {
    let plot_w = SVG_W - MARGIN_L - MARGIN_R;
    let plot_h = SVG_H - MARGIN_T - MARGIN_B;
    let (mut x_min, mut x_max) = points
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| {
            (lo.min(p.0), hi.max(p.0))
        });
    if x_min == x_max {
        x_min -= 1.0;
        x_max += 1.0;
    }
    let y_top = points.iter().fold(0.0_f64, |hi, p| hi.max(p.1));
    let y_max = if y_top > 0.0 { y_top * 1.08 } else { 1.0 };
    let px = |x: f64| MARGIN_L + (x - x_min) / (x_max - x_min) * plot_w;
    let py = |y: f64| SVG_H - MARGIN_B - y / y_max * plot_h;

    let mut out = svg_open(&format!("{y_label} by {x_label}"));
    out.push_str(&axes(x_label, y_max));
    let coords: Vec<String> = points
        .iter()
        .map(|&(x, y)| format!("{:.1},{:.1}", px(x), py(y)))
        .collect();
    out.push_str(&format!(
        "<polyline points=\"{}\" fill=\"none\" stroke=\"#2266aa\" stroke-width=\"2\"/>\n",
        coords.join(" ")
    ));
    for &(x, y) in points {
        out.push_str(&format!(
            "<circle cx=\"{:.1}\" cy=\"{:.1}\" r=\"3.5\" fill=\"#2266aa\"/>\n\
             <text x=\"{:.1}\" y=\"{}\" text-anchor=\"middle\">{}</text>\n",
            px(x),
            py(y),
            px(x),
            SVG_H - MARGIN_B + 16.0,
            format_num(x),
        ));
    }
    out.push_str("</svg>\n");
    out
}

fn bar_chart(y_label: &str, bars: &[(String, f64)]) -> String {
    let plot_w = SVG_W - MARGIN_L - MARGIN_R;
    let plot_h = SVG_H - MARGIN_T - MARGIN_B;
    let y_top = bars.iter().fold(0.0_f64, |hi, b| hi.max(b.1));
    let y_max = if y_top > 0.0 { y_top * 1.08 } else { 1.0 };
    let band = plot_w / bars.len() as f64;
    let py = |y: f64| SVG_H - MARGIN_B - y.max(0.0) / y_max * plot_h;

    let mut out = svg_open(y_label);
    out.push_str(&axes("", y_max));
    for (i, (label, value)) in bars.iter().enumerate() {
        let x0 = MARGIN_L + band * (i as f64 + 0.2);
        let y0 = py(*value);
        out.push_str(&format!(
            "<rect x=\"{x0:.1}\" y=\"{y0:.1}\" width=\"{w:.1}\" height=\"{h:.1}\" fill=\"#2266aa\"/>\n\
             <text x=\"{cx:.1}\" y=\"{ly}\" text-anchor=\"middle\">{l}</text>\n\
             <text x=\"{cx:.1}\" y=\"{vy:.1}\" text-anchor=\"middle\">{v}</text>\n",
            x0 = x0,
            y0 = y0,
            w = band * 0.6,
            h = SVG_H - MARGIN_B - y0,
            cx = x0 + band * 0.3,
            ly = SVG_H - MARGIN_B + 16.0,
            l = xml_escape(label),
            vy = y0 - 6.0,
            v = format_num(*value),
        ));
    }
    out.push_str("</svg>\n");
    out
}

fn format_num(v: f64) -> String {
    if v == 0.0 {
        return "0".to_owned();
    }
    let magnitude = v.abs();
    if !(0.001..10_000_000.0).contains(&magnitude) {
        return format!("{v:.2e}");
    }
    let text = format!("{v:.4}");
    text.trim_end_matches('0').trim_end_matches('.').to_owned()
}

fn xml_escape(raw: &str) -> String {
    raw.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)
                .with_context(|| format!("cannot create {}", parent.display()))?;
        }
    }
    Ok(())
}
