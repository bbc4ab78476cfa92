//! Command-line entry point.
//!
//! Failures print one line `error[<Category>]: <message>` to stderr and exit
//! with status 1; usage errors exit with status 2.

use std::fs::File;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use usptrack_core::eval::{drift_curve, l2_error, report_rows, sequence_patch_ncc, survival_rate, NccReference};
use usptrack_core::keypoints::{detect, DetectorKind};
use usptrack_core::simulator::{simulate_sequence, speckle_image, MotionModel, SimConfig};
use usptrack_core::trainer::{train_main, warmup, EpochLog, TrainSample};
use usptrack_core::tracker::Tracker;
use usptrack_core::{Error, GrayImage, PointSet, Result};

use crate::bench::{measure_fps, Method};
use crate::checkpoint::{load_pretrained, load_tracker, save_checkpoint};
use crate::config::{snapshot_path_for, RunConfig, SNAPSHOT_FILE};
use crate::dataset::{
    build_training_data, derived_seed, load_labelled_sequence, load_validation, write_simulated, TeacherSource, POINTS_FILE,
};
use crate::formats::{load_points, load_trajectories, save_points, save_trajectories};
use crate::io_error;
use crate::plot::{load_curve, render_svg, save_curve};
use crate::report::{format_table, format_tsv};
use crate::sequence::{list_frames, load_sequence, read_frame, resize_frame};

#[derive(Debug, Parser)]
#[command(name = "usptrack", version, about = "Streaming multi-point tracking for grayscale ultrasound video")]
pub struct Cli {
    /// TOML run configuration; command-line flags override its values
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate synthetic sequences with exact trajectories by warping a base frame
    Simulate(SimulateArgs),
    /// Detect query points on the first frame of a sequence
    Detect(DetectArgs),
    /// Simulation warmup followed by teacher-student training
    Train(TrainArgs),
    /// Track points through a sequence
    Track(TrackArgs),
    /// Score predicted trajectories against labels
    Eval(EvalArgs),
    /// Render drift-curve files to an SVG plot
    Plot(PlotArgs),
    /// Print the resolved configuration as TOML
    PrintConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum MotionArg {
    /// Independent random translation every frame
    PerFrame,
    /// Low-pass filtered random affine motion
    SmoothAffine,
    /// The same translation every frame (--dx, --dy)
    Constant,
    /// No motion
    Zero,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// Base image file or sequence directory (its first frame); synthetic speckle when omitted
    #[arg(long, value_name = "PATH")]
    pub input: Option<PathBuf>,
    /// Output directory
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    /// Number of sequences; more than one writes seq_00000, seq_00001, ... under --out
    #[arg(long, default_value_t = 1)]
    pub count: usize,
    /// Random seed [default: 0]
    #[arg(long)]
    pub seed: Option<u64>,
    /// Frames per sequence [default: 41]
    #[arg(long)]
    pub seq_len: Option<usize>,
    /// Motion model [default: per-frame]
    #[arg(long, value_enum)]
    pub motion: Option<MotionArg>,
    /// Horizontal shift per frame for --motion constant, pixels
    #[arg(long, default_value_t = 0.0, allow_hyphen_values = true)]
    pub dx: f64,
    /// Vertical shift per frame for --motion constant, pixels
    #[arg(long, default_value_t = 0.0, allow_hyphen_values = true)]
    pub dy: f64,
    /// Bound on per-frame displacement, pixels [default: 4]
    #[arg(long)]
    pub max_translation: Option<f64>,
    /// Lower end of the per-frame intensity gain [default: 0.9]
    #[arg(long)]
    pub gain_min: Option<f64>,
    /// Upper end of the per-frame intensity gain [default: 1.1]
    #[arg(long)]
    pub gain_max: Option<f64>,
    /// Std of additive Gaussian noise [default: 0.02]
    #[arg(long)]
    pub noise_std: Option<f64>,
    /// Query points file; detected on the base frame when omitted
    #[arg(long, value_name = "FILE")]
    pub points: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum DetectorArg {
    Sift,
    Grid,
}

#[derive(Debug, Args)]
pub struct DetectArgs {
    /// Sequence directory or image file
    #[arg(long, value_name = "PATH")]
    pub sequence: PathBuf,
    /// Output points file
    #[arg(long, value_name = "FILE")]
    pub out: PathBuf,
    /// Detector [default: sift]
    #[arg(long, value_enum)]
    pub detector: Option<DetectorArg>,
    /// SIFT contrast threshold [default: 0.08]
    #[arg(long)]
    pub contrast_threshold: Option<f64>,
    /// SIFT edge threshold [default: 4]
    #[arg(long)]
    pub edge_threshold: Option<f64>,
    /// Keep at most this many points, strongest first [default: unlimited]
    #[arg(long)]
    pub max_points: Option<usize>,
    /// Cell size of the grid detector, pixels [default: 32]
    #[arg(long)]
    pub grid_stride: Option<usize>,
    /// Drop points closer than this to the border, pixels [default: 0]
    #[arg(long)]
    pub margin: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum TeacherArg {
    /// teacher.traj per sequence, or files listed by --labels-manifest
    Labels,
    /// Exact labels from each sequence's motion.json
    Oracle,
    /// Warmup only
    None,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Training sequences: one sequence directory or a directory of them
    #[arg(long, value_name = "DIR")]
    pub data: PathBuf,
    /// Held-out sequences with trajectories.traj or teacher.traj, used for checkpoint selection
    #[arg(long, value_name = "DIR")]
    pub val: Option<PathBuf>,
    /// Output checkpoint
    #[arg(long, value_name = "FILE")]
    pub out: PathBuf,
    /// Source of teacher labels
    #[arg(long, value_enum, default_value_t = TeacherArg::Labels)]
    pub teacher: TeacherArg,
    /// Manifest of `<sequence id> <label file>` lines
    #[arg(long, value_name = "FILE")]
    pub labels_manifest: Option<PathBuf>,
    /// Simulation warmup epochs [default: 10]
    #[arg(long)]
    pub warmup_epochs: Option<usize>,
    /// Teacher-student epochs [default: 50]
    #[arg(long)]
    pub main_epochs: Option<usize>,
    /// Warmup learning rate [default: 0.0005]
    #[arg(long)]
    pub lr_warmup: Option<f64>,
    /// Teacher-student learning rate [default: 0.0001]
    #[arg(long)]
    pub lr_main: Option<f64>,
    /// Seed for initialisation, shuffling and simulation [default: 0]
    #[arg(long)]
    pub seed: Option<u64>,
    /// Simulated sequences per training sequence [default: 1]
    #[arg(long)]
    pub sim_per_sequence: Option<usize>,
    /// Per-epoch log (tab-separated) [default: <out>.log.tsv]
    #[arg(long, value_name = "FILE")]
    pub log: Option<PathBuf>,
    /// Start from this checkpoint (its tracker configuration is used)
    #[arg(long, value_name = "FILE")]
    pub init: Option<PathBuf>,
    /// Copy encoder weights from this checkpoint before training
    #[arg(long, value_name = "FILE")]
    pub pretrained_encoder: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum MethodArg {
    Pipsus,
    Ncc,
    Zero,
}

#[derive(Debug, Args)]
pub struct TrackArgs {
    /// Sequence directory or image file
    #[arg(long, value_name = "PATH")]
    pub sequence: PathBuf,
    /// Output trajectory file
    #[arg(long, value_name = "FILE")]
    pub out: PathBuf,
    /// Tracking method
    #[arg(long, value_enum, default_value_t = MethodArg::Pipsus)]
    pub method: MethodArg,
    /// Model checkpoint (required for pipsus)
    #[arg(long, value_name = "FILE")]
    pub checkpoint: Option<PathBuf>,
    /// Query points; falls back to the sequence's points.pts, then to detection
    #[arg(long, value_name = "FILE")]
    pub points: Option<PathBuf>,
    /// Also time the method and print frames per second
    #[arg(long)]
    pub fps_report: bool,
    /// NCC template side, odd [default: 17]
    #[arg(long)]
    pub ncc_patch_size: Option<usize>,
    /// NCC search radius, pixels [default: 32]
    #[arg(long)]
    pub ncc_search_radius: Option<usize>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Predicted trajectories
    #[arg(long, value_name = "FILE")]
    pub pred: PathBuf,
    /// Label trajectories
    #[arg(long, value_name = "FILE")]
    pub gt: PathBuf,
    /// Sequence the prediction belongs to; enables the patch-similarity metric
    #[arg(long, value_name = "PATH")]
    pub sequence: Option<PathBuf>,
    /// Dataset name used in report rows
    #[arg(long, default_value = "dataset")]
    pub dataset: String,
    /// Method name used in report rows [default: prediction file stem]
    #[arg(long)]
    pub method: Option<String>,
    /// Survival threshold, pixels [default: 50]
    #[arg(long)]
    pub threshold: Option<f64>,
    /// Write the per-frame drift curve here
    #[arg(long, value_name = "FILE")]
    pub curve_out: Option<PathBuf>,
    /// Write machine-readable report rows (tab-separated) here
    #[arg(long, value_name = "FILE")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PlotArgs {
    /// Drift-curve file; repeat for several methods
    #[arg(long = "curve", value_name = "FILE", required = true)]
    pub curves: Vec<PathBuf>,
    /// Output SVG
    #[arg(long, value_name = "FILE")]
    pub out: PathBuf,
    #[arg(long, default_value = "Per-frame L2 error (mean, 10th-90th percentile)")]
    pub title: String,
}

pub fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {}", e.category(), e);
            ExitCode::from(1)
        }
    }
}

pub fn run(cli: Cli) -> Result<()> {
    let cfg = RunConfig::load(cli.config.as_deref())?;
    match cli.command {
        Command::Simulate(a) => simulate(cfg, a),
        Command::Detect(a) => detect_cmd(cfg, a),
        Command::Train(a) => train(cfg, a),
        Command::Track(a) => track(cfg, a),
        Command::Eval(a) => eval(cfg, a),
        Command::Plot(a) => plot(a),
        Command::PrintConfig => {
            cfg.validate()?;
            print!("{}", cfg.to_toml());
            Ok(())
        }
    }
}

fn log_snapshot(path: &Path) {
    eprintln!("resolved config: {}", path.display());
}

fn first_frame(path: &Path, cfg: &RunConfig) -> Result<GrayImage> {
    if !path.exists() {
        return Err(Error::NotFound(path.display().to_string()));
    }
    let file = if path.is_dir() {
        list_frames(path)?.into_iter().next().ok_or_else(|| Error::Format(format!("{}: no image files", path.display())))?
    } else {
        path.to_path_buf()
    };
    let frame = read_frame(&file)?;
    Ok(match cfg.load_options().resize {
        Some((w, h)) => resize_frame(&frame, w, h),
        None => frame,
    })
}

fn simulate(mut cfg: RunConfig, a: SimulateArgs) -> Result<()> {
    if let Some(s) = a.seed {
        cfg.sim.rng_seed = s;
    }
    if let Some(t) = a.seq_len {
        cfg.sim.seq_len = t;
    }
    if let Some(m) = a.motion {
        cfg.sim.motion_model = match m {
            MotionArg::PerFrame => MotionModel::PerFrameRandomTranslation,
            MotionArg::SmoothAffine => MotionModel::SmoothRandomAffine,
            MotionArg::Constant => MotionModel::ConstantTranslation { dx: a.dx, dy: a.dy },
            MotionArg::Zero => MotionModel::Zero,
        };
    }
    if let Some(v) = a.max_translation {
        cfg.sim.max_translation_per_frame = v;
    }
    if let Some(g) = a.gain_min {
        cfg.sim.intensity_gain_range.0 = g;
    }
    if let Some(g) = a.gain_max {
        cfg.sim.intensity_gain_range.1 = g;
    }
    if let Some(n) = a.noise_std {
        cfg.sim.noise_std = n;
    }
    cfg.validate()?;
    if a.count == 0 {
        return Err(Error::InvalidArgument("--count must be at least 1".into()));
    }
    let given = a.input.as_deref().map(|p| first_frame(p, &cfg)).transpose()?;
    let fixed_points = a.points.as_deref().map(load_points).transpose()?;
    std::fs::create_dir_all(&a.out).map_err(|e| io_error(&a.out, e))?;
    for k in 0..a.count {
        let seed = derived_seed(cfg.sim.rng_seed, 0, k);
        let base = match &given {
            Some(f) => f.clone(),
            None => speckle_image(cfg.tracker.image_width, cfg.tracker.image_height, seed),
        };
        let points = match &fixed_points {
            Some(p) => p.clone(),
            None => detect(&base, &cfg.detector),
        };
        if points.is_empty() {
            return Err(Error::InvalidArgument("no query points: none given and none detected on the base frame".into()));
        }
        let sc = SimConfig { rng_seed: seed, ..cfg.sim.clone() };
        let sim = simulate_sequence(&base, &points, &sc)?;
        let dir = if a.count == 1 { a.out.clone() } else { a.out.join(format!("seq_{k:05}")) };
        let mut seq_cfg = cfg.clone();
        seq_cfg.sim = sc;
        write_simulated(&dir, &sim, &points, &seq_cfg)?;
        eprintln!("{}: {} frames, {} points", dir.display(), sim.video.len(), points.len());
    }
    if a.count > 1 {
        log_snapshot(&cfg.write_snapshot(&a.out.join(SNAPSHOT_FILE))?);
    } else {
        log_snapshot(&a.out.join(SNAPSHOT_FILE));
    }
    Ok(())
}

fn detect_cmd(mut cfg: RunConfig, a: DetectArgs) -> Result<()> {
    if let Some(d) = a.detector {
        cfg.detector.detector = match d {
            DetectorArg::Sift => DetectorKind::Sift,
            DetectorArg::Grid => DetectorKind::Grid,
        };
    }
    if let Some(v) = a.contrast_threshold {
        cfg.detector.contrast_threshold = v;
    }
    if let Some(v) = a.edge_threshold {
        cfg.detector.edge_threshold = v;
    }
    if a.max_points.is_some() {
        cfg.detector.max_points = a.max_points;
    }
    if let Some(v) = a.grid_stride {
        cfg.detector.grid_stride = v;
    }
    if let Some(v) = a.margin {
        cfg.detector.border_margin = v;
    }
    cfg.validate()?;
    let frame = first_frame(&a.sequence, &cfg)?;
    let points = detect(&frame, &cfg.detector);
    save_points(&a.out, points.as_slice())?;
    log_snapshot(&cfg.write_snapshot(&snapshot_path_for(&a.out))?);
    eprintln!("{} points written to {}", points.len(), a.out.display());
    Ok(())
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(suffix);
    path.with_file_name(name)
}

fn train(mut cfg: RunConfig, a: TrainArgs) -> Result<()> {
    if let Some(v) = a.warmup_epochs {
        cfg.train.warmup_epochs = v;
    }
    if let Some(v) = a.main_epochs {
        cfg.train.main_epochs = v;
    }
    if let Some(v) = a.lr_warmup {
        cfg.train.lr_warmup = v;
    }
    if let Some(v) = a.lr_main {
        cfg.train.lr_main = v;
    }
    if let Some(s) = a.seed {
        cfg.train.seed = s;
        cfg.tracker.seed = s;
        cfg.sim.rng_seed = s;
    }
    if let Some(v) = a.sim_per_sequence {
        cfg.data.sim_per_sequence = v;
    }
    let init = match &a.init {
        Some(p) => {
            let (t, header) = load_tracker(p)?;
            cfg.tracker = header.tracker;
            Some(t)
        }
        None => None,
    };
    cfg.validate()?;
    let source = match a.teacher {
        TeacherArg::Labels => TeacherSource::Labels { manifest: a.labels_manifest.clone() },
        TeacherArg::Oracle => TeacherSource::Oracle,
        TeacherArg::None => TeacherSource::Disabled,
    };
    let data = build_training_data(&a.data, &cfg, &source)?;
    for (id, r) in &data.label_reports {
        if r.jumped.len() + r.no_start.len() > 0 {
            eprintln!("{id}: kept {} teacher tracks, dropped {} (jump) + {} (invalid start)", r.kept.len(), r.jumped.len(), r.no_start.len());
        }
    }
    let val: Vec<TrainSample> = match &a.val {
        Some(v) => load_validation(v, &cfg)?,
        None => Vec::new(),
    };
    let mut model = match init {
        Some(t) => t,
        None => Tracker::new(cfg.tracker.clone())?,
    };
    if let Some(p) = &a.pretrained_encoder {
        let n = load_pretrained(&mut model, p)?;
        eprintln!("loaded {n} encoder tensors from {}", p.display());
    }
    eprintln!("{}", model.describe());
    eprintln!(
        "data: {} teacher, {} simulated, {} static sequences; {} validation",
        data.teacher.len(),
        data.sim.len(),
        data.zero_flow.len(),
        val.len()
    );

    let snapshot = cfg.to_toml();
    log_snapshot(&cfg.write_snapshot(&snapshot_path_for(&a.out))?);
    let log_path = a.log.clone().unwrap_or_else(|| with_suffix(&a.out, ".log.tsv"));
    let mut log = File::create(&log_path).map_err(|e| io_error(&log_path, e))?;
    writeln!(log, "{}", EpochLog::HEADER).map_err(|e| io_error(&log_path, e))?;
    let mut write_err = None;
    let mut hook = |l: &EpochLog| {
        let row = l.to_row();
        eprintln!("{row}");
        if let Err(e) = writeln!(log, "{row}").and_then(|_| log.flush()) {
            write_err.get_or_insert(io_error(&log_path, e));
        }
    };

    if cfg.train.warmup_epochs > 0 {
        warmup(&mut model, &data.sim, &cfg.train, Some(&mut hook))?;
    }
    let run_main = cfg.train.main_epochs > 0 && !data.teacher.is_empty();
    if run_main {
        save_checkpoint(&with_suffix(&a.out, ".warmup"), &model, Some(&snapshot), Some("end of warmup"))?;
        let result = train_main(&mut model, &data.teacher, &data.sim, &data.zero_flow, &val, &cfg.train, Some(&mut hook))?;
        model.params = result.best_params;
        let note = format!("main epoch {} (validation loss {})", result.best_epoch, result.best_val_loss);
        save_checkpoint(&a.out, &model, Some(&snapshot), Some(&note))?;
        eprintln!("saved {} from {note}", a.out.display());
    } else {
        save_checkpoint(&a.out, &model, Some(&snapshot), Some("end of warmup"))?;
        eprintln!("saved {} (warmup only)", a.out.display());
    }
    match write_err {
        Some(e) => Err(e),
        None => Ok(()),
    }
}

fn track(mut cfg: RunConfig, a: TrackArgs) -> Result<()> {
    if let Some(v) = a.ncc_patch_size {
        cfg.ncc.patch_size = v;
    }
    if let Some(v) = a.ncc_search_radius {
        cfg.ncc.search_radius = v;
    }
    let model = match (a.method, &a.checkpoint) {
        (MethodArg::Pipsus, None) => {
            return Err(Error::InvalidArgument("--method pipsus needs --checkpoint".into()));
        }
        (MethodArg::Pipsus, Some(p)) => {
            let (t, header) = load_tracker(p)?;
            cfg.tracker = header.tracker;
            Some(t)
        }
        _ => None,
    };
    cfg.validate()?;
    let opts = cfg.load_options();
    let stored = a.sequence.join(POINTS_FILE);
    let points_file = a.points.clone().or_else(|| stored.exists().then_some(stored));
    let (video, points): (_, PointSet) = match &points_file {
        Some(f) => (load_labelled_sequence(&a.sequence, &opts)?, load_points(f)?),
        None => {
            let v = load_sequence(&a.sequence, &opts)?;
            let p = detect(v.frame(0), &cfg.detector);
            (v, p)
        }
    };
    if points.is_empty() {
        return Err(Error::InvalidArgument("no query points to track".into()));
    }
    let method = match (a.method, &model) {
        (MethodArg::Pipsus, Some(m)) => Method::Pipsus(m),
        (MethodArg::Ncc, _) => Method::Ncc(&cfg.ncc),
        _ => Method::Zero,
    };
    let traj = method.track(&video, &points)?;
    save_trajectories(&a.out, &traj)?;
    log_snapshot(&cfg.write_snapshot(&snapshot_path_for(&a.out))?);
    eprintln!("{}: {} points x {} frames ({})", a.out.display(), traj.num_points(), traj.num_frames(), method.name());
    if a.fps_report {
        let r = measure_fps(method, &video, &points, cfg.eval.fps_warmup_frames, cfg.eval.fps_runs)?;
        let runs: Vec<String> = r.runs.iter().map(|v| format!("{v:.2}")).collect();
        println!("fps\t{}\t{:.2}\truns={}\tframes={}\t{}", r.method, r.fps, runs.join(","), r.frames, r.machine);
    }
    Ok(())
}

fn eval(mut cfg: RunConfig, a: EvalArgs) -> Result<()> {
    if let Some(t) = a.threshold {
        cfg.eval.survival_threshold = t;
    }
    cfg.validate()?;
    let pred = load_trajectories(&a.pred)?;
    let gt = load_trajectories(&a.gt)?;
    let l2 = l2_error(&pred, &gt)?;
    let survival = survival_rate(&pred, &gt, cfg.eval.survival_threshold)?;
    let similarity = match &a.sequence {
        Some(s) => {
            let video = load_labelled_sequence(s, &cfg.load_options())?;
            if video.len() != pred.num_frames() {
                return Err(Error::Format(format!(
                    "{} has {} frames, prediction {}",
                    s.display(),
                    video.len(),
                    pred.num_frames()
                )));
            }
            Some(sequence_patch_ncc(&video, &pred, cfg.eval.ncc_patch_size, NccReference::FirstFrame)?)
        }
        None => None,
    };
    let method = a.method.clone().unwrap_or_else(|| {
        a.pred.file_stem().map_or_else(|| "method".into(), |s| s.to_string_lossy().into_owned())
    });
    let rows = report_rows(&a.dataset, &method, &l2, survival, similarity.as_ref(), None);
    print!("{}", format_table(&rows));
    if l2.lost > 0 {
        eprintln!("{} labelled entries were lost by the prediction", l2.lost);
    }
    if let Some(c) = &a.curve_out {
        save_curve(c, &method, &drift_curve(&pred, &gt)?)?;
    }
    if let Some(o) = &a.out {
        crate::formats::write_text(o, &format_tsv(&rows))?;
        log_snapshot(&cfg.write_snapshot(&snapshot_path_for(o))?);
    }
    Ok(())
}

fn plot(a: PlotArgs) -> Result<()> {
    let curves = a.curves.iter().map(|p| load_curve(p)).collect::<Result<Vec<_>>>()?;
    crate::formats::write_text(&a.out, &render_svg(&curves, &a.title))?;
    eprintln!("plot written to {}", a.out.display());
    Ok(())
}
