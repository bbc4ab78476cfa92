//! Sequence directories and the training sets built from them.
//!
//! A sequence directory holds its frames plus optional side files:
//! `points.pts` (query points), `trajectories.traj` (exact labels),
//! `motion.json` (simulator log) and `teacher.traj` (external teacher
//! labels). A dataset root is either one sequence directory or a directory
//! of them.

use std::path::{Path, PathBuf};

use usptrack_core::keypoints::detect;
use usptrack_core::losses::LossKind;
use usptrack_core::simulator::{make_zero_flow_batch, simulate_sequence, SimConfig, SimulatedSequence};
use usptrack_core::teacher::{oracle_teacher, LabelFilterReport};
use usptrack_core::trainer::TrainSample;
use usptrack_core::{Error, GrayImage, PointSet, Result, VideoSequence};

use crate::config::{RunConfig, SNAPSHOT_FILE};
use crate::formats::{
    ingest_teacher_labels, load_label_manifest, load_motion_log, load_points, load_trajectories, save_motion_log,
    save_points, save_trajectories,
};
use crate::io_error;
use crate::sequence::{list_frames, load_sequence, natural_cmp, save_sequence, LoadOptions};

pub const POINTS_FILE: &str = "points.pts";
pub const TRAJECTORY_FILE: &str = "trajectories.traj";
pub const MOTION_FILE: &str = "motion.json";
pub const TEACHER_FILE: &str = "teacher.traj";

/// Sequence directories under `root`, in natural order.
pub fn sequence_dirs(root: &Path) -> Result<Vec<PathBuf>> {
    if !root.exists() {
        return Err(Error::NotFound(root.display().to_string()));
    }
    if !list_frames(root)?.is_empty() {
        return Ok(vec![root.to_path_buf()]);
    }
    let mut dirs = Vec::new();
    for entry in std::fs::read_dir(root).map_err(|e| io_error(root, e))? {
        let path = entry.map_err(|e| io_error(root, e))?.path();
        if path.is_dir() && !list_frames(&path)?.is_empty() {
            dirs.push(path);
        }
    }
    if dirs.is_empty() {
        return Err(Error::Format(format!("{}: no sequence directories", root.display())));
    }
    dirs.sort_by(|a, b| natural_cmp(&a.to_string_lossy(), &b.to_string_lossy()));
    Ok(dirs)
}

/// Load a sequence whose side files carry pixel coordinates: resizing would
/// silently invalidate them, so the native size must match the target.
pub fn load_labelled_sequence(dir: &Path, opts: &LoadOptions) -> Result<VideoSequence> {
    let video = load_sequence(dir, &LoadOptions { resize: None })?;
    if let Some((w, h)) = opts.resize {
        if (video.width(), video.height()) != (w, h) {
            return Err(Error::InvalidArgument(format!(
                "{}: frames are {}x{} but the tracker expects {w}x{h}; labelled sequences are not resized",
                dir.display(),
                video.width(),
                video.height()
            )));
        }
    }
    Ok(video)
}

/// `points.pts` when present, otherwise keypoints detected on `frame0`.
pub fn query_points(dir: &Path, frame0: &GrayImage, cfg: &RunConfig) -> Result<PointSet> {
    let file = dir.join(POINTS_FILE);
    let pts = if file.exists() { load_points(&file)? } else { detect(frame0, &cfg.detector) };
    if pts.is_empty() {
        return Err(Error::InvalidArgument(format!("{}: no query points (none stored, none detected)", dir.display())));
    }
    Ok(pts)
}

/// Write a simulated sequence with its labels, motion log, query points
/// and the configuration that produced it.
pub fn write_simulated(dir: &Path, sim: &SimulatedSequence, points: &PointSet, cfg: &RunConfig) -> Result<()> {
    save_sequence(dir, &sim.video)?;
    save_trajectories(&dir.join(TRAJECTORY_FILE), &sim.trajectories)?;
    save_motion_log(&dir.join(MOTION_FILE), &sim.log)?;
    save_points(&dir.join(POINTS_FILE), points.as_slice())?;
    cfg.write_snapshot(&dir.join(SNAPSHOT_FILE))?;
    Ok(())
}

/// Seed of the `k`-th simulated sequence derived from sequence `index`.
pub fn derived_seed(base: u64, index: usize, k: usize) -> u64 {
    base.wrapping_add((index as u64).wrapping_mul(1_000_003)).wrapping_add(k as u64)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TeacherSource {
    /// Exact labels from each sequence's `motion.json`.
    Oracle,
    /// `teacher.traj` per sequence, or the files listed in a manifest.
    Labels { manifest: Option<PathBuf> },
    /// No teacher: warmup only.
    Disabled,
}

#[derive(Debug, Clone, Default)]
pub struct TrainingData {
    pub teacher: Vec<TrainSample>,
    pub sim: Vec<TrainSample>,
    pub zero_flow: Vec<TrainSample>,
    pub label_reports: Vec<(String, LabelFilterReport)>,
}

fn teacher_sample(
    dir: &Path,
    video: &VideoSequence,
    points: &PointSet,
    source: &TeacherSource,
    manifest: Option<&std::collections::BTreeMap<String, PathBuf>>,
    cfg: &RunConfig,
    reports: &mut Vec<(String, LabelFilterReport)>,
) -> Result<Option<TrainSample>> {
    let labels = match source {
        TeacherSource::Disabled => return Ok(None),
        TeacherSource::Oracle => {
            let file = dir.join(MOTION_FILE);
            let log = if file.exists() { Some(load_motion_log(&file)?) } else { None };
            oracle_teacher(video, points, log.as_ref())?
        }
        TeacherSource::Labels { .. } => {
            let file = match manifest {
                Some(m) => m
                    .get(&video.id)
                    .cloned()
                    .ok_or_else(|| Error::NotFound(format!("no label file listed for sequence {:?}", video.id)))?,
                None => dir.join(TEACHER_FILE),
            };
            let (labels, report) = ingest_teacher_labels(video, &file, Some(cfg.data.teacher_displacement_cap))?;
            reports.push((video.id.clone(), report));
            labels
        }
    };
    TrainSample::new(video.clone(), labels, LossKind::Teacher).map(Some)
}

/// Teacher, simulation and zero-flow samples for every sequence under `root`.
/// Simulated and static sequences start from each sequence's first frame
/// and its query points.
pub fn build_training_data(root: &Path, cfg: &RunConfig, source: &TeacherSource) -> Result<TrainingData> {
    let manifest = match source {
        TeacherSource::Labels { manifest: Some(m) } => Some(load_label_manifest(m)?),
        _ => None,
    };
    let opts = cfg.load_options();
    let mut data = TrainingData::default();
    for (index, dir) in sequence_dirs(root)?.iter().enumerate() {
        let needs_native = source != &TeacherSource::Disabled || dir.join(POINTS_FILE).exists();
        let video = if needs_native { load_labelled_sequence(dir, &opts)? } else { load_sequence(dir, &opts)? };
        let frame0 = video.frame(0);
        let points = query_points(dir, frame0, cfg)?;
        if let Some(s) = teacher_sample(dir, &video, &points, source, manifest.as_ref(), cfg, &mut data.label_reports)? {
            data.teacher.push(s);
        }
        for k in 0..cfg.data.sim_per_sequence {
            let sc = SimConfig { rng_seed: derived_seed(cfg.sim.rng_seed, index, k), ..cfg.sim.clone() };
            let sim = simulate_sequence(frame0, &points, &sc)?;
            data.sim.push(TrainSample::new(sim.video, sim.trajectories, LossKind::Simulation)?);
        }
        let zc = SimConfig { rng_seed: derived_seed(cfg.sim.rng_seed ^ 0x5a5a, index, 0), ..cfg.sim.clone() };
        for (v, labels) in make_zero_flow_batch(std::slice::from_ref(frame0), &points, &zc)? {
            data.zero_flow.push(TrainSample::new(v, labels, LossKind::ZeroFlow)?);
        }
    }
    Ok(data)
}

/// Held-out sequences scored against `trajectories.traj` (or, failing
/// that, `teacher.traj`).
pub fn load_validation(root: &Path, cfg: &RunConfig) -> Result<Vec<TrainSample>> {
    let opts = cfg.load_options();
    sequence_dirs(root)?
        .iter()
        .map(|dir| {
            let video = load_labelled_sequence(dir, &opts)?;
            let exact = dir.join(TRAJECTORY_FILE);
            let file = if exact.exists() { exact } else { dir.join(TEACHER_FILE) };
            let labels = load_trajectories(&file)?;
            TrainSample::new(video, labels, LossKind::Teacher).map_err(|e| match e {
                Error::InvalidArgument(m) => Error::Format(format!("{}: {m}", file.display())),
                other => other,
            })
        })
        .collect()
}
