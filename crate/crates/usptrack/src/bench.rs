//! Frame-rate measurement for the three tracking methods.

use std::time::Instant;

use serde::{Deserialize, Serialize};
use usptrack_core::baselines::{ncc_track, zero_motion_track, NccConfig, NccTracker};
use usptrack_core::tracker::{Tracker, TrackerState};
use usptrack_core::{Error, GrayImage, Point, PointSet, Result, TrajectorySet, VideoSequence};

#[derive(Debug, Clone, Copy)]
pub enum Method<'a> {
    Pipsus(&'a Tracker),
    Ncc(&'a NccConfig),
    Zero,
}

impl Method<'_> {
    pub fn name(&self) -> &'static str {
        match self {
            Method::Pipsus(_) => "pipsus",
            Method::Ncc(_) => "ncc",
            Method::Zero => "zero",
        }
    }

    /// Track `points` through the whole video.
    pub fn track(&self, video: &VideoSequence, points: &PointSet) -> Result<TrajectorySet> {
        match self {
            Method::Pipsus(t) => t.track_sequence(video, points),
            Method::Ncc(cfg) => ncc_track(video, points, cfg),
            Method::Zero => {
                if points.is_empty() {
                    return Err(Error::InvalidArgument("cannot track an empty point set".into()));
                }
                Ok(zero_motion_track(video, points))
            }
        }
    }

    fn start(&self, frame0: &GrayImage, points: &PointSet) -> Result<Stream<'_>> {
        Ok(match self {
            Method::Pipsus(t) => Stream::Pipsus(t, Box::new(t.init(frame0, points)?)),
            Method::Ncc(cfg) => Stream::Ncc(Box::new(NccTracker::new(frame0, points, cfg)?)),
            Method::Zero => Stream::Zero(points.as_slice().to_vec(), Vec::with_capacity(points.len())),
        })
    }
}

enum Stream<'a> {
    Pipsus(&'a Tracker, Box<TrackerState>),
    Ncc(Box<NccTracker>),
    /// Initial points and the output buffer they are copied into.
    Zero(Vec<Point>, Vec<Point>),
}

impl Stream<'_> {
    fn step(&mut self, frame: &GrayImage) -> Result<usize> {
        match self {
            Stream::Pipsus(t, state) => Ok(t.step(state, frame, false)?.points.len()),
            Stream::Ncc(n) => {
                n.step(frame);
                Ok(n.positions().len())
            }
            Stream::Zero(init, out) => {
                out.clear();
                out.extend_from_slice(init);
                Ok(out.len())
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MachineInfo {
    pub os: String,
    pub arch: String,
    pub cpu: String,
    pub logical_cpus: usize,
    /// Worker threads used while timing.
    pub threads: usize,
}

impl MachineInfo {
    pub fn current() -> Self {
        let cpu = std::fs::read_to_string("/proc/cpuinfo")
            .ok()
            .and_then(|s| {
                s.lines()
                    .find(|l| l.starts_with("model name"))
                    .and_then(|l| l.split_once(':'))
                    .map(|(_, v)| v.trim().to_string())
            })
            .unwrap_or_else(|| "unknown".into());
        MachineInfo {
            os: std::env::consts::OS.into(),
            arch: std::env::consts::ARCH.into(),
            cpu,
            logical_cpus: std::thread::available_parallelism().map_or(1, |n| n.get()),
            threads: 1,
        }
    }
}

impl std::fmt::Display for MachineInfo {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{} {} / {} ({} logical cpus, {} thread)", self.os, self.arch, self.cpu, self.logical_cpus, self.threads)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FpsReport {
    pub method: String,
    /// Median over runs.
    pub fps: f64,
    pub runs: Vec<f64>,
    /// Timed frames per run.
    pub frames: usize,
    pub machine: MachineInfo,
}

impl FpsReport {
    /// Largest relative deviation of a run from the median.
    pub fn spread(&self) -> f64 {
        self.runs.iter().map(|r| ((r - self.fps) / self.fps).abs()).fold(0.0, f64::max)
    }
}

/// Seconds spent on frames `warmup_frames + 1 ..` of one streaming pass.
pub fn time_run(method: Method<'_>, video: &VideoSequence, points: &PointSet, warmup_frames: usize) -> Result<f64> {
    let mut stream = method.start(video.frame(0), points)?;
    let mut sink = 0usize;
    for frame in &video.frames()[1..=warmup_frames] {
        sink += stream.step(frame)?;
    }
    let start = Instant::now();
    for frame in &video.frames()[warmup_frames + 1..] {
        sink += stream.step(frame)?;
    }
    let secs = start.elapsed().as_secs_f64();
    std::hint::black_box(sink);
    Ok(secs)
}

/// Frames per second after `warmup_frames` untimed frames, median of `runs`
/// passes, on the calling thread only.
pub fn measure_fps(
    method: Method<'_>,
    video: &VideoSequence,
    points: &PointSet,
    warmup_frames: usize,
    runs: usize,
) -> Result<FpsReport> {
    if video.len() <= warmup_frames + 1 {
        return Err(Error::InvalidArgument(format!(
            "FPS measurement needs more than {} frames, video has {}",
            warmup_frames + 1,
            video.len()
        )));
    }
    let frames = video.len() - 1 - warmup_frames;
    let mut fps = Vec::with_capacity(runs.max(1));
    for _ in 0..runs.max(1) {
        let secs = time_run(method, video, points, warmup_frames)?;
        fps.push(if secs > 0.0 { frames as f64 / secs } else { f64::INFINITY });
    }
    let mut sorted = fps.clone();
    sorted.sort_by(f64::total_cmp);
    let median = sorted[sorted.len() / 2];
    Ok(FpsReport { method: method.name().into(), fps: median, runs: fps, frames, machine: MachineInfo::current() })
}
