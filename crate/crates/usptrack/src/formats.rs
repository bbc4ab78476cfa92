//! Text formats for trajectories and point sets, the JSON motion log, and
//! teacher label ingestion.
//!
//! Trajectory file:
//!
//! ```text
//! USPTRAJ 1
//! points 2
//! frames 3
//! source teacher
//! # point frame x y valid
//! 0 0 12.5 40 1
//! ...
//! ```
//!
//! Floats are written in shortest round-trip form, so a save/load cycle is
//! bit-exact. Lines starting with `#` are comments.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use usptrack_core::simulator::MotionLog;
use usptrack_core::teacher::{filter_teacher_labels, LabelFilterReport};
use usptrack_core::{Error, Point, PointSet, Result, TrajectorySet, TrajectorySource, VideoSequence};

use crate::io_error;

pub const TRAJ_MAGIC: &str = "USPTRAJ";
pub const TRAJ_VERSION: u32 = 1;
pub const POINTS_MAGIC: &str = "USPPTS";
pub const POINTS_VERSION: u32 = 1;

fn format_err(origin: &str, line: usize, msg: impl std::fmt::Display) -> Error {
    Error::Format(format!("{origin}:{line}: {msg}"))
}

/// Non-empty, non-comment lines with 1-based line numbers.
fn content_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'))
}

fn check_magic(origin: &str, line: Option<(usize, &str)>, magic: &str, version: u32) -> Result<()> {
    let Some((no, line)) = line else {
        return Err(Error::Format(format!("{origin}: empty file, expected a `{magic} {version}` header")));
    };
    let mut it = line.split_whitespace();
    if it.next() != Some(magic) {
        return Err(format_err(origin, no, format_args!("expected `{magic}` header, found {line:?}")));
    }
    match it.next().map(str::parse::<u32>) {
        Some(Ok(v)) if v == version => Ok(()),
        Some(Ok(v)) => Err(format_err(origin, no, format_args!("unsupported version: expected {version}, found {v}"))),
        _ => Err(format_err(origin, no, "missing or malformed version")),
    }
}

fn parse_field<T: std::str::FromStr>(origin: &str, no: usize, tok: Option<&str>, what: &str) -> Result<T> {
    tok.and_then(|t| t.parse().ok()).ok_or_else(|| format_err(origin, no, format_args!("malformed {what}")))
}

pub fn format_trajectories(traj: &TrajectorySet) -> String {
    let (n, t) = (traj.num_points(), traj.num_frames());
    let mut s = String::with_capacity(64 + n * t * 32);
    let _ = writeln!(s, "{TRAJ_MAGIC} {TRAJ_VERSION}");
    let _ = writeln!(s, "points {n}");
    let _ = writeln!(s, "frames {t}");
    let _ = writeln!(s, "source {}", traj.source.as_str());
    s.push_str("# point frame x y valid\n");
    for i in 0..n {
        for f in 0..t {
            let p = traj.get(i, f);
            let _ = writeln!(s, "{i} {f} {:?} {:?} {}", p.x, p.y, u8::from(traj.is_valid(i, f)));
        }
    }
    s
}

pub fn parse_trajectories(text: &str, origin: &str) -> Result<TrajectorySet> {
    let mut lines = content_lines(text).peekable();
    check_magic(origin, lines.next(), TRAJ_MAGIC, TRAJ_VERSION)?;
    let (mut n, mut t, mut source) = (None, None, None);
    while let Some(&(no, line)) = lines.peek() {
        let mut it = line.split_whitespace();
        let key = it.next().unwrap_or_default();
        match key {
            "points" => n = Some(parse_field::<usize>(origin, no, it.next(), "point count")?),
            "frames" => t = Some(parse_field::<usize>(origin, no, it.next(), "frame count")?),
            "source" => {
                let v = it.next().unwrap_or_default();
                source = Some(TrajectorySource::parse(v).ok_or_else(|| format_err(origin, no, format_args!("unknown source {v:?}")))?);
            }
            _ => break,
        }
        lines.next();
    }
    let (Some(n), Some(t), Some(source)) = (n, t, source) else {
        return Err(Error::Format(format!("{origin}: header must declare points, frames and source")));
    };
    let total = n * t;
    let mut positions = vec![Point::new(0.0, 0.0); total];
    let mut valid = vec![false; total];
    let mut seen = vec![false; total];
    let mut count = 0usize;
    for (no, line) in lines {
        let mut it = line.split_whitespace();
        let i: usize = parse_field(origin, no, it.next(), "point index")?;
        let f: usize = parse_field(origin, no, it.next(), "frame index")?;
        let x: f64 = parse_field(origin, no, it.next(), "x coordinate")?;
        let y: f64 = parse_field(origin, no, it.next(), "y coordinate")?;
        let v: u8 = parse_field(origin, no, it.next(), "validity flag")?;
        if it.next().is_some() || v > 1 {
            return Err(format_err(origin, no, "expected `point frame x y valid` with valid in {0, 1}"));
        }
        if f >= t {
            return Err(format_err(origin, no, format_args!("frame {f} is outside the declared {t} frames")));
        }
        if i >= n {
            return Err(format_err(origin, no, format_args!("point {i} is outside the declared {n} points")));
        }
        let k = i * t + f;
        if seen[k] {
            return Err(format_err(origin, no, format_args!("duplicate entry for point {i}, frame {f}")));
        }
        seen[k] = true;
        positions[k] = Point::new(x, y);
        valid[k] = v == 1;
        count += 1;
    }
    if count != total {
        return Err(Error::Format(format!(
            "{origin}: header declares {n} points x {t} frames = {total} entries, found {count}"
        )));
    }
    TrajectorySet::new(n, t, positions, valid, source).map_err(|e| Error::Format(format!("{origin}: {e}")))
}

pub fn save_trajectories(path: &Path, traj: &TrajectorySet) -> Result<()> {
    write_text(path, &format_trajectories(traj))
}

pub fn load_trajectories(path: &Path) -> Result<TrajectorySet> {
    parse_trajectories(&read_text(path)?, &path.display().to_string())
}

pub fn format_points(points: &[Point]) -> String {
    let mut s = format!("{POINTS_MAGIC} {POINTS_VERSION}\npoints {}\n# x y\n", points.len());
    for p in points {
        let _ = writeln!(s, "{:?} {:?}", p.x, p.y);
    }
    s
}

/// Parse a point file. The result may be empty (a detector can find nothing).
pub fn parse_points(text: &str, origin: &str) -> Result<PointSet> {
    let mut lines = content_lines(text);
    check_magic(origin, lines.next(), POINTS_MAGIC, POINTS_VERSION)?;
    let n: usize = match lines.next() {
        Some((no, line)) => {
            let mut it = line.split_whitespace();
            if it.next() != Some("points") {
                return Err(format_err(origin, no, "expected `points <n>`"));
            }
            parse_field(origin, no, it.next(), "point count")?
        }
        None => return Err(Error::Format(format!("{origin}: missing point count"))),
    };
    let mut points = Vec::with_capacity(n);
    for (no, line) in lines {
        let mut it = line.split_whitespace();
        let x: f64 = parse_field(origin, no, it.next(), "x coordinate")?;
        let y: f64 = parse_field(origin, no, it.next(), "y coordinate")?;
        let p = Point::new(x, y);
        if it.next().is_some() || !p.is_finite() {
            return Err(format_err(origin, no, "expected two finite coordinates"));
        }
        points.push(p);
    }
    if points.len() != n {
        return Err(Error::Format(format!("{origin}: header declares {n} points, found {}", points.len())));
    }
    Ok(PointSet::from_points_unchecked(points))
}

pub fn save_points(path: &Path, points: &[Point]) -> Result<()> {
    write_text(path, &format_points(points))
}

pub fn load_points(path: &Path) -> Result<PointSet> {
    parse_points(&read_text(path)?, &path.display().to_string())
}

pub fn save_motion_log(path: &Path, log: &MotionLog) -> Result<()> {
    let text = serde_json::to_string_pretty(log).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    write_text(path, &(text + "\n"))
}

pub fn load_motion_log(path: &Path) -> Result<MotionLog> {
    serde_json::from_str(&read_text(path)?).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

/// Read teacher labels for `seq` and apply the displacement filter.
/// An empty file yields `EmptyLabels`; a frame count that differs from the
/// video yields `FormatError`.
pub fn ingest_teacher_labels(
    seq: &VideoSequence,
    label_file: &Path,
    cap: Option<f64>,
) -> Result<(TrajectorySet, LabelFilterReport)> {
    let text = read_text(label_file)?;
    if content_lines(&text).next().is_none() {
        return Err(Error::EmptyLabels(format!("{} is empty", label_file.display())));
    }
    let labels = parse_trajectories(&text, &label_file.display().to_string())?;
    filter_teacher_labels(seq.len(), labels, cap).map_err(|e| match e {
        Error::Format(m) => Error::Format(format!("{}: {m}", label_file.display())),
        other => other,
    })
}

/// Manifest pairing sequence ids with label files: one `id path` pair per
/// line, paths relative to the manifest's directory.
pub fn load_label_manifest(path: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let text = read_text(path)?;
    let base = path.parent().unwrap_or(Path::new("."));
    let origin = path.display().to_string();
    let mut out = BTreeMap::new();
    let mut first_line: HashMap<String, usize> = HashMap::new();
    for (no, line) in content_lines(&text) {
        let mut it = line.split_whitespace();
        let (Some(id), Some(file), None) = (it.next(), it.next(), it.next()) else {
            return Err(format_err(&origin, no, "expected `<sequence id> <label file>`"));
        };
        if let Some(prev) = first_line.insert(id.to_string(), no) {
            return Err(format_err(&origin, no, format_args!("sequence {id:?} already listed on line {prev}")));
        }
        out.insert(id.to_string(), base.join(file));
    }
    Ok(out)
}

pub fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::InvalidData => Error::Format(format!("{}: not UTF-8 text", path.display())),
        _ => io_error(path, e),
    })
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| io_error(dir, e))?;
    }
    fs::write(path, text).map_err(|e| io_error(path, e))
}
