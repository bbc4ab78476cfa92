//! Value types shared by every module: images, videos, point sets and
//! trajectories.
//!
//! Coordinates are `(x, y)` in pixels with `x` along the width (column) and
//! `y` along the height (row); the centre of the top-left pixel is `(0, 0)`.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::tensor::Tensor;

/// Single-channel image with intensities nominally in `[0, 1]`, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GrayImage {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(invalid!("image must be non-empty, got {width}x{height}"));
        }
        if data.len() != width * height {
            return Err(invalid!(
                "image buffer has {} values, expected {}x{}",
                data.len(),
                width,
                height
            ));
        }
        Ok(GrayImage { width, height, data })
    }

    pub fn filled(width: usize, height: usize, value: f64) -> Self {
        GrayImage { width, height, data: vec![value; width * height] }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        GrayImage { width, height, data }
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }
    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }
    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }
    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }
    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }
    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: f64) {
        self.data[y * self.width + x] = v;
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Apply `y = gain * x + bias` to every pixel (no clipping).
    pub fn map_intensity(&self, gain: f64, bias: f64) -> GrayImage {
        GrayImage {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|v| gain * v + bias).collect(),
        }
    }

    /// `[1, H, W]` tensor view of the pixels.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_vec(&[1, self.height, self.width], self.data.clone())
    }

    pub fn contains(&self, p: Point) -> bool {
        p.x >= 0.0 && p.y >= 0.0 && p.x <= (self.width - 1) as f64 && p.y <= (self.height - 1) as f64
    }
}

/// Ordered grayscale frames of identical size.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VideoSequence {
    pub id: String,
    pub frame_rate_hint: Option<f64>,
    frames: Vec<GrayImage>,
}

impl VideoSequence {
    pub fn new(id: impl Into<String>, frames: Vec<GrayImage>) -> Result<Self> {
        let first = frames.first().ok_or_else(|| invalid!("a video needs at least one frame"))?;
        let (w, h) = (first.width, first.height);
        for (i, f) in frames.iter().enumerate() {
            if f.width != w || f.height != h {
                return Err(invalid!(
                    "frame {i} is {}x{}, expected {}x{}",
                    f.width,
                    f.height,
                    w,
                    h
                ));
            }
            if !f.is_finite() {
                return Err(invalid!("frame {i} contains non-finite intensities"));
            }
        }
        Ok(VideoSequence { id: id.into(), frame_rate_hint: None, frames })
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.frames.len()
    }
    #[inline]
    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
    pub fn frames(&self) -> &[GrayImage] {
        &self.frames
    }
    pub fn frame(&self, t: usize) -> &GrayImage {
        &self.frames[t]
    }
    pub fn width(&self) -> usize {
        self.frames[0].width
    }
    pub fn height(&self) -> usize {
        self.frames[0].height
    }
    pub fn into_frames(self) -> Vec<GrayImage> {
        self.frames
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    #[inline]
    pub const fn new(x: f64, y: f64) -> Self {
        Point { x, y }
    }
    #[inline]
    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }
    #[inline]
    pub fn dist(self, other: Point) -> f64 {
        crate::math::hypot(self.x - other.x, self.y - other.y)
    }
    #[inline]
    pub fn offset(self, dx: f64, dy: f64) -> Point {
        Point::new(self.x + dx, self.y + dy)
    }
}

/// A non-empty set of tracked points. Detectors may legitimately produce an
/// empty set; see [`PointSet::from_points_unchecked`].
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct PointSet {
    points: Vec<Point>,
}

impl PointSet {
    pub fn new(points: Vec<Point>) -> Result<Self> {
        if points.is_empty() {
            return Err(invalid!("a point set needs at least one point"));
        }
        if let Some(i) = points.iter().position(|p| !p.is_finite()) {
            return Err(invalid!("point {i} has non-finite coordinates"));
        }
        Ok(PointSet { points })
    }

    /// Skips the non-empty check (detector output, filters).
    pub fn from_points_unchecked(points: Vec<Point>) -> Self {
        PointSet { points }
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.points.len()
    }
    #[inline]
    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
    pub fn iter(&self) -> core::slice::Iter<'_, Point> {
        self.points.iter()
    }
    pub fn as_slice(&self) -> &[Point] {
        &self.points
    }
    pub fn into_vec(self) -> Vec<Point> {
        self.points
    }
    pub fn get(&self, i: usize) -> Point {
        self.points[i]
    }
}

impl core::ops::Index<usize> for PointSet {
    type Output = Point;
    fn index(&self, i: usize) -> &Point {
        &self.points[i]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrajectorySource {
    Model,
    Teacher,
    Simulation,
}

impl TrajectorySource {
    pub fn as_str(self) -> &'static str {
        match self {
            TrajectorySource::Model => "model",
            TrajectorySource::Teacher => "teacher",
            TrajectorySource::Simulation => "simulation",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "model" => Some(TrajectorySource::Model),
            "teacher" => Some(TrajectorySource::Teacher),
            "simulation" => Some(TrajectorySource::Simulation),
            _ => None,
        }
    }
}

/// Per-point, per-frame positions with validity flags. Storage is
/// point-major: entry `(i, t)` lives at `i * T + t`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectorySet {
    n: usize,
    t: usize,
    positions: Vec<Point>,
    valid: Vec<bool>,
    pub source: TrajectorySource,
}

impl TrajectorySet {
    pub fn new(
        n: usize,
        t: usize,
        positions: Vec<Point>,
        valid: Vec<bool>,
        source: TrajectorySource,
    ) -> Result<Self> {
        if positions.len() != n * t || valid.len() != n * t {
            return Err(invalid!(
                "trajectory buffers hold {} positions / {} flags, expected {}x{}",
                positions.len(),
                valid.len(),
                n,
                t
            ));
        }
        if let Some(k) = (0..n * t).find(|&k| valid[k] && !positions[k].is_finite()) {
            return Err(invalid!("valid entry (point {}, frame {}) is not finite", k / t, k % t));
        }
        Ok(TrajectorySet { n, t, positions, valid, source })
    }

    /// All points held at their initial location for `t` frames.
    pub fn constant(points: &PointSet, t: usize, source: TrajectorySource) -> Self {
        let mut positions = Vec::with_capacity(points.len() * t);
        for p in points.iter() {
            positions.extend(core::iter::repeat_n(*p, t));
        }
        TrajectorySet { n: points.len(), t, valid: vec![true; positions.len()], positions, source }
    }

    /// Build from frame-major rows (`rows[t][i]`), all valid.
    pub fn from_frames(rows: &[Vec<Point>], source: TrajectorySource) -> Result<Self> {
        let t = rows.len();
        let n = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != n) {
            return Err(invalid!("ragged trajectory rows"));
        }
        let mut positions = Vec::with_capacity(n * t);
        for i in 0..n {
            for row in rows {
                positions.push(row[i]);
            }
        }
        TrajectorySet::new(n, t, positions, vec![true; n * t], source)
    }

    #[inline]
    pub fn num_points(&self) -> usize {
        self.n
    }
    #[inline]
    pub fn num_frames(&self) -> usize {
        self.t
    }
    #[inline]
    pub fn get(&self, point: usize, frame: usize) -> Point {
        self.positions[point * self.t + frame]
    }
    #[inline]
    pub fn is_valid(&self, point: usize, frame: usize) -> bool {
        self.valid[point * self.t + frame]
    }
    pub fn set(&mut self, point: usize, frame: usize, p: Point, valid: bool) {
        self.positions[point * self.t + frame] = p;
        self.valid[point * self.t + frame] = valid;
    }
    pub fn positions(&self) -> &[Point] {
        &self.positions
    }
    pub fn valid_flags(&self) -> &[bool] {
        &self.valid
    }

    /// Positions of every point at frame `t`.
    pub fn frame(&self, frame: usize) -> Vec<Point> {
        (0..self.n).map(|i| self.get(i, frame)).collect()
    }

    pub fn frame_points(&self, frame: usize) -> PointSet {
        PointSet::from_points_unchecked(self.frame(frame))
    }

    /// Keep only the listed point rows, in the given order.
    pub fn select_points(&self, keep: &[usize]) -> TrajectorySet {
        let mut positions = Vec::with_capacity(keep.len() * self.t);
        let mut valid = Vec::with_capacity(keep.len() * self.t);
        for &i in keep {
            positions.extend_from_slice(&self.positions[i * self.t..(i + 1) * self.t]);
            valid.extend_from_slice(&self.valid[i * self.t..(i + 1) * self.t]);
        }
        TrajectorySet { n: keep.len(), t: self.t, positions, valid, source: self.source }
    }

    pub fn any_valid(&self) -> bool {
        self.valid.iter().any(|&v| v)
    }
}
