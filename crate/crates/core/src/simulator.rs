//! Synthetic videos with known per-point motion.
//!
//! A base frame is warped by a cumulative affine motion, then modulated by a
//! global per-frame gain and bias and corrupted with clipped Gaussian noise.
//! Labels depend only on geometry: the trajectory of a keypoint is the
//! cumulative affine applied to its initial position.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::datamodel::{GrayImage, Point, PointSet, TrajectorySet, TrajectorySource, VideoSequence};
use crate::error::{invalid, Result};
use crate::math;
use crate::sampling::BilinearTap;

/// 2×3 affine map `p ↦ [a b; c d]·p + t`, rows `[a, b, tx]`, `[c, d, ty]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Affine(pub [[f64; 3]; 2]);

impl Affine {
    pub const IDENTITY: Affine = Affine([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]);

    pub fn translation(dx: f64, dy: f64) -> Self {
        Affine([[1.0, 0.0, dx], [0.0, 1.0, dy]])
    }

    #[inline]
    pub fn apply(&self, p: Point) -> Point {
        let m = &self.0;
        Point::new(
            m[0][0] * p.x + m[0][1] * p.y + m[0][2],
            m[1][0] * p.x + m[1][1] * p.y + m[1][2],
        )
    }

    pub fn det(&self) -> f64 {
        self.0[0][0] * self.0[1][1] - self.0[0][1] * self.0[1][0]
    }

    /// `self ∘ first`: apply `first`, then `self`.
    pub fn compose(&self, first: &Affine) -> Affine {
        let a = &self.0;
        let b = &first.0;
        let mut out = [[0.0; 3]; 2];
        for r in 0..2 {
            for c in 0..3 {
                out[r][c] = a[r][0] * b[0][c] + a[r][1] * b[1][c];
            }
            out[r][2] += a[r][2];
        }
        Affine(out)
    }

    pub fn inverse(&self) -> Result<Affine> {
        let det = self.det();
        if !det.is_finite() || det.abs() < 1e-12 {
            return Err(invalid!("affine linear part is singular (det = {det})"));
        }
        let [[a, b, tx], [c, d, ty]] = self.0;
        let (ia, ib, ic, id) = (d / det, -b / det, -c / det, a / det);
        Ok(Affine([[ia, ib, -(ia * tx + ib * ty)], [ic, id, -(ic * tx + id * ty)]]))
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().flatten().all(|v| v.is_finite())
    }
}

/// Inverse-warp `frame` so that content at `p` moves to `A·p`; bilinear
/// interpolation, border clamping.
pub fn warp_affine(frame: &GrayImage, a: &Affine) -> Result<GrayImage> {
    if !a.is_finite() {
        return Err(invalid!("affine matrix has non-finite entries"));
    }
    let inv = a.inverse()?;
    let (w, h) = (frame.width(), frame.height());
    Ok(GrayImage::from_fn(w, h, |x, y| {
        let src = inv.apply(Point::new(x as f64, y as f64));
        BilinearTap::new(src.x, src.y, w, h).sample(frame.data(), w)
    }))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum MotionModel {
    /// Independent uniform translation per frame, within the per-frame bound.
    PerFrameRandomTranslation,
    /// Low-pass filtered random affine increments.
    SmoothRandomAffine,
    /// Fixed translation every frame.
    ConstantTranslation { dx: f64, dy: f64 },
    Zero,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    pub seq_len: usize,
    /// Bound on any point's displacement between consecutive frames, pixels.
    pub max_translation_per_frame: f64,
    pub intensity_gain_range: (f64, f64),
    pub intensity_bias_range: (f64, f64),
    pub noise_std: f64,
    pub motion_model: MotionModel,
    /// Low-pass coefficient in `[0, 1)` for smooth affine motion; larger is smoother.
    pub smoothness: f64,
    /// Per-frame increment scales for smooth affine motion: rotation
    /// (radians), log-scale and shear.
    pub max_rotation_per_frame: f64,
    pub max_scale_per_frame: f64,
    pub max_shear_per_frame: f64,
    pub rng_seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            seq_len: 41,
            max_translation_per_frame: 4.0,
            intensity_gain_range: (0.9, 1.1),
            intensity_bias_range: (-0.05, 0.05),
            noise_std: 0.02,
            motion_model: MotionModel::PerFrameRandomTranslation,
            smoothness: 0.8,
            max_rotation_per_frame: 0.01,
            max_scale_per_frame: 0.01,
            max_shear_per_frame: 0.005,
            rng_seed: 0,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.seq_len < 1 {
            return Err(invalid!("seq_len must be at least 1"));
        }
        if !(self.noise_std >= 0.0) {
            return Err(invalid!("noise_std must be non-negative"));
        }
        let (g0, g1) = self.intensity_gain_range;
        if !(g0 > 0.0 && g1 >= g0) {
            return Err(invalid!("gain range must be positive and ordered, got ({g0}, {g1})"));
        }
        let (b0, b1) = self.intensity_bias_range;
        if !(b1 >= b0) {
            return Err(invalid!("bias range must be ordered"));
        }
        if !(self.max_translation_per_frame >= 0.0) {
            return Err(invalid!("max_translation_per_frame must be non-negative"));
        }
        if !(0.0..1.0).contains(&self.smoothness) {
            return Err(invalid!("smoothness must lie in [0, 1)"));
        }
        Ok(())
    }
}

/// Everything needed to recompute labels independently of the pixels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MotionLog {
    /// Cumulative map from frame-0 coordinates to frame-`t` coordinates.
    pub cumulative: Vec<Affine>,
    pub gains: Vec<f64>,
    pub biases: Vec<f64>,
    pub config: SimConfig,
}

impl MotionLog {
    pub fn len(&self) -> usize {
        self.cumulative.len()
    }
    pub fn is_empty(&self) -> bool {
        self.cumulative.is_empty()
    }
}

/// Analytic trajectories for `points` under the logged motion. A point is
/// valid until it first leaves the `width × height` image.
pub fn trajectories_from_log(
    log: &MotionLog,
    points: &PointSet,
    width: usize,
    height: usize,
    source: TrajectorySource,
) -> TrajectorySet {
    let t = log.cumulative.len();
    let mut positions = Vec::with_capacity(points.len() * t);
    let mut valid = Vec::with_capacity(points.len() * t);
    let (wmax, hmax) = ((width - 1) as f64, (height - 1) as f64);
    for p in points.iter() {
        let mut inside = true;
        for a in &log.cumulative {
            let q = a.apply(*p);
            inside = inside && q.x >= 0.0 && q.y >= 0.0 && q.x <= wmax && q.y <= hmax;
            positions.push(q);
            valid.push(inside);
        }
    }
    TrajectorySet::new(points.len(), t, positions, valid, source)
        .expect("affine images of finite points are finite")
}

/// A synthetic sequence with its labels and motion record.
#[derive(Debug, Clone, PartialEq)]
pub struct SimulatedSequence {
    pub video: VideoSequence,
    pub trajectories: TrajectorySet,
    pub log: MotionLog,
}

fn check_keypoints(frame: &GrayImage, keypoints: &PointSet) -> Result<()> {
    if keypoints.is_empty() {
        return Err(invalid!("simulation needs at least one keypoint"));
    }
    for (i, p) in keypoints.iter().enumerate() {
        if !frame.contains(*p) {
            return Err(invalid!(
                "keypoint {i} at ({}, {}) lies outside the {}x{} frame",
                p.x,
                p.y,
                frame.width(),
                frame.height()
            ));
        }
    }
    Ok(())
}

/// Generate a sequence by moving `base_frame` with the configured motion.
pub fn simulate_sequence(
    base_frame: &GrayImage,
    keypoints: &PointSet,
    cfg: &SimConfig,
) -> Result<SimulatedSequence> {
    cfg.validate()?;
    if !base_frame.is_finite() {
        return Err(invalid!("base frame has non-finite intensities"));
    }
    check_keypoints(base_frame, keypoints)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    let cumulative = motion_path(base_frame.width(), base_frame.height(), keypoints, cfg, &mut rng);

    let noise = Normal::new(0.0, cfg.noise_std).map_err(|e| invalid!("noise: {e}"))?;
    let mut frames = Vec::with_capacity(cfg.seq_len);
    let mut gains = Vec::with_capacity(cfg.seq_len);
    let mut biases = Vec::with_capacity(cfg.seq_len);
    for a in &cumulative {
        let warped = if *a == Affine::IDENTITY { base_frame.clone() } else { warp_affine(base_frame, a)? };
        let gain = uniform(&mut rng, cfg.intensity_gain_range);
        let bias = uniform(&mut rng, cfg.intensity_bias_range);
        let mut frame = warped;
        for v in frame.data_mut() {
            let mut x = gain * *v + bias;
            if cfg.noise_std > 0.0 {
                x += noise.sample(&mut rng);
            }
            *v = x.clamp(0.0, 1.0);
        }
        frames.push(frame);
        gains.push(gain);
        biases.push(bias);
    }

    let log = MotionLog { cumulative, gains, biases, config: cfg.clone() };
    let trajectories = trajectories_from_log(
        &log,
        keypoints,
        base_frame.width(),
        base_frame.height(),
        TrajectorySource::Simulation,
    );
    let video = VideoSequence::new(format!("sim-{}", cfg.rng_seed), frames)?;
    Ok(SimulatedSequence { video, trajectories, log })
}

/// Static videos: each input frame repeated `cfg.seq_len` times (intensity
/// modulation and noise still applied per frame), constant trajectories.
pub fn make_zero_flow_batch(
    frames: &[GrayImage],
    keypoints: &PointSet,
    cfg: &SimConfig,
) -> Result<Vec<(VideoSequence, TrajectorySet)>> {
    if frames.is_empty() {
        return Err(invalid!("zero-flow batch needs at least one frame"));
    }
    frames
        .iter()
        .enumerate()
        .map(|(i, f)| {
            let c = SimConfig {
                motion_model: MotionModel::Zero,
                rng_seed: cfg.rng_seed.wrapping_add(i as u64),
                ..cfg.clone()
            };
            let s = simulate_sequence(f, keypoints, &c)?;
            Ok((s.video, s.trajectories))
        })
        .collect()
}

fn uniform<R: Rng + ?Sized>(rng: &mut R, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

fn motion_path<R: Rng + ?Sized>(
    width: usize,
    height: usize,
    keypoints: &PointSet,
    cfg: &SimConfig,
    rng: &mut R,
) -> Vec<Affine> {
    let mut path = Vec::with_capacity(cfg.seq_len);
    path.push(Affine::IDENTITY);
    let max_t = cfg.max_translation_per_frame;
    let (cx, cy) = ((width as f64 - 1.0) * 0.5, (height as f64 - 1.0) * 0.5);
    // Smooth-affine velocity state: rotation, log-scale x/y, shear, tx, ty.
    let mut vel = [0.0f64; 6];
    for _ in 1..cfg.seq_len {
        let prev = *path.last().unwrap();
        let step = match cfg.motion_model {
            MotionModel::Zero => Affine::IDENTITY,
            MotionModel::ConstantTranslation { dx, dy } => Affine::translation(dx, dy),
            MotionModel::PerFrameRandomTranslation => {
                // Uniform in the disc of radius max_t.
                let r = max_t * math::sqrt(rng.random_range(0.0..1.0));
                let th = rng.random_range(0.0..core::f64::consts::TAU);
                Affine::translation(r * math::cos(th), r * math::sin(th))
            }
            MotionModel::SmoothRandomAffine => {
                let scales = [
                    cfg.max_rotation_per_frame,
                    cfg.max_scale_per_frame,
                    cfg.max_scale_per_frame,
                    cfg.max_shear_per_frame,
                    max_t,
                    max_t,
                ];
                let a = cfg.smoothness;
                for (v, s) in vel.iter_mut().zip(scales) {
                    *v = a * *v + (1.0 - a) * rng.random_range(-s..s) * 2.0;
                }
                let [rot, sx, sy, sh, tx, ty] = vel;
                let (c, s) = (math::cos(rot), math::sin(rot));
                let (ex, ey) = (math::exp(sx), math::exp(sy));
                // R · [ex sh; 0 ey] about the image centre, then translate.
                let l = [[c * ex, c * sh - s * ey], [s * ex, s * sh + c * ey]];
                let about = Affine([
                    [l[0][0], l[0][1], cx - l[0][0] * cx - l[0][1] * cy + tx],
                    [l[1][0], l[1][1], cy - l[1][0] * cx - l[1][1] * cy + ty],
                ]);
                bound_step(&about, &prev, keypoints, width, height, max_t)
            }
        };
        path.push(step.compose(&prev));
    }
    path
}

/// Shrink `step` towards the identity until no tracked point or image corner
/// moves more than `max_disp` pixels.
fn bound_step(
    step: &Affine,
    prev: &Affine,
    keypoints: &PointSet,
    width: usize,
    height: usize,
    max_disp: f64,
) -> Affine {
    let corners = [
        Point::new(0.0, 0.0),
        Point::new((width - 1) as f64, 0.0),
        Point::new(0.0, (height - 1) as f64),
        Point::new((width - 1) as f64, (height - 1) as f64),
    ];
    let probes = keypoints.iter().map(|p| prev.apply(*p)).chain(corners);
    let worst = probes.map(|p| step.apply(p).dist(p)).fold(0.0f64, f64::max);
    if worst <= max_disp || worst == 0.0 {
        return *step;
    }
    let s = max_disp / worst;
    let mut m = step.0;
    for (r, row) in m.iter_mut().enumerate() {
        for (c, v) in row.iter_mut().enumerate() {
            let id = if r == c { 1.0 } else { 0.0 };
            *v = id + (*v - id) * s;
        }
    }
    Affine(m)
}

/// Speckle-like test texture: a Rayleigh-distributed speckle field over a
/// few bright and dark tissue regions, log-compressed into `[0, 1]`.
pub fn speckle_image(width: usize, height: usize, seed: u64) -> GrayImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5e_ed0f_5bec);
    let normal = Normal::new(0.0, 1.0).unwrap();
    let n = width * height;
    let re: Vec<f64> = (0..n).map(|_| normal.sample(&mut rng)).collect();
    let im: Vec<f64> = (0..n).map(|_| normal.sample(&mut rng)).collect();
    let re = gaussian_blur(&re, width, height, 1.0);
    let im = gaussian_blur(&im, width, height, 1.0);

    // Echogenicity: smooth background plus random elliptic inclusions.
    let mut echo = vec![0.6; n];
    let blobs = 3 + (rng.random_range(0..4usize));
    for _ in 0..blobs {
        let bx = rng.random_range(0.0..width as f64);
        let by = rng.random_range(0.0..height as f64);
        let rx = rng.random_range(0.08..0.3) * width as f64;
        let ry = rng.random_range(0.08..0.3) * height as f64;
        let level = rng.random_range(0.15..1.6);
        for y in 0..height {
            for x in 0..width {
                let dx = (x as f64 - bx) / rx;
                let dy = (y as f64 - by) / ry;
                let d2 = dx * dx + dy * dy;
                if d2 < 1.0 {
                    let k = y * width + x;
                    let soft = 1.0 - d2 * d2;
                    echo[k] = echo[k] * (1.0 - soft) + level * soft;
                }
            }
        }
    }
    let mut amp: Vec<f64> = (0..n)
        .map(|k| math::ln(1.0 + 4.0 * echo[k] * math::sqrt(re[k] * re[k] + im[k] * im[k])))
        .collect();
    let max = amp.iter().cloned().fold(f64::MIN, f64::max);
    let min = amp.iter().cloned().fold(f64::MAX, f64::min);
    let span = (max - min).max(1e-12);
    amp.iter_mut().for_each(|v| *v = 0.05 + 0.9 * (*v - min) / span);
    GrayImage::new(width, height, amp).expect("dimensions match")
}

/// Separable Gaussian blur with border clamping.
pub fn gaussian_blur(src: &[f64], width: usize, height: usize, sigma: f64) -> Vec<f64> {
    let radius = math::ceil(3.0 * sigma).max(1.0) as isize;
    let kernel: Vec<f64> = (-radius..=radius)
        .map(|i| math::exp(-((i * i) as f64) / (2.0 * sigma * sigma)))
        .collect();
    let norm: f64 = kernel.iter().sum();
    let kernel: Vec<f64> = kernel.iter().map(|k| k / norm).collect();
    let clamp = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    let mut tmp = vec![0.0; src.len()];
    for y in 0..height {
        for x in 0..width {
            let mut acc = 0.0;
            for (j, k) in kernel.iter().enumerate() {
                acc += k * src[y * width + clamp(x as isize + j as isize - radius, width)];
            }
            tmp[y * width + x] = acc;
        }
    }
    let mut out = vec![0.0; src.len()];
    for y in 0..height {
        for x in 0..width {
            let mut acc = 0.0;
            for (j, k) in kernel.iter().enumerate() {
                acc += k * tmp[clamp(y as isize + j as isize - radius, height) * width + x];
            }
            out[y * width + x] = acc;
        }
    }
    out
}

/// Human-readable summary of a motion log entry, for sidecar files.
pub fn describe_affine(a: &Affine) -> String {
    let m = &a.0;
    format!(
        "[[{}, {}, {}], [{}, {}, {}]]",
        m[0][0], m[0][1], m[0][2], m[1][0], m[1][1], m[1][2]
    )
}
