//! Reference trackers: normalized cross-correlation template matching and
//! the zero-motion tracker.
//!
//! NCC scores for every candidate shift share one pair of summed-area tables
//! for the window means and energies; only the numerator differs between
//! the direct and the FFT path.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::datamodel::{GrayImage, Point, PointSet, TrajectorySet, TrajectorySource, VideoSequence};
use crate::error::{invalid, Result};
use crate::math;

/// How NCC numerators are computed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NccMethod {
    Direct,
    Fft,
    /// Whichever path the operation-count model predicts is cheaper.
    Auto,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NccConfig {
    /// Template side (odd).
    pub patch_size: usize,
    /// Largest displacement searched per axis, pixels.
    pub search_radius: usize,
    /// Parabolic refinement of the integer peak.
    pub subpixel: bool,
    /// Re-extract the template from the previous frame every step.
    pub update_template: bool,
    pub method: NccMethod,
    /// Cost of one FFT unit (`N² log₂ N²` for an `N × N` transform) relative
    /// to one direct multiply-add. Measured by the `ncc_threshold` example.
    pub fft_cost_ratio: f64,
}

impl Default for NccConfig {
    fn default() -> Self {
        NccConfig {
            patch_size: 17,
            search_radius: 32,
            subpixel: false,
            update_template: true,
            method: NccMethod::Auto,
            fft_cost_ratio: 16.0,
        }
    }
}

impl NccConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch_size < 3 || self.patch_size.is_multiple_of(2) {
            return Err(invalid!("NCC patch size must be odd and ≥ 3, got {}", self.patch_size));
        }
        if !(self.fft_cost_ratio > 0.0) {
            return Err(invalid!("fft_cost_ratio must be positive"));
        }
        Ok(())
    }

    /// Whether a `w × h` search region is matched through the FFT.
    pub fn use_fft(&self, w: usize, h: usize) -> bool {
        match self.method {
            NccMethod::Direct => false,
            NccMethod::Fft => true,
            NccMethod::Auto => {
                let p = self.patch_size;
                if w < p || h < p {
                    return false;
                }
                let direct = (p * p * (w - p + 1) * (h - p + 1)) as f64;
                let n = (w.next_power_of_two() * h.next_power_of_two()) as f64;
                direct > self.fft_cost_ratio * n * math::log2(n)
            }
        }
    }
}

/// Variance below which a patch counts as flat.
const FLAT_VARIANCE: f64 = 1e-12;

/// Plain NCC of two equally sized patches; `None` if either is flat.
pub fn ncc(a: &[f64], b: &[f64]) -> Option<f64> {
    assert_eq!(a.len(), b.len());
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut num, mut va, mut vb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        num += dx * dy;
        va += dx * dx;
        vb += dy * dy;
    }
    if va <= FLAT_VARIANCE * n || vb <= FLAT_VARIANCE * n {
        return None;
    }
    Some((num / math::sqrt(va * vb)).clamp(-1.0, 1.0))
}

/// Square patch with top-left corner `(x0, y0)`; `None` if it leaves the frame.
pub fn patch_at(frame: &GrayImage, x0: isize, y0: isize, size: usize) -> Option<Vec<f64>> {
    if x0 < 0 || y0 < 0 || x0 as usize + size > frame.width() || y0 as usize + size > frame.height() {
        return None;
    }
    let (x0, y0) = (x0 as usize, y0 as usize);
    let mut out = Vec::with_capacity(size * size);
    for y in y0..y0 + size {
        out.extend_from_slice(&frame.data()[y * frame.width() + x0..y * frame.width() + x0 + size]);
    }
    Some(out)
}

/// Summed-area tables of a `w × h` region and its squares, `(w+1) × (h+1)`.
struct Integral {
    w1: usize,
    s: Vec<f64>,
    s2: Vec<f64>,
}

impl Integral {
    fn new(region: &[f64], w: usize, h: usize) -> Self {
        let w1 = w + 1;
        let mut s = vec![0.0; w1 * (h + 1)];
        let mut s2 = vec![0.0; w1 * (h + 1)];
        for y in 0..h {
            let (mut row, mut row2) = (0.0, 0.0);
            for x in 0..w {
                let v = region[y * w + x];
                row += v;
                row2 += v * v;
                s[(y + 1) * w1 + x + 1] = s[y * w1 + x + 1] + row;
                s2[(y + 1) * w1 + x + 1] = s2[y * w1 + x + 1] + row2;
            }
        }
        Integral { w1, s, s2 }
    }

    /// Sum and sum of squares over `[x, x+k) × [y, y+k)`.
    fn window(&self, x: usize, y: usize, k: usize) -> (f64, f64) {
        let at = |t: &[f64], xx: usize, yy: usize| t[yy * self.w1 + xx];
        let f = |t: &[f64]| at(t, x + k, y + k) - at(t, x, y + k) - at(t, x + k, y) + at(t, x, y);
        (f(&self.s), f(&self.s2))
    }
}

/// NCC score map of `template` (`p × p`) over every placement inside a
/// `w × h` region: `(w − p + 1) × (h − p + 1)` scores, `None` where flat.
/// Returns `None` if the template itself is flat.
pub fn ncc_map(template: &[f64], p: usize, region: &[f64], w: usize, h: usize, fft: bool) -> Option<Vec<Option<f64>>> {
    let n = (p * p) as f64;
    let mean_t = template.iter().sum::<f64>() / n;
    let tz: Vec<f64> = template.iter().map(|v| v - mean_t).collect();
    let var_t: f64 = tz.iter().map(|v| v * v).sum();
    if var_t <= FLAT_VARIANCE * n {
        return None;
    }
    let (ow, oh) = (w - p + 1, h - p + 1);
    let num = if fft { numerators_fft(&tz, p, region, w, h) } else { numerators_direct(&tz, p, region, w, h) };
    let integral = Integral::new(region, w, h);
    let mut out = Vec::with_capacity(ow * oh);
    for y in 0..oh {
        for x in 0..ow {
            let (s, s2) = integral.window(x, y, p);
            let var_i = s2 - s * s / n;
            if var_i <= FLAT_VARIANCE * n {
                out.push(None);
            } else {
                out.push(Some((num[y * ow + x] / math::sqrt(var_t * var_i)).clamp(-1.0, 1.0)));
            }
        }
    }
    Some(out)
}

/// `Σ_u tz(u) · region(d + u)` for every valid shift `d`.
fn numerators_direct(tz: &[f64], p: usize, region: &[f64], w: usize, h: usize) -> Vec<f64> {
    let (ow, oh) = (w - p + 1, h - p + 1);
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            let mut acc = 0.0;
            for v in 0..p {
                let row = &region[(y + v) * w + x..(y + v) * w + x + p];
                let trow = &tz[v * p..(v + 1) * p];
                acc += row.iter().zip(trow).map(|(a, b)| a * b).sum::<f64>();
            }
            out[y * ow + x] = acc;
        }
    }
    out
}

fn numerators_fft(tz: &[f64], p: usize, region: &[f64], w: usize, h: usize) -> Vec<f64> {
    let nx = w.next_power_of_two();
    let ny = h.next_power_of_two();
    let mut a = vec![Complex::ZERO; nx * ny];
    let mut b = vec![Complex::ZERO; nx * ny];
    for y in 0..h {
        for x in 0..w {
            a[y * nx + x].re = region[y * w + x];
        }
    }
    for y in 0..p {
        for x in 0..p {
            b[y * nx + x].re = tz[y * p + x];
        }
    }
    fft2(&mut a, nx, ny, false);
    fft2(&mut b, nx, ny, false);
    // Cross-correlation: A · conj(B).
    for (x, y) in a.iter_mut().zip(&b) {
        *x = x.mul(y.conj());
    }
    fft2(&mut a, nx, ny, true);
    let (ow, oh) = (w - p + 1, h - p + 1);
    let scale = 1.0 / (nx * ny) as f64;
    let mut out = Vec::with_capacity(ow * oh);
    for y in 0..oh {
        for x in 0..ow {
            out.push(a[y * nx + x].re * scale);
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Complex {
    re: f64,
    im: f64,
}

impl Complex {
    const ZERO: Complex = Complex { re: 0.0, im: 0.0 };
    fn mul(self, o: Complex) -> Complex {
        Complex { re: self.re * o.re - self.im * o.im, im: self.re * o.im + self.im * o.re }
    }
    fn conj(self) -> Complex {
        Complex { re: self.re, im: -self.im }
    }
}

/// In-place iterative radix-2 FFT of `n` points spaced `stride` apart.
fn fft1(buf: &mut [Complex], offset: usize, stride: usize, n: usize, inverse: bool, twiddles: &[Complex]) {
    let idx = |i: usize| offset + i * stride;
    let bits = n.trailing_zeros();
    for i in 0..n {
        let j = i.reverse_bits() >> (usize::BITS - bits);
        if i < j {
            buf.swap(idx(i), idx(j));
        }
    }
    let mut len = 2;
    while len <= n {
        let step = n / len;
        for start in (0..n).step_by(len) {
            for k in 0..len / 2 {
                let mut w = twiddles[k * step];
                if inverse {
                    w = w.conj();
                }
                let u = buf[idx(start + k)];
                let v = buf[idx(start + k + len / 2)].mul(w);
                buf[idx(start + k)] = Complex { re: u.re + v.re, im: u.im + v.im };
                buf[idx(start + k + len / 2)] = Complex { re: u.re - v.re, im: u.im - v.im };
            }
        }
        len <<= 1;
    }
}

fn twiddles(n: usize) -> Vec<Complex> {
    (0..n / 2)
        .map(|k| {
            let a = -2.0 * core::f64::consts::PI * k as f64 / n as f64;
            Complex { re: math::cos(a), im: math::sin(a) }
        })
        .collect()
}

/// Unnormalised 2-D FFT of an `nx × ny` row-major buffer (both powers of two).
fn fft2(buf: &mut [Complex], nx: usize, ny: usize, inverse: bool) {
    let tx = twiddles(nx);
    for y in 0..ny {
        fft1(buf, y * nx, 1, nx, inverse, &tx);
    }
    let ty = twiddles(ny);
    for x in 0..nx {
        fft1(buf, x, nx, ny, inverse, &ty);
    }
}

/// Best placement in a score map: highest score, ties to the shift closest
/// to `centre`, then row-major order.
fn argmax(scores: &[Option<f64>], ow: usize, centre: (usize, usize)) -> Option<(usize, usize, f64)> {
    let mut best: Option<(usize, usize, f64, usize)> = None;
    for (i, s) in scores.iter().enumerate() {
        let Some(s) = *s else { continue };
        let (x, y) = (i % ow, i / ow);
        let d = x.abs_diff(centre.0).pow(2) + y.abs_diff(centre.1).pow(2);
        let better = match best {
            None => true,
            Some((_, _, bs, bd)) => s > bs || (s == bs && d < bd),
        };
        if better {
            best = Some((x, y, s, d));
        }
    }
    best.map(|(x, y, s, _)| (x, y, s))
}

fn parabolic(l: Option<f64>, c: f64, r: Option<f64>) -> f64 {
    match (l, r) {
        (Some(l), Some(r)) => {
            let den = l - 2.0 * c + r;
            if den < 0.0 { (0.5 * (l - r) / den).clamp(-0.5, 0.5) } else { 0.0 }
        }
        _ => 0.0,
    }
}

/// Outcome of matching one template in one frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum MatchResult {
    /// Displacement of the template's content and its NCC score.
    Found { dx: f64, dy: f64, score: f64 },
    FlatTemplate,
    /// Template or search window left the frame.
    OutOfBounds,
}

/// Match the `p × p` template centred on integer pixel `(cx, cy)` of `prev`
/// inside `cur`, searching `±radius` around the same pixel.
pub fn match_template(template: &[f64], cx: isize, cy: isize, cur: &GrayImage, cfg: &NccConfig) -> MatchResult {
    let p = cfg.patch_size;
    let half = (p / 2) as isize;
    let r = cfg.search_radius as isize;
    // Clip the search region to the frame.
    let x0 = (cx - half - r).max(0);
    let y0 = (cy - half - r).max(0);
    let x1 = (cx + half + r + 1).min(cur.width() as isize);
    let y1 = (cy + half + r + 1).min(cur.height() as isize);
    if x1 - x0 < p as isize || y1 - y0 < p as isize {
        return MatchResult::OutOfBounds;
    }
    let (w, h) = ((x1 - x0) as usize, (y1 - y0) as usize);
    let mut region = Vec::with_capacity(w * h);
    for y in y0 as usize..y1 as usize {
        region.extend_from_slice(&cur.data()[y * cur.width() + x0 as usize..y * cur.width() + x1 as usize]);
    }
    let Some(scores) = ncc_map(template, p, &region, w, h, cfg.use_fft(w, h)) else {
        return MatchResult::FlatTemplate;
    };
    let ow = w - p + 1;
    // Placement whose top-left corresponds to zero displacement.
    let centre = ((cx - half - x0) as usize, (cy - half - y0) as usize);
    let Some((bx, by, score)) = argmax(&scores, ow, centre) else {
        return MatchResult::OutOfBounds;
    };
    let mut dx = bx as f64 - centre.0 as f64;
    let mut dy = by as f64 - centre.1 as f64;
    if cfg.subpixel {
        let oh = h - p + 1;
        let at = |x: isize, y: isize| {
            if x < 0 || y < 0 || x as usize >= ow || y as usize >= oh { None } else { scores[y as usize * ow + x as usize] }
        };
        let (bxi, byi) = (bx as isize, by as isize);
        dx += parabolic(at(bxi - 1, byi), score, at(bxi + 1, byi));
        dy += parabolic(at(bxi, byi - 1), score, at(bxi, byi + 1));
    }
    MatchResult::Found { dx, dy, score }
}

/// Streaming template tracker: one step per incoming frame.
#[derive(Debug, Clone)]
pub struct NccTracker {
    cfg: NccConfig,
    prev: GrayImage,
    positions: Vec<Point>,
    alive: Vec<bool>,
    /// Frozen templates when `update_template` is off.
    fixed: Vec<Option<Vec<f64>>>,
}

impl NccTracker {
    pub fn new(frame0: &GrayImage, points: &PointSet, cfg: &NccConfig) -> Result<Self> {
        cfg.validate()?;
        if points.is_empty() {
            return Err(invalid!("cannot track an empty point set"));
        }
        let half = (cfg.patch_size / 2) as isize;
        let fixed = if cfg.update_template {
            alloc::vec![None; points.len()]
        } else {
            points
                .iter()
                .map(|p| {
                    let (cx, cy) = (math::round(p.x) as isize, math::round(p.y) as isize);
                    patch_at(frame0, cx - half, cy - half, cfg.patch_size)
                })
                .collect()
        };
        Ok(NccTracker {
            cfg: cfg.clone(),
            prev: frame0.clone(),
            positions: points.as_slice().to_vec(),
            alive: alloc::vec![true; points.len()],
            fixed,
        })
    }

    pub fn positions(&self) -> &[Point] {
        &self.positions
    }

    pub fn alive(&self) -> &[bool] {
        &self.alive
    }

    /// Match every live point into `frame`. A point whose template becomes
    /// flat or leaves the frame is marked lost and keeps its last position.
    pub fn step(&mut self, frame: &GrayImage) {
        let p = self.cfg.patch_size;
        let half = (p / 2) as isize;
        for i in 0..self.positions.len() {
            if !self.alive[i] {
                continue;
            }
            let pos = self.positions[i];
            let (cx, cy) = (math::round(pos.x) as isize, math::round(pos.y) as isize);
            let template = if self.cfg.update_template {
                patch_at(&self.prev, cx - half, cy - half, p)
            } else {
                self.fixed[i].clone()
            };
            let result = match template {
                Some(tpl) => match_template(&tpl, cx, cy, frame, &self.cfg),
                None => MatchResult::OutOfBounds,
            };
            match result {
                MatchResult::Found { dx, dy, .. } => self.positions[i] = pos.offset(dx, dy),
                MatchResult::FlatTemplate | MatchResult::OutOfBounds => self.alive[i] = false,
            }
        }
        if self.cfg.update_template {
            self.prev = frame.clone();
        }
    }
}

/// Template tracking of every point through `video`; see [`NccTracker`].
pub fn ncc_track(video: &VideoSequence, points: &PointSet, cfg: &NccConfig) -> Result<TrajectorySet> {
    let mut tracker = NccTracker::new(video.frame(0), points, cfg)?;
    let mut out = TrajectorySet::constant(points, video.len(), TrajectorySource::Model);
    for f in 1..video.len() {
        tracker.step(video.frame(f));
        for (i, (&p, &a)) in tracker.positions().iter().zip(tracker.alive()).enumerate() {
            out.set(i, f, p, a);
        }
    }
    Ok(out)
}

/// Every point stays where it started.
pub fn zero_motion_track(video: &VideoSequence, points: &PointSet) -> TrajectorySet {
    TrajectorySet::constant(points, video.len(), TrajectorySource::Model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simulator::{simulate_sequence, speckle_image, MotionModel, SimConfig};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn translated(base: &GrayImage, dx: isize, dy: isize, frames: usize, w: usize) -> VideoSequence {
        // Integer shifts are exact crops of a larger base image.
        let frames = (0..frames)
            .map(|f| {
                GrayImage::from_fn(w, w, |x, y| {
                    let sx = (x as isize - dx * f as isize + 100) as usize;
                    let sy = (y as isize - dy * f as isize + 100) as usize;
                    base.get(sx, sy)
                })
            })
            .collect();
        VideoSequence::new("shift", frames).unwrap()
    }

    #[test]
    fn ncc_of_patch_with_itself_and_negative() {
        let a: Vec<f64> = (0..25).map(|i| ((i * 7) % 11) as f64).collect();
        assert!((ncc(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        let neg: Vec<f64> = a.iter().map(|v| -v).collect();
        assert!((ncc(&a, &neg).unwrap() + 1.0).abs() < 1e-12);
        assert!(ncc(&a, &[3.0; 25]).is_none());
    }

    #[test]
    fn fft_and_direct_maps_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..10 {
            let (w, h, p) = (rng.random_range(9..40), rng.random_range(9..40), 7);
            let region: Vec<f64> = (0..w * h).map(|_| rng.random_range(0.0..1.0)).collect();
            let tpl: Vec<f64> = (0..p * p).map(|_| rng.random_range(0.0..1.0)).collect();
            let a = ncc_map(&tpl, p, &region, w, h, false).unwrap();
            let b = ncc_map(&tpl, p, &region, w, h, true).unwrap();
            for (x, y) in a.iter().zip(&b) {
                assert!((x.unwrap() - y.unwrap()).abs() < 1e-9);
            }
            // Direct-formula oracle at a random placement.
            let (ox, oy) = (rng.random_range(0..w - p + 1), rng.random_range(0..h - p + 1));
            let mut win = Vec::new();
            for yy in oy..oy + p {
                win.extend_from_slice(&region[yy * w + ox..yy * w + ox + p]);
            }
            assert!((a[oy * (w - p + 1) + ox].unwrap() - ncc(&tpl, &win).unwrap()).abs() < 1e-9);
        }
    }

    #[test]
    fn fft_round_trip() {
        let mut buf: Vec<Complex> = (0..32).map(|i| Complex { re: i as f64, im: -(i as f64) / 3.0 }).collect();
        let orig = buf.clone();
        fft2(&mut buf, 8, 4, false);
        fft2(&mut buf, 8, 4, true);
        for (a, b) in buf.iter().zip(&orig) {
            assert!((a.re / 32.0 - b.re).abs() < 1e-12 && (a.im / 32.0 - b.im).abs() < 1e-12);
        }
    }

    #[test]
    fn integer_translation_recovered_exactly() {
        let base = speckle_image(320, 320, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for case in 0..12 {
            let (dx, dy) = (rng.random_range(-4i32..=4) as isize, rng.random_range(-4i32..=4) as isize);
            let v = translated(&base, dx, dy, 6, 96);
            let pts = PointSet::new(vec![Point::new(48.0, 48.0), Point::new(40.0, 55.0)]).unwrap();
            for method in [NccMethod::Direct, NccMethod::Fft] {
                let cfg = NccConfig { search_radius: 8, method, ..Default::default() };
                let tr = ncc_track(&v, &pts, &cfg).unwrap();
                for f in 0..6 {
                    for i in 0..2 {
                        let want = pts.get(i).offset((dx * f as isize) as f64, (dy * f as isize) as f64);
                        assert_eq!(tr.get(i, f), want, "case {case} {method:?} frame {f}");
                        assert!(tr.is_valid(i, f));
                    }
                }
            }
        }
    }

    #[test]
    fn static_and_constant_videos() {
        let f = speckle_image(64, 64, 6);
        let v = VideoSequence::new("s", vec![f; 5]).unwrap();
        let pts = PointSet::new(vec![Point::new(30.0, 30.0), Point::new(20.0, 41.0)]).unwrap();
        let tr = ncc_track(&v, &pts, &NccConfig::default()).unwrap();
        assert_eq!(tr, zero_motion_track(&v, &pts));
        let flat = VideoSequence::new("c", vec![GrayImage::filled(64, 64, 0.4); 4]).unwrap();
        let tr = ncc_track(&flat, &pts, &NccConfig::default()).unwrap();
        for f in 1..4 {
            assert!(!tr.is_valid(0, f) && !tr.is_valid(1, f));
        }
    }

    #[test]
    fn gain_and_bias_do_not_change_tracks() {
        let base = speckle_image(64, 64, 7);
        let pts = PointSet::new(vec![Point::new(30.0, 31.0)]).unwrap();
        let cfg = SimConfig {
            seq_len: 6,
            motion_model: MotionModel::PerFrameRandomTranslation,
            noise_std: 0.0,
            rng_seed: 2,
            ..Default::default()
        };
        let sim = simulate_sequence(&base, &pts, &cfg).unwrap();
        let mapped = VideoSequence::new(
            "m",
            sim.video.frames().iter().map(|f| GrayImage::from_fn(64, 64, |x, y| 1.7 * f.get(x, y) + 0.3)).collect(),
        )
        .unwrap();
        let a = ncc_track(&sim.video, &pts, &NccConfig::default()).unwrap();
        let b = ncc_track(&mapped, &pts, &NccConfig::default()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn subpixel_refines_half_pixel_shift() {
        let base = speckle_image(200, 200, 8);
        let frames: Vec<GrayImage> = (0..2)
            .map(|f| GrayImage::from_fn(80, 80, |x, y| {
                let s = f as f64 * 0.5;
                let xf = x as f64 + 60.0 - s;
                let (x0, fx) = (xf.floor() as usize, xf - xf.floor());
                (1.0 - fx) * base.get(x0, y + 60) + fx * base.get(x0 + 1, y + 60)
            }))
            .collect();
        let v = VideoSequence::new("h", frames).unwrap();
        let pts = PointSet::new(vec![Point::new(40.0, 40.0)]).unwrap();
        let cfg = NccConfig { subpixel: true, search_radius: 4, ..Default::default() };
        let got = ncc_track(&v, &pts, &cfg).unwrap().get(0, 1);
        assert!((got.x - 40.5).abs() < 0.2, "{got:?}");
        assert!((got.y - 40.0).abs() < 0.1);
    }

    #[test]
    fn no_update_keeps_first_template() {
        let base = speckle_image(320, 320, 9);
        let v = translated(&base, 2, 1, 5, 96);
        let pts = PointSet::new(vec![Point::new(48.0, 48.0)]).unwrap();
        let cfg = NccConfig { update_template: false, search_radius: 6, ..Default::default() };
        let tr = ncc_track(&v, &pts, &cfg).unwrap();
        assert_eq!(tr.get(0, 4), Point::new(56.0, 52.0));
    }

    #[test]
    fn zero_motion_closed_form() {
        let base = speckle_image(320, 320, 10);
        let v = translated(&base, 3, 0, 20, 100);
        let pts = PointSet::new(vec![Point::new(10.0, 50.0)]).unwrap();
        let z = zero_motion_track(&v, &pts);
        for f in 0..20 {
            assert_eq!(z.get(0, f), pts.get(0));
            assert_eq!(z.get(0, f).dist(pts.get(0).offset(3.0 * f as f64, 0.0)), 3.0 * f as f64);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn scores_bounded(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let region: Vec<f64> = (0..20 * 20).map(|_| rng.random_range(0.0..1.0)).collect();
            let tpl: Vec<f64> = (0..25).map(|_| rng.random_range(0.0..1.0)).collect();
            for s in ncc_map(&tpl, 5, &region, 20, 20, seed % 2 == 0).unwrap().into_iter().flatten() {
                prop_assert!((-1.0..=1.0).contains(&s));
            }
        }
    }
}
