//! Keypoint detection behind a detector-agnostic interface.
//!
//! The `sift` detector is a difference-of-Gaussians extremum detector with
//! the usual sub-pixel refinement, contrast test (`|D| · layers <
//! contrast_threshold` rejects) and principal-curvature edge test
//! (`tr² · r ≥ (r + 1)² · det` rejects). Intensities are taken in `[0, 1]`.
//! Only locations and responses are produced; no orientations or descriptors.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::datamodel::{GrayImage, Point, PointSet};
use crate::math;
use crate::simulator::gaussian_blur;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DetectorKind {
    Sift,
    Grid,
    Manual,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectorConfig {
    pub detector: DetectorKind,
    pub contrast_threshold: f64,
    pub edge_threshold: f64,
    pub max_points: Option<usize>,
    /// Cell size of the `grid` detector, pixels.
    pub grid_stride: usize,
    /// Points returned by the `manual` detector.
    pub manual_points: Vec<Point>,
    /// Points closer than this to the border are dropped.
    pub border_margin: f64,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        DetectorConfig {
            detector: DetectorKind::Sift,
            contrast_threshold: 0.08,
            edge_threshold: 4.0,
            max_points: None,
            grid_stride: 32,
            manual_points: Vec::new(),
            border_margin: 0.0,
        }
    }
}

/// Detected point with its detector response.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Keypoint {
    pub point: Point,
    pub response: f64,
}

/// Detect points on `frame`. An empty result is valid (e.g. a constant
/// image); callers decide whether to skip such frames.
pub fn detect(frame: &GrayImage, cfg: &DetectorConfig) -> PointSet {
    let mut kps: Vec<Keypoint> = match cfg.detector {
        DetectorKind::Sift => sift_keypoints(frame, cfg.contrast_threshold, cfg.edge_threshold),
        DetectorKind::Grid => grid_points(frame.width(), frame.height(), cfg.grid_stride)
            .into_iter()
            .map(|point| Keypoint { point, response: 0.0 })
            .collect(),
        DetectorKind::Manual => {
            cfg.manual_points.iter().map(|&point| Keypoint { point, response: 0.0 }).collect()
        }
    };
    if cfg.detector == DetectorKind::Sift {
        // Strongest first; position breaks ties so truncation is reproducible.
        kps.sort_by(|a, b| {
            b.response
                .total_cmp(&a.response)
                .then(a.point.y.total_cmp(&b.point.y))
                .then(a.point.x.total_cmp(&b.point.x))
        });
    }
    let pts = PointSet::from_points_unchecked(kps.into_iter().map(|k| k.point).collect());
    let mut pts = filter_in_bounds(&pts, frame.height(), frame.width(), cfg.border_margin);
    if let Some(cap) = cfg.max_points {
        let mut v = pts.into_vec();
        v.truncate(cap);
        pts = PointSet::from_points_unchecked(v);
    }
    pts
}

/// Keep points with `margin ≤ x < W − margin` and `margin ≤ y < H − margin`.
pub fn filter_in_bounds(pts: &PointSet, height: usize, width: usize, margin: f64) -> PointSet {
    let (w, h) = (width as f64, height as f64);
    PointSet::from_points_unchecked(
        pts.iter()
            .copied()
            .filter(|p| p.x >= margin && p.x < w - margin && p.y >= margin && p.y < h - margin)
            .collect(),
    )
}

/// Centres of `stride × stride` cells tiling the image.
pub fn grid_points(width: usize, height: usize, stride: usize) -> Vec<Point> {
    let stride = stride.max(1);
    let half = (stride as f64 - 1.0) * 0.5;
    let mut out = Vec::new();
    for gy in 0..height / stride {
        for gx in 0..width / stride {
            out.push(Point::new((gx * stride) as f64 + half, (gy * stride) as f64 + half));
        }
    }
    out
}

const LAYERS: usize = 3;
const SIGMA: f64 = 1.6;
const INPUT_SIGMA: f64 = 0.5;
const BORDER: usize = 5;
const MAX_INTERP_STEPS: usize = 5;

struct Plane {
    w: usize,
    h: usize,
    data: Vec<f64>,
}

impl Plane {
    #[inline]
    fn at(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.w + x]
    }
}

/// Difference-of-Gaussians keypoints on a 2× upsampled base image.
pub fn sift_keypoints(frame: &GrayImage, contrast_threshold: f64, edge_threshold: f64) -> Vec<Keypoint> {
    let (w0, h0) = (frame.width(), frame.height());
    if w0 < 8 || h0 < 8 {
        return Vec::new();
    }
    // Base: bilinear 2× upsample so that base(i) = frame(i / 2).
    let (bw, bh) = (2 * w0, 2 * h0);
    let mut base = vec![0.0; bw * bh];
    for y in 0..bh {
        for x in 0..bw {
            let tap = crate::sampling::BilinearTap::new(x as f64 * 0.5, y as f64 * 0.5, w0, h0);
            base[y * bw + x] = tap.sample(frame.data(), w0);
        }
    }
    let sig_diff = math::sqrt((SIGMA * SIGMA - 4.0 * INPUT_SIGMA * INPUT_SIGMA).max(0.01));
    let base = gaussian_blur(&base, bw, bh, sig_diff);

    let min_side = bw.min(bh) as f64;
    let octaves = ((math::ln(min_side) / core::f64::consts::LN_2) as usize).saturating_sub(2).max(1);
    let k = math::powf(2.0, 1.0 / LAYERS as f64);
    let mut incr = vec![SIGMA];
    for i in 1..LAYERS + 3 {
        let prev = math::powf(k, (i - 1) as f64) * SIGMA;
        let total = prev * k;
        incr.push(math::sqrt(total * total - prev * prev));
    }

    let prelim = 0.5 * contrast_threshold / LAYERS as f64;
    let mut out = Vec::new();
    let mut octave_base = Plane { w: bw, h: bh, data: base };
    for o in 0..octaves {
        if octave_base.w < 2 * BORDER + 3 || octave_base.h < 2 * BORDER + 3 {
            break;
        }
        let (w, h) = (octave_base.w, octave_base.h);
        let mut gauss = vec![octave_base];
        for s in incr.iter().skip(1) {
            let next = gaussian_blur(&gauss.last().unwrap().data, w, h, *s);
            gauss.push(Plane { w, h, data: next });
        }
        let dog: Vec<Plane> = gauss
            .windows(2)
            .map(|p| Plane { w, h, data: p[1].data.iter().zip(&p[0].data).map(|(a, b)| a - b).collect() })
            .collect();

        for layer in 1..=LAYERS {
            for y in BORDER..h - BORDER {
                for x in BORDER..w - BORDER {
                    let v = dog[layer].at(x, y);
                    if v.abs() <= prelim || !is_extremum(&dog, layer, x, y, v) {
                        continue;
                    }
                    if let Some(kp) =
                        refine(&dog, layer, x, y, contrast_threshold, edge_threshold)
                    {
                        let scale = math::powf(2.0, o as f64) * 0.5;
                        out.push(Keypoint {
                            point: Point::new(kp.0 * scale, kp.1 * scale),
                            response: kp.2,
                        });
                    }
                }
            }
        }

        // Next octave from the layer with twice the base blur.
        let src = &gauss[LAYERS];
        let (nw, nh) = (w / 2, h / 2);
        let mut data = Vec::with_capacity(nw * nh);
        for y in 0..nh {
            for x in 0..nw {
                data.push(src.at(2 * x, 2 * y));
            }
        }
        octave_base = Plane { w: nw, h: nh, data };
    }

    out.sort_by(|a, b| a.point.y.total_cmp(&b.point.y).then(a.point.x.total_cmp(&b.point.x)));
    out.dedup_by(|a, b| (a.point.x - b.point.x).abs() < 1e-9 && (a.point.y - b.point.y).abs() < 1e-9);
    out
}

fn is_extremum(dog: &[Plane], layer: usize, x: usize, y: usize, v: f64) -> bool {
    let mut is_max = v > 0.0;
    let mut is_min = v < 0.0;
    for plane in &dog[layer - 1..=layer + 1] {
        for yy in y - 1..=y + 1 {
            for xx in x - 1..=x + 1 {
                let u = plane.at(xx, yy);
                if core::ptr::eq(plane, &dog[layer]) && xx == x && yy == y {
                    continue;
                }
                if u > v {
                    is_max = false;
                }
                if u < v {
                    is_min = false;
                }
            }
        }
        if !is_max && !is_min {
            return false;
        }
    }
    is_max || is_min
}

/// Quadratic sub-pixel refinement; returns `(x, y, |contrast|)` in octave
/// coordinates or `None` when rejected.
fn refine(
    dog: &[Plane],
    mut layer: usize,
    mut x: usize,
    mut y: usize,
    contrast_threshold: f64,
    edge_threshold: f64,
) -> Option<(f64, f64, f64)> {
    let (w, h) = (dog[0].w, dog[0].h);
    let mut offset = [0.0f64; 3];
    let mut converged = false;
    for _ in 0..MAX_INTERP_STEPS {
        let (g, hess) = derivatives(dog, layer, x, y);
        offset = solve3(&hess, &g)?;
        offset.iter_mut().for_each(|v| *v = -*v);
        if offset.iter().all(|v| v.abs() < 0.5) {
            converged = true;
            break;
        }
        if offset.iter().any(|v| v.abs() > 1e6) {
            return None;
        }
        let nx = x as isize + math::round(offset[0]) as isize;
        let ny = y as isize + math::round(offset[1]) as isize;
        let nl = layer as isize + math::round(offset[2]) as isize;
        if nl < 1
            || nl > LAYERS as isize
            || nx < BORDER as isize
            || nx >= (w - BORDER) as isize
            || ny < BORDER as isize
            || ny >= (h - BORDER) as isize
        {
            return None;
        }
        x = nx as usize;
        y = ny as usize;
        layer = nl as usize;
    }
    if !converged {
        return None;
    }
    let (g, _) = derivatives(dog, layer, x, y);
    let contrast = dog[layer].at(x, y) + 0.5 * (g[0] * offset[0] + g[1] * offset[1] + g[2] * offset[2]);
    if contrast.abs() * (LAYERS as f64) < contrast_threshold {
        return None;
    }
    let d = &dog[layer];
    let v2 = 2.0 * d.at(x, y);
    let dxx = d.at(x + 1, y) + d.at(x - 1, y) - v2;
    let dyy = d.at(x, y + 1) + d.at(x, y - 1) - v2;
    let dxy = (d.at(x + 1, y + 1) - d.at(x - 1, y + 1) - d.at(x + 1, y - 1) + d.at(x - 1, y - 1)) * 0.25;
    let tr = dxx + dyy;
    let det = dxx * dyy - dxy * dxy;
    if det <= 0.0 || tr * tr * edge_threshold >= (edge_threshold + 1.0) * (edge_threshold + 1.0) * det {
        return None;
    }
    Some((x as f64 + offset[0], y as f64 + offset[1], contrast.abs()))
}

fn derivatives(dog: &[Plane], l: usize, x: usize, y: usize) -> ([f64; 3], [[f64; 3]; 3]) {
    let (prev, cur, next) = (&dog[l - 1], &dog[l], &dog[l + 1]);
    let v2 = 2.0 * cur.at(x, y);
    let g = [
        (cur.at(x + 1, y) - cur.at(x - 1, y)) * 0.5,
        (cur.at(x, y + 1) - cur.at(x, y - 1)) * 0.5,
        (next.at(x, y) - prev.at(x, y)) * 0.5,
    ];
    let dxx = cur.at(x + 1, y) + cur.at(x - 1, y) - v2;
    let dyy = cur.at(x, y + 1) + cur.at(x, y - 1) - v2;
    let dss = next.at(x, y) + prev.at(x, y) - v2;
    let dxy = (cur.at(x + 1, y + 1) - cur.at(x - 1, y + 1) - cur.at(x + 1, y - 1) + cur.at(x - 1, y - 1)) * 0.25;
    let dxs = (next.at(x + 1, y) - next.at(x - 1, y) - prev.at(x + 1, y) + prev.at(x - 1, y)) * 0.25;
    let dys = (next.at(x, y + 1) - next.at(x, y - 1) - prev.at(x, y + 1) + prev.at(x, y - 1)) * 0.25;
    (g, [[dxx, dxy, dxs], [dxy, dyy, dys], [dxs, dys, dss]])
}

/// Solve `a · x = b` for a 3×3 system by Cramer's rule.
fn solve3(a: &[[f64; 3]; 3], b: &[f64; 3]) -> Option<[f64; 3]> {
    let det3 = |m: &[[f64; 3]; 3]| {
        m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
    };
    let d = det3(a);
    if d.abs() < 1e-18 {
        return None;
    }
    let mut out = [0.0; 3];
    for (c, o) in out.iter_mut().enumerate() {
        let mut m = *a;
        for r in 0..3 {
            m[r][c] = b[r];
        }
        *o = det3(&m) / d;
    }
    Some(out)
}
