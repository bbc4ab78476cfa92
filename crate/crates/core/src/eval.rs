//! Tracking metrics: L2 error, patch similarity, survival rate and
//! per-frame drift curves, plus the row format reports are built from.
//!
//! Frame 0 is excluded from every aggregate; it is the query frame and is
//! exact by construction.

use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::baselines::ncc;
use crate::datamodel::{GrayImage, Point, TrajectorySet, VideoSequence};
use crate::error::{invalid, Error, Result};
use crate::math;
use crate::sampling::BilinearTap;

/// Default survival threshold in pixels.
pub const SURVIVAL_THRESHOLD: f64 = 50.0;

/// Mean and population standard deviation of a sample.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub std: f64,
    pub count: usize,
}

impl Summary {
    pub fn of(values: &[f64]) -> Summary {
        if values.is_empty() {
            return Summary { mean: f64::NAN, std: f64::NAN, count: 0 };
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        Summary { mean, std: math::sqrt(var), count: values.len() }
    }
}

fn check_shapes(pred: &TrajectorySet, gt: &TrajectorySet) -> Result<()> {
    if pred.num_points() != gt.num_points() || pred.num_frames() != gt.num_frames() {
        return Err(Error::Format(alloc::format!(
            "prediction is {} points × {} frames, ground truth {} × {}",
            pred.num_points(),
            pred.num_frames(),
            gt.num_points(),
            gt.num_frames()
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct L2Report {
    /// Point-major `n × T` distances; `None` where not scored.
    pub per_entry: Vec<Option<f64>>,
    pub summary: Summary,
    /// Entries with valid labels but a lost prediction.
    pub lost: usize,
}

/// Euclidean error of every mutually valid `(point, frame ≥ 1)` entry.
pub fn l2_error(pred: &TrajectorySet, gt: &TrajectorySet) -> Result<L2Report> {
    check_shapes(pred, gt)?;
    let (n, t) = (gt.num_points(), gt.num_frames());
    let mut per_entry = Vec::with_capacity(n * t);
    let mut values = Vec::new();
    let mut lost = 0;
    for i in 0..n {
        for f in 0..t {
            let scored = f > 0 && gt.is_valid(i, f) && pred.is_valid(i, f);
            if f > 0 && gt.is_valid(i, f) && !pred.is_valid(i, f) {
                lost += 1;
            }
            if scored {
                let d = pred.get(i, f).dist(gt.get(i, f));
                values.push(d);
                per_entry.push(Some(d));
            } else {
                per_entry.push(None);
            }
        }
    }
    Ok(L2Report { per_entry, summary: Summary::of(&values), lost })
}

/// Fraction of points whose final-frame error is below `threshold`. Points
/// without a valid final label are left out; the prediction's own validity
/// flag is ignored (a lost point is scored where it was left).
pub fn survival_rate(pred: &TrajectorySet, gt: &TrajectorySet, threshold: f64) -> Result<f64> {
    check_shapes(pred, gt)?;
    let last = gt.num_frames() - 1;
    let (mut alive, mut total) = (0usize, 0usize);
    for i in 0..gt.num_points() {
        if !gt.is_valid(i, last) {
            continue;
        }
        total += 1;
        if pred.get(i, last).dist(gt.get(i, last)) < threshold {
            alive += 1;
        }
    }
    if total == 0 {
        return Err(invalid!("no point has a valid label in the final frame"));
    }
    Ok(alive as f64 / total as f64)
}

/// Per-frame mean and 10th/90th percentiles of the L2 error.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriftCurve {
    pub mean: Vec<f64>,
    pub p10: Vec<f64>,
    pub p90: Vec<f64>,
    pub count: Vec<usize>,
}

impl DriftCurve {
    pub fn len(&self) -> usize {
        self.mean.len()
    }
    pub fn is_empty(&self) -> bool {
        self.mean.is_empty()
    }

    /// Pool per-frame error samples from several sequences of equal length.
    pub fn from_samples(per_frame: &[Vec<f64>]) -> DriftCurve {
        let mut c = DriftCurve { mean: Vec::new(), p10: Vec::new(), p90: Vec::new(), count: Vec::new() };
        for vals in per_frame {
            let mut v = vals.clone();
            v.sort_by(f64::total_cmp);
            c.mean.push(if v.is_empty() { f64::NAN } else { v.iter().sum::<f64>() / v.len() as f64 });
            c.p10.push(percentile(&v, 10.0));
            c.p90.push(percentile(&v, 90.0));
            c.count.push(v.len());
        }
        c
    }
}

/// Linear-interpolation percentile of sorted data; NaN when empty.
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    match sorted.len() {
        0 => f64::NAN,
        1 => sorted[0],
        n => {
            let pos = q / 100.0 * (n - 1) as f64;
            let lo = math::floor(pos) as usize;
            let hi = (lo + 1).min(n - 1);
            let frac = pos - lo as f64;
            sorted[lo] + (sorted[hi] - sorted[lo]) * frac
        }
    }
}

/// Errors of mutually valid entries grouped by frame (frame 0 included, so
/// indices line up with frames).
pub fn per_frame_errors(pred: &TrajectorySet, gt: &TrajectorySet) -> Result<Vec<Vec<f64>>> {
    check_shapes(pred, gt)?;
    Ok((0..gt.num_frames())
        .map(|f| {
            (0..gt.num_points())
                .filter(|&i| gt.is_valid(i, f) && pred.is_valid(i, f))
                .map(|i| pred.get(i, f).dist(gt.get(i, f)))
                .collect()
        })
        .collect())
}

pub fn drift_curve(pred: &TrajectorySet, gt: &TrajectorySet) -> Result<DriftCurve> {
    Ok(DriftCurve::from_samples(&per_frame_errors(pred, gt)?))
}

/// Which frame the similarity reference patch comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NccReference {
    FirstFrame,
    PreviousFrame,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PatchNccReport {
    pub summary: Summary,
    /// Pairs skipped because a patch left the frame.
    pub border_excluded: usize,
    /// Pairs skipped because a patch had no variance.
    pub flat_excluded: usize,
}

/// `size × size` patch bilinearly sampled around `p`, or `None` near the border.
pub fn centered_patch(frame: &GrayImage, p: Point, size: usize) -> Option<Vec<f64>> {
    let half = (size as f64 - 1.0) / 2.0;
    let (w, h) = (frame.width(), frame.height());
    if p.x - half < 0.0 || p.y - half < 0.0 || p.x + half > (w - 1) as f64 || p.y + half > (h - 1) as f64 {
        return None;
    }
    let mut out = Vec::with_capacity(size * size);
    for j in 0..size {
        for i in 0..size {
            let tap = BilinearTap::new(p.x - half + i as f64, p.y - half + j as f64, w, h);
            out.push(tap.sample(frame.data(), w));
        }
    }
    Some(out)
}

/// NCC between the patch at `reference[i]` in `ref_frame` and at `pred[i]`
/// in `frame`, for every point.
pub fn patch_ncc(ref_frame: &GrayImage, frame: &GrayImage, reference: &[Point], pred: &[Point], size: usize) -> PatchNccReport {
    let mut acc = PatchNccAccumulator::default();
    for (r, p) in reference.iter().zip(pred) {
        acc.add(ref_frame, frame, *r, *p, size);
    }
    acc.finish()
}

#[derive(Debug, Clone, Default)]
struct PatchNccAccumulator {
    values: Vec<f64>,
    border: usize,
    flat: usize,
}

impl PatchNccAccumulator {
    fn add(&mut self, ref_frame: &GrayImage, frame: &GrayImage, r: Point, p: Point, size: usize) {
        match (centered_patch(ref_frame, r, size), centered_patch(frame, p, size)) {
            (Some(a), Some(b)) => match ncc(&a, &b) {
                Some(v) => self.values.push(v),
                None => self.flat += 1,
            },
            _ => self.border += 1,
        }
    }
    fn finish(self) -> PatchNccReport {
        PatchNccReport { summary: Summary::of(&self.values), border_excluded: self.border, flat_excluded: self.flat }
    }
}

/// Patch similarity over a whole tracked sequence (frames ≥ 1, valid
/// predictions only).
pub fn sequence_patch_ncc(video: &VideoSequence, pred: &TrajectorySet, size: usize, reference: NccReference) -> Result<PatchNccReport> {
    if pred.num_frames() != video.len() {
        return Err(invalid!("trajectories cover {} frames, video has {}", pred.num_frames(), video.len()));
    }
    let mut acc = PatchNccAccumulator::default();
    for f in 1..video.len() {
        let rf = match reference {
            NccReference::FirstFrame => 0,
            NccReference::PreviousFrame => f - 1,
        };
        for i in 0..pred.num_points() {
            if pred.is_valid(i, f) && pred.is_valid(i, rf) {
                acc.add(video.frame(rf), video.frame(f), pred.get(i, rf), pred.get(i, f), size);
            }
        }
    }
    Ok(acc.finish())
}

/// One machine-readable result row keyed by dataset, method and metric.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub dataset: String,
    pub method: String,
    pub metric: String,
    pub value: f64,
    pub std: Option<f64>,
    pub count: usize,
}

/// Standard rows for one method on one dataset.
pub fn report_rows(dataset: &str, method: &str, l2: &L2Report, survival: f64, similarity: Option<&PatchNccReport>, fps: Option<f64>) -> Vec<MetricRow> {
    let row = |metric: &str, value: f64, std: Option<f64>, count: usize| MetricRow {
        dataset: dataset.into(),
        method: method.into(),
        metric: metric.into(),
        value,
        std,
        count,
    };
    let mut rows = alloc::vec![
        row("l2", l2.summary.mean, Some(l2.summary.std), l2.summary.count),
        row("survival", survival, None, 0),
    ];
    if let Some(s) = similarity {
        rows.push(row("ncc", s.summary.mean, Some(s.summary.std), s.summary.count));
    }
    if let Some(f) = fps {
        rows.push(row("fps", f, None, 0));
    }
    rows
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datamodel::{PointSet, TrajectorySource};
    use crate::simulator::speckle_image;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn traj(rows: Vec<Vec<Point>>) -> TrajectorySet {
        TrajectorySet::from_frames(&rows, TrajectorySource::Model).unwrap()
    }

    fn random_traj(n: usize, t: usize, seed: u64) -> TrajectorySet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        traj((0..t).map(|_| (0..n).map(|_| Point::new(rng.random_range(0.0..64.0), rng.random_range(0.0..64.0))).collect()).collect())
    }

    #[test]
    fn l2_basic_cases() {
        let gt = random_traj(3, 6, 1);
        let r = l2_error(&gt, &gt).unwrap();
        assert_eq!((r.summary.mean, r.summary.std, r.summary.count), (0.0, 0.0, 15));
        let shifted = traj((0..6).map(|f| gt.frame(f).iter().map(|p| p.offset(3.0, 4.0)).collect()).collect());
        let r = l2_error(&shifted, &gt).unwrap();
        assert!((r.summary.mean - 5.0).abs() < 1e-12 && r.summary.std < 1e-12);
        assert!(matches!(l2_error(&random_traj(2, 6, 2), &gt), Err(crate::Error::Format(_))));
    }

    #[test]
    fn l2_matches_brute_force() {
        let gt = random_traj(4, 9, 3);
        let mut pred = random_traj(4, 9, 4);
        pred.set(1, 3, pred.get(1, 3), false);
        let r = l2_error(&pred, &gt).unwrap();
        let mut vals = Vec::new();
        for i in 0..4 {
            for f in 1..9 {
                if (i, f) != (1, 3) {
                    let (a, b) = (pred.get(i, f), gt.get(i, f));
                    vals.push(((a.x - b.x).powi(2) + (a.y - b.y).powi(2)).sqrt());
                }
            }
        }
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        assert!((r.summary.mean - mean).abs() < 1e-9);
        assert_eq!(r.lost, 1);
        assert_eq!(r.per_entry[9 + 3], None);
    }

    #[test]
    fn survival_closed_forms() {
        let gt = random_traj(4, 5, 5);
        assert_eq!(survival_rate(&gt, &gt, SURVIVAL_THRESHOLD).unwrap(), 1.0);
        let half = traj((0..5).map(|f| gt.frame(f).iter().enumerate().map(|(i, p)| if i % 2 == 0 { p.offset(60.0, 0.0) } else { *p }).collect()).collect());
        assert_eq!(survival_rate(&half, &gt, SURVIVAL_THRESHOLD).unwrap(), 0.5);
        // Zero motion against 3 px/frame over 20 frames: final error 57.
        let p0 = PointSet::new(vec![Point::new(5.0, 5.0), Point::new(9.0, 2.0)]).unwrap();
        let moving = traj((0..20).map(|f| p0.iter().map(|p| p.offset(3.0 * f as f64, 0.0)).collect()).collect());
        let still = TrajectorySet::constant(&p0, 20, TrajectorySource::Model);
        assert_eq!(survival_rate(&still, &moving, SURVIVAL_THRESHOLD).unwrap(), 0.0);
        assert_eq!(survival_rate(&still, &moving, f64::INFINITY).unwrap(), 1.0);
    }

    #[test]
    fn drift_curve_is_linear_for_linear_drift() {
        let gt = random_traj(5, 12, 6);
        let pred = traj((0..12).map(|f| gt.frame(f).iter().map(|p| p.offset(0.6 * f as f64, 0.8 * f as f64)).collect()).collect());
        let c = drift_curve(&pred, &gt).unwrap();
        assert_eq!(c.len(), 12);
        for f in 0..12 {
            assert!((c.mean[f] - f as f64).abs() < 1e-9);
            assert!(c.p10[f] <= c.p90[f]);
        }
        let flat = drift_curve(&gt, &gt).unwrap();
        assert!(flat.mean.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn percentile_interpolates() {
        let v = [0.0, 10.0, 20.0, 30.0, 40.0];
        assert_eq!(percentile(&v, 10.0), 4.0);
        assert_eq!(percentile(&v, 90.0), 36.0);
        assert_eq!(percentile(&[7.0], 90.0), 7.0);
        assert!(percentile(&[], 50.0).is_nan());
    }

    #[test]
    fn patch_ncc_cases() {
        let f = speckle_image(64, 64, 7);
        let pts = vec![Point::new(20.0, 20.0), Point::new(40.5, 33.0), Point::new(2.0, 2.0)];
        let r = patch_ncc(&f, &f, &pts, &pts, 16);
        assert!((r.summary.mean - 1.0).abs() < 1e-12 && r.summary.std < 1e-9);
        assert_eq!(r.border_excluded, 1);
        let neg = GrayImage::from_fn(64, 64, |x, y| 1.0 - f.get(x, y));
        assert!((patch_ncc(&f, &neg, &pts[..1], &pts[..1], 16).summary.mean + 1.0).abs() < 1e-12);
        let gained = GrayImage::from_fn(64, 64, |x, y| 0.6 * f.get(x, y) + 0.2);
        let other = vec![Point::new(25.0, 22.0), Point::new(38.0, 30.0)];
        let a = patch_ncc(&f, &f, &pts[..2], &other, 16).summary.mean;
        let b = patch_ncc(&f, &gained, &pts[..2], &other, 16).summary.mean;
        assert!((a - b).abs() < 1e-9);
        let flat = GrayImage::filled(64, 64, 0.3);
        assert_eq!(patch_ncc(&f, &flat, &pts[..1], &pts[..1], 16).flat_excluded, 1);
    }

    #[test]
    fn patch_ncc_direct_formula() {
        let f = speckle_image(48, 48, 8);
        let g = speckle_image(48, 48, 9);
        let (a, b) = (Point::new(20.0, 21.0), Point::new(24.0, 19.0));
        let got = patch_ncc(&f, &g, &[a], &[b], 16).summary.mean;
        // Integer centres with an even patch sample half-pixel positions: 2×2 averages.
        let avg = |src: &GrayImage, x0: usize, y0: usize| -> Vec<f64> {
            (0..16)
                .flat_map(|j| (0..16).map(move |i| (i, j)))
                .map(|(i, j)| {
                    let (x, y) = (x0 + i, y0 + j);
                    0.25 * (src.get(x, y) + src.get(x + 1, y) + src.get(x, y + 1) + src.get(x + 1, y + 1))
                })
                .collect()
        };
        let (qa, qb) = (avg(&f, 12, 13), avg(&g, 16, 11));
        let n = 256.0;
        let (ma, mb) = (qa.iter().sum::<f64>() / n, qb.iter().sum::<f64>() / n);
        let num: f64 = qa.iter().zip(&qb).map(|(x, y)| (x - ma) * (y - mb)).sum();
        let da: f64 = qa.iter().map(|x| (x - ma).powi(2)).sum();
        let db: f64 = qb.iter().map(|y| (y - mb).powi(2)).sum();
        assert!((got - num / (da * db).sqrt()).abs() < 1e-6);
    }

    #[test]
    fn sequence_similarity_static_perfect() {
        let f = speckle_image(48, 48, 10);
        let v = VideoSequence::new("s", vec![f; 4]).unwrap();
        let p0 = PointSet::new(vec![Point::new(20.0, 20.0), Point::new(30.0, 25.0)]).unwrap();
        let tr = TrajectorySet::constant(&p0, 4, TrajectorySource::Model);
        for reference in [NccReference::FirstFrame, NccReference::PreviousFrame] {
            let r = sequence_patch_ncc(&v, &tr, 16, reference).unwrap();
            assert!((r.summary.mean - 1.0).abs() < 1e-12);
            assert_eq!(r.summary.count, 6);
        }
    }

    #[test]
    fn report_rows_keyed() {
        let gt = random_traj(2, 3, 11);
        let l2 = l2_error(&gt, &gt).unwrap();
        let rows = report_rows("synthetic", "zero", &l2, 1.0, None, Some(123.0));
        let keys: Vec<_> = rows.iter().map(|r| r.metric.as_str()).collect();
        assert_eq!(keys, ["l2", "survival", "fps"]);
        assert!(rows.iter().all(|r| r.dataset == "synthetic" && r.method == "zero"));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn metrics_invariant_under_point_permutation(seed in 0u64..500) {
            let gt = random_traj(4, 5, seed);
            let pred = random_traj(4, 5, seed + 1000);
            let perm = [2usize, 0, 3, 1];
            let (gp, pp) = (gt.select_points(&perm), pred.select_points(&perm));
            let a = l2_error(&pred, &gt).unwrap().summary;
            let b = l2_error(&pp, &gp).unwrap().summary;
            prop_assert!((a.mean - b.mean).abs() < 1e-12 && (a.std - b.std).abs() < 1e-12);
            prop_assert_eq!(survival_rate(&pred, &gt, 30.0).unwrap(), survival_rate(&pp, &gp, 30.0).unwrap());
            let (ca, cb) = (drift_curve(&pred, &gt).unwrap(), drift_curve(&pp, &gp).unwrap());
            for f in 0..5 {
                prop_assert!((ca.mean[f] - cb.mean[f]).abs() < 1e-12);
                prop_assert!((ca.p90[f] - cb.p90[f]).abs() < 1e-12);
            }
        }
    }
}
