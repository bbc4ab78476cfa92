//! Pseudo-labels for the teacher–student phase.
//!
//! Labels come either from an external long-horizon tracker (parsed by the
//! IO layer and filtered here) or, for desk-scale runs, straight from the
//! simulator's motion log.

use alloc::format;
use alloc::vec::Vec;

use crate::datamodel::{PointSet, TrajectorySet, TrajectorySource, VideoSequence};
use crate::error::{Error, Result};
use crate::simulator::{trajectories_from_log, MotionLog};

/// Default per-frame displacement cap in pixels.
pub const DEFAULT_DISPLACEMENT_CAP: f64 = 50.0;

/// What the label filter removed.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct LabelFilterReport {
    pub kept: Vec<usize>,
    /// Points dropped for a jump above the cap.
    pub jumped: Vec<usize>,
    /// Points without a valid frame-0 position.
    pub no_start: Vec<usize>,
}

/// Check externally produced labels against their sequence and drop
/// implausible tracks. A point is dropped if it is not valid at frame 0 or
/// if it moves more than `cap` pixels between two consecutive valid frames
/// (`cap = None` disables the jump check).
pub fn filter_teacher_labels(
    seq_len: usize,
    labels: TrajectorySet,
    cap: Option<f64>,
) -> Result<(TrajectorySet, LabelFilterReport)> {
    if labels.num_frames() != seq_len {
        return Err(Error::Format(format!(
            "labels cover {} frames but the sequence has {}",
            labels.num_frames(),
            seq_len
        )));
    }
    if labels.num_points() == 0 {
        return Err(Error::EmptyLabels("label set contains no points".into()));
    }
    let mut report = LabelFilterReport::default();
    for i in 0..labels.num_points() {
        if !labels.is_valid(i, 0) {
            report.no_start.push(i);
            continue;
        }
        let jumped = cap.is_some_and(|cap| {
            (1..seq_len).any(|t| {
                labels.is_valid(i, t - 1) && labels.is_valid(i, t) && labels.get(i, t).dist(labels.get(i, t - 1)) > cap
            })
        });
        if jumped {
            report.jumped.push(i);
        } else {
            report.kept.push(i);
        }
    }
    if report.kept.is_empty() {
        return Err(Error::EmptyLabels(format!(
            "all {} label tracks rejected ({} over the displacement cap, {} without a start)",
            labels.num_points(),
            report.jumped.len(),
            report.no_start.len()
        )));
    }
    let mut out = labels.select_points(&report.kept);
    out.source = TrajectorySource::Teacher;
    Ok((out, report))
}

/// Exact labels for a simulated sequence, marked as teacher output.
pub fn oracle_teacher(seq: &VideoSequence, points: &PointSet, log: Option<&MotionLog>) -> Result<TrajectorySet> {
    let log = log.ok_or_else(|| Error::NotFound(format!("no motion log for sequence {:?}", seq.id)))?;
    if log.len() != seq.len() {
        return Err(Error::Format(format!("motion log covers {} frames, sequence has {}", log.len(), seq.len())));
    }
    if points.is_empty() {
        return Err(Error::EmptyLabels("no points to label".into()));
    }
    Ok(trajectories_from_log(log, points, seq.width(), seq.height(), TrajectorySource::Teacher))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datamodel::Point;
    use crate::simulator::{simulate_sequence, speckle_image, MotionModel, SimConfig};

    fn linear_labels(n: usize, t: usize) -> TrajectorySet {
        let rows: Vec<Vec<Point>> =
            (0..t).map(|f| (0..n).map(|i| Point::new(10.0 + i as f64 + f as f64, 20.0)).collect()).collect();
        TrajectorySet::from_frames(&rows, TrajectorySource::Model).unwrap()
    }

    #[test]
    fn well_formed_labels_kept() {
        let (out, rep) = filter_teacher_labels(20, linear_labels(10, 20), Some(50.0)).unwrap();
        assert_eq!(out.num_points(), 10);
        assert_eq!(out.source, TrajectorySource::Teacher);
        assert!(rep.jumped.is_empty());
    }

    #[test]
    fn jump_over_cap_dropped() {
        let mut l = linear_labels(4, 20);
        let p = l.get(2, 7);
        l.set(2, 7, p.offset(300.0, 0.0), true);
        let (out, rep) = filter_teacher_labels(20, l.clone(), Some(50.0)).unwrap();
        assert_eq!(rep.jumped, vec![2]);
        assert_eq!(rep.kept, vec![0, 1, 3]);
        assert_eq!(out.get(2, 5), l.get(3, 5));
        let (all, _) = filter_teacher_labels(20, l, None).unwrap();
        assert_eq!(all.num_points(), 4);
    }

    #[test]
    fn error_paths() {
        assert!(matches!(filter_teacher_labels(19, linear_labels(3, 20), Some(50.0)), Err(Error::Format(_))));
        let mut l = linear_labels(1, 5);
        let p = l.get(0, 3);
        l.set(0, 3, p.offset(0.0, 90.0), true);
        assert!(matches!(filter_teacher_labels(5, l, Some(50.0)), Err(Error::EmptyLabels(_))));
        let empty = TrajectorySet::new(0, 5, vec![], vec![], TrajectorySource::Teacher).unwrap();
        assert!(matches!(filter_teacher_labels(5, empty, Some(50.0)), Err(Error::EmptyLabels(_))));
    }

    #[test]
    fn oracle_matches_simulation() {
        let base = speckle_image(48, 48, 1);
        let pts = PointSet::new(vec![Point::new(20.0, 20.0), Point::new(30.5, 12.0)]).unwrap();
        for model in [
            MotionModel::ConstantTranslation { dx: 1.5, dy: -0.5 },
            MotionModel::Zero,
            MotionModel::SmoothRandomAffine,
        ] {
            let cfg = SimConfig { seq_len: 8, motion_model: model, rng_seed: 3, ..Default::default() };
            let sim = simulate_sequence(&base, &pts, &cfg).unwrap();
            let tr = oracle_teacher(&sim.video, &pts, Some(&sim.log)).unwrap();
            assert_eq!(tr.source, TrajectorySource::Teacher);
            for i in 0..2 {
                for t in 0..8 {
                    let (a, b) = (tr.get(i, t), sim.trajectories.get(i, t));
                    assert!(a.dist(b) < 1e-5);
                    match model {
                        MotionModel::ConstantTranslation { dx, dy } => {
                            let want = pts.get(i).offset(dx * t as f64, dy * t as f64);
                            assert!(a.dist(want) < 1e-9);
                        }
                        MotionModel::Zero => assert_eq!(a, pts.get(i)),
                        _ => {}
                    }
                }
            }
        }
        let sim = simulate_sequence(&base, &pts, &SimConfig { seq_len: 3, ..Default::default() }).unwrap();
        assert!(matches!(oracle_teacher(&sim.video, &pts, None), Err(Error::NotFound(_))));
    }
}
