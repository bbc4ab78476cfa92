use std::fs;

use proptest::prelude::*;
use usptrack::formats::{
    format_trajectories, ingest_teacher_labels, load_label_manifest, load_points, load_trajectories, parse_trajectories,
    save_points, save_trajectories,
};
use usptrack::core::{Error, GrayImage, Point, TrajectorySet, TrajectorySource, VideoSequence};

fn video(t: usize) -> VideoSequence {
    VideoSequence::new("v", vec![GrayImage::filled(8, 8, 0.5); t]).unwrap()
}

fn linear(n: usize, t: usize, source: TrajectorySource) -> TrajectorySet {
    let rows: Vec<Vec<Point>> =
        (0..t).map(|f| (0..n).map(|i| Point::new(3.0 * i as f64 + 0.1 * f as f64, 7.0 - f as f64 / 3.0)).collect()).collect();
    let mut s = TrajectorySet::from_frames(&rows, source).unwrap();
    s.source = source;
    s
}

fn arb_traj() -> impl Strategy<Value = TrajectorySet> {
    (1usize..5, 1usize..8).prop_flat_map(|(n, t)| {
        (
            prop::collection::vec((-1e6f64..1e6, -1e6f64..1e6), n * t),
            prop::collection::vec(any::<bool>(), n * t),
            prop::sample::select(vec![TrajectorySource::Model, TrajectorySource::Teacher, TrajectorySource::Simulation]),
        )
            .prop_map(move |(xy, valid, src)| {
                let pos = xy.into_iter().map(|(x, y)| Point::new(x, y)).collect();
                TrajectorySet::new(n, t, pos, valid, src).unwrap()
            })
    })
}

proptest! {
    #[test]
    fn trajectory_text_round_trip_is_bitwise(traj in arb_traj()) {
        let back = parse_trajectories(&format_trajectories(&traj), "mem").unwrap();
        prop_assert_eq!(back.num_points(), traj.num_points());
        prop_assert_eq!(back.valid_flags(), traj.valid_flags());
        prop_assert_eq!(back.source, traj.source);
        for (a, b) in back.positions().iter().zip(traj.positions()) {
            prop_assert_eq!(a.x.to_bits(), b.x.to_bits());
            prop_assert_eq!(a.y.to_bits(), b.y.to_bits());
        }
    }
}

#[test]
fn three_by_twenty_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("t.traj");
    let traj = linear(3, 20, TrajectorySource::Teacher);
    save_trajectories(&path, &traj).unwrap();
    assert_eq!(load_trajectories(&path).unwrap(), traj);
}

#[test]
fn all_invalid_point_is_preserved() {
    let mut traj = linear(2, 5, TrajectorySource::Model);
    for f in 0..5 {
        traj.set(1, f, Point::new(f64::NAN, f64::NAN), false);
    }
    let back = parse_trajectories(&format_trajectories(&traj), "mem").unwrap();
    assert!((0..5).all(|f| !back.is_valid(1, f)));
    assert!((0..5).all(|f| back.is_valid(0, f)));
}

#[test]
fn frame_count_inconsistent_with_header() {
    let text = format_trajectories(&linear(2, 4, TrajectorySource::Model)).replace("frames 4", "frames 3");
    let err = parse_trajectories(&text, "bad.traj").unwrap_err();
    assert!(matches!(err, Error::Format(_)), "{err}");
    assert_eq!(err.category(), "FormatError");
}

#[test]
fn version_mismatch_reports_expected_and_actual() {
    let text = format_trajectories(&linear(1, 2, TrajectorySource::Model)).replace("USPTRAJ 1", "USPTRAJ 7");
    let msg = parse_trajectories(&text, "v.traj").unwrap_err().to_string();
    assert!(msg.contains("expected 1") && msg.contains("found 7"), "{msg}");
}

#[test]
fn missing_file_is_not_found() {
    let err = load_trajectories(std::path::Path::new("/nonexistent/x.traj")).unwrap_err();
    assert_eq!(err.category(), "NotFound");
}

#[test]
fn teacher_ingest_ten_points() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("teacher.traj");
    save_trajectories(&path, &linear(10, 20, TrajectorySource::Model)).unwrap();
    let (labels, report) = ingest_teacher_labels(&video(20), &path, Some(50.0)).unwrap();
    assert_eq!(labels.num_points(), 10);
    assert_eq!(report.kept.len(), 10);
    assert_eq!(labels.source, TrajectorySource::Teacher);
}

#[test]
fn teacher_ingest_drops_jumping_track() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("teacher.traj");
    let mut traj = linear(4, 20, TrajectorySource::Model);
    let p = traj.get(2, 10);
    traj.set(2, 10, p.offset(300.0, 0.0), true);
    save_trajectories(&path, &traj).unwrap();
    let (labels, report) = ingest_teacher_labels(&video(20), &path, Some(50.0)).unwrap();
    assert_eq!(labels.num_points(), 3);
    assert_eq!(report.jumped, vec![2]);
    assert_eq!(labels.get(2, 0), traj.get(3, 0));
}

#[test]
fn teacher_ingest_error_paths() {
    let dir = tempfile::tempdir().unwrap();
    let empty = dir.path().join("empty.traj");
    fs::write(&empty, "").unwrap();
    assert!(matches!(ingest_teacher_labels(&video(20), &empty, None), Err(Error::EmptyLabels(_))));

    let short = dir.path().join("short.traj");
    save_trajectories(&short, &linear(2, 19, TrajectorySource::Model)).unwrap();
    let err = ingest_teacher_labels(&video(20), &short, None).unwrap_err();
    assert_eq!(err.category(), "FormatError", "{err}");
}

#[test]
fn manifest_resolves_relative_paths() {
    let dir = tempfile::tempdir().unwrap();
    let m = dir.path().join("labels.txt");
    fs::write(&m, "# id file\nseq_a a.traj\nseq_b sub/b.traj\n").unwrap();
    let map = load_label_manifest(&m).unwrap();
    assert_eq!(map["seq_b"], dir.path().join("sub/b.traj"));
    fs::write(&m, "seq_a a.traj\nseq_a b.traj\n").unwrap();
    assert_eq!(load_label_manifest(&m).unwrap_err().category(), "FormatError");
}

#[test]
fn points_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("q.pts");
    let pts = vec![Point::new(1.25, 2.5), Point::new(100.0 / 3.0, 0.1)];
    save_points(&path, &pts).unwrap();
    assert_eq!(load_points(&path).unwrap().as_slice(), &pts[..]);
}
