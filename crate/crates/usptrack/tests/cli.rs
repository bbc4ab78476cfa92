//! Drives the `usptrack` binary end to end on the toy configuration.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::{Duration, Instant};

use sha2::{Digest, Sha256};

fn toy_config() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/toy.toml")
}

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_usptrack")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = run(args);
    assert!(out.status.success(), "{args:?} failed:\n{}", String::from_utf8_lossy(&out.stderr));
    out
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// SHA-256 of every file under `dir`, keyed by relative path.
fn tree_hashes(dir: &Path) -> Vec<(String, String)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).unwrap().display().to_string();
                out.push((rel, hex::encode(Sha256::digest(fs::read(&p).unwrap()))));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn simulate_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = toy_config();
    let c = cfg.to_str().unwrap();
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    for d in [&a, &b] {
        ok(&["--config", c, "simulate", "--seed", "7", "--count", "2", "--out", d.to_str().unwrap()]);
    }
    let (ha, hb) = (tree_hashes(&a), tree_hashes(&b));
    assert!(ha.len() > 40);
    assert_eq!(ha, hb);
}

#[test]
fn pipeline_smoke() {
    let start = Instant::now();
    let tmp = tempfile::tempdir().unwrap();
    let p = |s: &str| tmp.path().join(s).to_str().unwrap().to_string();
    let cfg = toy_config();
    let c = cfg.to_str().unwrap();

    ok(&["--config", c, "simulate", "--seed", "1", "--count", "3", "--out", &p("train")]);
    ok(&["--config", c, "simulate", "--seed", "2", "--count", "1", "--out", &p("val")]);
    ok(&["--config", c, "detect", "--sequence", &p("val"), "--out", &p("q.pts"), "--max-points", "8"]);
    let pts = fs::read_to_string(p("q.pts")).unwrap();
    assert!(pts.starts_with("USPPTS 1\npoints 8\n"), "{pts}");

    let train = ok(&[
        "--config", c, "train", "--data", &p("train"), "--val", &p("val"), "--out", &p("m.ckpt"), "--teacher", "oracle",
        "--warmup-epochs", "1", "--main-epochs", "1",
    ]);
    assert!(stderr(&train).contains("resolved config"));
    let log = fs::read_to_string(p("m.ckpt.log.tsv")).unwrap();
    assert_eq!(log.lines().count(), 3, "{log}");
    assert!(log.lines().nth(2).unwrap().starts_with("main\t0\t"));
    assert!(Path::new(&p("m.ckpt.config.toml")).exists());

    let (val, q, ck) = (p("val"), p("q.pts"), p("m.ckpt"));
    for method in ["pipsus", "ncc", "zero"] {
        let out = p(&format!("{method}.traj"));
        let mut args = vec!["--config", c, "track", "--sequence", &val, "--out", &out, "--method", method, "--points", &q];
        if method == "pipsus" {
            args.extend(["--checkpoint", &ck, "--fps-report"]);
        }
        let o = ok(&args);
        if method == "pipsus" {
            let line = String::from_utf8_lossy(&o.stdout).into_owned();
            assert!(line.starts_with("fps\tpipsus\t"), "{line}");
        }
        assert!(fs::read_to_string(&out).unwrap().contains("points 8\nframes 20\nsource model"));
    }

    // The labels describe the stored points.pts, so score a run on those.
    ok(&["--config", c, "track", "--sequence", &p("val"), "--out", &p("ncc_all.traj"), "--method", "ncc"]);
    let gt = p("val/trajectories.traj");
    let e = ok(&[
        "--config", c, "eval", "--pred", &p("ncc_all.traj"), "--gt", &gt, "--sequence", &p("val"), "--dataset", "toy",
        "--curve-out", &p("ncc.curve"), "--out", &p("rows.tsv"),
    ]);
    let table = String::from_utf8_lossy(&e.stdout).into_owned();
    assert!(table.contains("survival") && table.contains("ncc_all"), "{table}");
    let rows = fs::read_to_string(p("rows.tsv")).unwrap();
    assert!(rows.starts_with("dataset\tmethod\tmetric\tvalue\tstd\tcount\ntoy\tncc_all\tl2\t"), "{rows}");

    ok(&["plot", "--curve", &p("ncc.curve"), "--out", &p("drift.svg")]);
    assert!(fs::read_to_string(p("drift.svg")).unwrap().contains("<polyline"));
    assert!(start.elapsed() < Duration::from_secs(120));
}

#[test]
fn mismatched_eval_is_format_error() {
    let tmp = tempfile::tempdir().unwrap();
    let c = toy_config();
    let c = c.to_str().unwrap();
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    ok(&["--config", c, "simulate", "--seed", "1", "--out", a.to_str().unwrap()]);
    ok(&["--config", c, "simulate", "--seed", "1", "--seq-len", "9", "--out", b.to_str().unwrap()]);
    let out = run(&[
        "eval", "--pred", a.join("trajectories.traj").to_str().unwrap(), "--gt", b.join("trajectories.traj").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(1));
    let err = stderr(&out);
    assert!(err.starts_with("error[FormatError]: "), "{err}");
    assert_eq!(err.lines().count(), 1);
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(run(&["track", "--no-such-flag"]).status.code(), Some(2));
    assert_eq!(run(&["frobnicate"]).status.code(), Some(2));
    let out = run(&["track", "--sequence", "x", "--out", "y", "--method", "raft"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("pipsus"));
}

#[test]
fn runtime_errors_carry_category() {
    let out = run(&["track", "--sequence", "/no/such/seq", "--out", "/tmp/never.traj", "--method", "zero"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).starts_with("error[NotFound]: "));
    let out = run(&["track", "--sequence", "/no/such/seq", "--out", "/tmp/never.traj"]);
    assert!(stderr(&out).starts_with("error[InvalidArgument]: "), "{}", stderr(&out));
}

#[test]
fn help_documents_defaults() {
    let help = String::from_utf8_lossy(&ok(&["train", "--help"]).stdout).into_owned();
    for s in ["[default: 10]", "[default: 50]", "0.0005", "0.0001"] {
        assert!(help.contains(s), "missing {s} in\n{help}");
    }
    let help = String::from_utf8_lossy(&ok(&["track", "--help"]).stdout).into_owned();
    assert!(help.contains("pipsus") && help.contains("ncc") && help.contains("zero"));
}

#[test]
fn shipped_default_config_matches_code() {
    let text = fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/default.toml")).unwrap();
    let cfg = usptrack::config::RunConfig::from_toml(&text, "default.toml").unwrap();
    assert_eq!(cfg, usptrack::config::RunConfig::default());
    assert!(text.contains("contrast_threshold = 0.08") && text.contains("edge_threshold = 4.0"));
    let printed = String::from_utf8_lossy(&ok(&["print-config"]).stdout).into_owned();
    assert_eq!(printed, text);
}
