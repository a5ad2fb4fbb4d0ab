mod common;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use agecnn::checkpoint;
use agecnn::data::LABELS;
use common::synth::block_dataset;

fn agecnn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_agecnn")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = agecnn(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Mini trunk, head surgery and a small block dataset in a fresh directory.
struct Fixture {
    dir: tempfile::TempDir,
    model: PathBuf,
    manifest: PathBuf,
}

fn fixture() -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let trunk = dir.path().join("trunk.acnn");
    let model = dir.path().join("model.acnn");
    let manifest = block_dataset(dir.path(), 2, 20.0, 11);
    ok(&["init", "--profile", "mini", "--seed", "1", "--out", s(&trunk)]);
    ok(&["surgery", "--in", s(&trunk), "--profile", "mini", "--head", "32,16,8", "--seed", "2", "--out", s(&model)]);
    Fixture { dir, model, manifest }
}

fn train_args<'a>(f: &'a Fixture, model: &'a str, out: &'a str, epochs: &'a str) -> Vec<&'a str> {
    vec![
        "train", "--model", model, "--train", s(&f.manifest), "--val", s(&f.manifest), "--epochs", epochs, "--out", out,
        "--lr", "0.01", "--batch-size", "8", "--mean", "40", "--pixel-scale", "0.03125", "--seed", "5",
    ]
}

#[test]
fn missing_in_is_usage_error() {
    let out = agecnn(&["surgery", "--profile", "mini", "--out", "x.acnn"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--in"));
}

#[test]
fn runtime_failure_exits_one() {
    let out = agecnn(&["inspect", "--model", "/nonexistent/model.acnn"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("/nonexistent/model.acnn"));
}

#[test]
fn surgery_is_deterministic_and_freezes_trunk() {
    let f = fixture();
    let again = f.dir.path().join("again.acnn");
    let trunk = f.dir.path().join("trunk.acnn");
    ok(&["surgery", "--in", s(&trunk), "--profile", "mini", "--head", "32,16,8", "--seed", "2", "--out", s(&again)]);
    assert_eq!(fs::read(&f.model).unwrap(), fs::read(&again).unwrap());

    let text = ok(&["inspect", "--model", s(&f.model)]);
    let flag = |name: &str| {
        let line = text.lines().find(|l| l.starts_with(&format!("{name} "))).unwrap();
        line.split_whitespace().last().unwrap().to_string()
    };
    assert_eq!(flag("conv1_1"), "no");
    assert_eq!(flag("fc6"), "yes");
    assert_eq!(flag("relu1_1"), "-");
}

#[test]
fn surgery_rejects_mismatched_trunk() {
    let f = fixture();
    let out = agecnn(&[
        "surgery", "--in", s(&f.model), "--profile", "vgg-face-age", "--out", s(&f.dir.path().join("x.acnn")),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("conv1_1"));
}

#[test]
fn zero_epochs_copies_model() {
    let f = fixture();
    let out = f.dir.path().join("zero.acnn");
    ok(&train_args(&f, s(&f.model), s(&out), "0"));
    assert_eq!(fs::read(&f.model).unwrap(), fs::read(&out).unwrap());
}

#[test]
fn train_logs_epochs_and_keeps_trunk() {
    let f = fixture();
    let out = f.dir.path().join("trained.acnn");
    let log = ok(&train_args(&f, s(&f.model), s(&out), "2"));
    let lines: Vec<&str> = log.lines().collect();
    assert_eq!(lines[0], "epoch,lr,train_loss,val_exact,val_one_off");
    assert_eq!(lines.len(), 3);
    for (i, l) in lines[1..].iter().enumerate() {
        let cols: Vec<&str> = l.split(',').collect();
        assert_eq!(cols[0], (i + 1).to_string());
        let v: Vec<f64> = cols[1..].iter().map(|c| c.parse().unwrap()).collect();
        assert!(v.iter().all(|x| x.is_finite()));
        assert!(v[2] <= v[3]);
    }
    let before = checkpoint::load(&f.model).unwrap();
    let after = checkpoint::load(&out).unwrap();
    for name in ["conv1_1", "conv2_1"] {
        assert_eq!(before.params.get(name), after.params.get(name));
    }
    assert_ne!(before.params.get("fc6"), after.params.get("fc6"));
    assert_eq!(after.state.unwrap().epoch, 2);
}

#[test]
fn resumed_training_matches_uninterrupted() {
    let f = fixture();
    let d = f.dir.path();
    let (full, half, resumed) = (d.join("full.acnn"), d.join("half.acnn"), d.join("resumed.acnn"));
    ok(&train_args(&f, s(&f.model), s(&full), "2"));
    ok(&train_args(&f, s(&f.model), s(&half), "1"));
    ok(&train_args(&f, s(&half), s(&resumed), "1"));
    assert_eq!(fs::read(&full).unwrap(), fs::read(&resumed).unwrap());
}

#[test]
fn config_file_feeds_flags() {
    let f = fixture();
    let cfg = f.dir.path().join("run.cfg");
    fs::write(&cfg, "lr=0.01\nbatch_size=8\nmean=40\npixel_scale=0.03125\nseed=5\n").unwrap();
    let (a, b) = (f.dir.path().join("a.acnn"), f.dir.path().join("b.acnn"));
    ok(&train_args(&f, s(&f.model), s(&a), "1"));
    let m = s(&f.manifest);
    ok(&[
        "--config", s(&cfg), "train", "--model", s(&f.model), "--train", m, "--val", m, "--epochs", "1", "--out", s(&b),
    ]);
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
}

#[test]
fn predict_lines_and_failures() {
    let f = fixture();
    let list = f.dir.path().join("list.txt");
    fs::write(&list, "img_0_0.ppm\nmissing.ppm\n\nimg_7_1.ppm\n").unwrap();
    let args = ["predict", "--model", s(&f.model), "--images", s(&list), "--mean", "40"];
    let out = agecnn(&args);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing.ppm"));
    let text = String::from_utf8(out.stdout.clone()).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "path,label,p0,p1,p2,p3,p4,p5,p6,p7");
    assert_eq!(lines.len(), 3);
    for l in &lines[1..] {
        let cols: Vec<&str> = l.split(',').collect();
        assert_eq!(cols.len(), 10);
        assert!(LABELS.contains(&cols[1]));
        let sum: f64 = cols[2..].iter().map(|c| c.parse::<f64>().unwrap()).sum();
        assert!((sum - 1.0).abs() < 1e-5, "{sum}");
    }
    assert_eq!(agecnn(&args).stdout, out.stdout);
}

#[test]
fn eval_prints_table_and_writes_csv() {
    let f = fixture();
    let report = f.dir.path().join("r.csv");
    let text = ok(&["eval", "--model", s(&f.model), "--test", s(&f.manifest), "--report", s(&report)]);
    let header: Vec<&str> = text.lines().next().unwrap().split_whitespace().collect();
    assert_eq!(header, LABELS);
    let rows: Vec<&str> = text.lines().skip(1).take(8).map(|l| l.split_whitespace().next().unwrap()).collect();
    assert_eq!(rows, LABELS);
    let footer = text.lines().last().unwrap();
    let pct = |key: &str| -> f64 {
        let part = footer.split_whitespace().find(|p| p.starts_with(key)).unwrap();
        part[key.len() + 1..part.len() - 1].parse().unwrap()
    };
    assert!(pct("exact") <= pct("one_off"));
    let csv = fs::read_to_string(&report).unwrap();
    assert!(csv.starts_with("metric,actual,predicted,value\n"));
    assert!(csv.contains("total,,,16"));
}

#[test]
fn fold_filter_limits_eval() {
    let f = fixture();
    let report = f.dir.path().join("r.csv");
    ok(&["eval", "--model", s(&f.model), "--test", s(&f.manifest), "--folds", "1", "--report", s(&report)]);
    assert!(fs::read_to_string(&report).unwrap().contains("total,,,8"));
}
