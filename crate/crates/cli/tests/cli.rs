use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use gsd_core::data::{generate_toy_scene, ToySceneSpec};

fn gsd(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gsd"))
        .args(args)
        .current_dir(cwd)
        .env_remove("GSD_THREADS")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn line_with<'a>(text: &'a str, prefix: &str) -> &'a str {
    text.lines().find(|l| l.starts_with(prefix)).unwrap_or_else(|| panic!("no `{prefix}` in\n{text}"))
}

const TINY: &[&str] = &["--init-points", "120", "--net-width", "24", "--net-depth", "3", "--eval-interval", "1"];

fn train(cwd: &Path, data: &str, out: &str, iters: &str, extra: &[&str]) -> Output {
    let mut args = vec!["train", "--data", data, "--out", out, "--iters", iters, "--warmup", "4"];
    args.extend_from_slice(TINY);
    args.extend_from_slice(extra);
    gsd(&args, cwd)
}

#[test]
fn synth_is_deterministic_and_validates_arguments() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let a = gsd(&["synth", "--preset", "sphere-translate", "--out", "a", "--seed", "1"], d);
    let b = gsd(&["synth", "--preset", "sphere-translate", "--out", "b", "--seed", "1"], d);
    let c = gsd(&["synth", "--preset", "sphere-translate", "--out", "c", "--seed", "2"], d);
    assert!(a.status.success());
    assert_eq!(line_with(&stdout(&a), "sha256"), line_with(&stdout(&b), "sha256"));
    assert_ne!(line_with(&stdout(&a), "sha256"), line_with(&stdout(&c), "sha256"));
    assert!(d.join("a/transforms_train.json").is_file());

    assert_eq!(gsd(&["synth", "--preset", "sphere-translate"], d).status.code(), Some(1));
    assert_eq!(gsd(&["synth", "--preset", "teapot", "--out", "x"], d).status.code(), Some(1));
    assert_eq!(gsd(&["frobnicate"], d).status.code(), Some(1));
}

#[test]
fn train_render_eval_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert!(gsd(&["synth", "--out", "data"], d).status.success());

    let zero = train(d, "data", "zero", "0", &[]);
    assert!(zero.status.success(), "{}", String::from_utf8_lossy(&zero.stderr));
    assert!(d.join("zero/checkpoint/state.gsdw").is_file());
    let metrics = fs::read_to_string(d.join("zero/metrics.csv")).unwrap();
    assert_eq!(metrics.trim(), "iter,l1,d_ssim,motion,total,psnr,num_gaussians");

    let run = train(d, "data", "run", "8", &[]);
    assert!(run.status.success(), "{}", String::from_utf8_lossy(&run.stderr));
    let metrics = fs::read_to_string(d.join("run/metrics.csv")).unwrap();
    let iters: Vec<usize> = metrics.lines().skip(1).map(|l| l.split(',').next().unwrap().parse().unwrap()).collect();
    assert_eq!(iters, (1..=8).collect::<Vec<_>>());

    // Frame 3 of the training split, at its own timestamp.
    let log = fs::read_to_string(d.join("run/train_renders.csv")).unwrap();
    let row: Vec<&str> = log.lines().nth(4).unwrap().split(',').collect();
    let r1 = gsd(&["render", "run", "--time", row[1], "--camera", row[0], "--out", "one.png"], d);
    let r2 = gsd(&["render", "run/checkpoint", "--time", row[1], "--camera", row[0], "--out", "two.png"], d);
    assert!(r1.status.success(), "{}", String::from_utf8_lossy(&r1.stderr));
    assert!(line_with(&stdout(&r1), "sha256").contains(row[2]));
    assert_eq!(fs::read(d.join("one.png")).unwrap(), fs::read(d.join("two.png")).unwrap());
    assert!(stdout(&r2).contains(row[2]));

    let pose = r#"{"transform_matrix": [[1,0,0,0],[0,0,-1,-4],[0,1,0,0],[0,0,0,1]]}"#;
    fs::write(d.join("pose.json"), pose).unwrap();
    let rp = gsd(&["render", "run", "--time", "0.5", "--camera", "pose.json", "--out", "p.png"], d);
    assert!(rp.status.success(), "{}", String::from_utf8_lossy(&rp.stderr));

    assert_eq!(gsd(&["render", "run", "--time", "1.5"], d).status.code(), Some(1));
    assert_eq!(gsd(&["render", "run", "--time", "-0.1"], d).status.code(), Some(1));
    assert_eq!(gsd(&["render", "run", "--time", "0", "--camera", "99"], d).status.code(), Some(1));
    assert_eq!(gsd(&["render", "nowhere", "--time", "0"], d).status.code(), Some(2));

    let ev = gsd(&["eval", "run", "--data", "data", "--csv", "ev.csv"], d);
    assert!(ev.status.success(), "{}", String::from_utf8_lossy(&ev.stderr));
    let table = fs::read_to_string(d.join("ev.csv")).unwrap();
    assert_eq!(table.lines().count(), 1 + 5 + 1);
    assert!(line_with(&table, "mean").split(',').nth(2).unwrap().parse::<f64>().unwrap() > 5.0);
}

#[test]
fn resume_continues_the_same_trajectory() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert!(gsd(&["synth", "--out", "data"], d).status.success());
    assert!(train(d, "data", "full", "10", &[]).status.success());
    assert!(train(d, "data", "part", "10", &["--stop-after", "7"]).status.success());
    assert_eq!(fs::read_to_string(d.join("part/metrics.csv")).unwrap().lines().count(), 1 + 7);
    let resumed = gsd(&["train", "--data", "data", "--out", "part", "--resume", "part", "--iters", "10"], d);
    assert!(resumed.status.success(), "{}", String::from_utf8_lossy(&resumed.stderr));
    let rows = |p: &str| -> Vec<Vec<f64>> {
        fs::read_to_string(d.join(p))
            .unwrap()
            .lines()
            .skip(1)
            .map(|l| l.split(',').map(|v| v.parse().unwrap()).collect())
            .collect()
    };
    let (a, b) = (rows("full/metrics.csv"), rows("part/metrics.csv"));
    assert_eq!(a.len(), 10);
    assert_eq!(b.len(), 10);
    for (ra, rb) in a.iter().zip(&b) {
        assert_eq!(ra[0], rb[0]);
        assert!((ra[4] - rb[4]).abs() < 1e-6, "iter {}: {} vs {}", ra[0], ra[4], rb[4]);
    }
    let frozen = gsd(&["train", "--data", "data", "--out", "part", "--resume", "part", "--net-width", "8"], d);
    assert_eq!(frozen.status.code(), Some(1));
}

#[test]
fn eval_handles_empty_splits_and_size_mismatch() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert!(gsd(&["synth", "--out", "data"], d).status.success());
    assert!(train(d, "data", "run", "2", &[]).status.success());

    fs::remove_file(d.join("data/transforms_test.json")).unwrap();
    let ev = gsd(&["eval", "run", "--data", "data"], d);
    assert_eq!(ev.status.code(), Some(0));
    assert!(stdout(&ev).contains("no frames in the test split"));
    let csv = fs::read_to_string(d.join("run/checkpoint/eval_test.csv")).unwrap();
    assert_eq!(csv.trim(), "frame,time,psnr,ssim");

    let mut spec = ToySceneSpec::preset("sphere-translate", 0).unwrap();
    spec.width = 32;
    spec.height = 32;
    generate_toy_scene(&spec, &d.join("small")).unwrap();
    let bad = gsd(&["eval", "run", "--data", "small"], d);
    assert_eq!(bad.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&bad.stderr).contains("32x32"));
}

#[test]
fn config_errors_and_numeric_failures_have_distinct_codes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert!(gsd(&["synth", "--out", "data"], d).status.success());

    fs::write(d.join("bad.cfg"), "iterations = 3\nmomentum = 0.9\n").unwrap();
    let o = gsd(&["train", "--data", "data", "--out", "r", "--config", "bad.cfg"], d);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("momentum"));

    fs::write(d.join("good.cfg"), "# short run\niterations = 2\nwarmup = 1\ninit_points = 50\nnet_width = 16\n").unwrap();
    let o = gsd(&["train", "--data", "data", "--out", "r", "--config", "good.cfg", "--net-depth", "2"], d);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let saved = fs::read_to_string(d.join("r/checkpoint/config.txt")).unwrap();
    assert!(saved.contains("net_width = 16") && saved.contains("net_depth = 2"));

    assert_eq!(train(d, "missing", "r2", "1", &[]).status.code(), Some(2));

    let o = Command::new(env!("CARGO_BIN_EXE_gsd"))
        .args(["synth", "--out", "z"])
        .current_dir(d)
        .env("GSD_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(1));

    let blow_up = train(d, "data", "nan", "6", &["--lr-sh", "1e308"]);
    assert_eq!(blow_up.status.code(), Some(3), "{}", String::from_utf8_lossy(&blow_up.stderr));
}
