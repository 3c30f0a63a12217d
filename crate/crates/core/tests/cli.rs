use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn corrfuse(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_corrfuse"))
        .args(args)
        .env_remove("CORRFUSE_OUT")
        .output()
        .expect("spawn corrfuse")
}

fn ok(args: &[&str]) -> Output {
    let out = corrfuse(args);
    assert!(
        out.status.success(),
        "corrfuse {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn small_dataset(dir: &Path) -> std::path::PathBuf {
    let data = dir.join("data");
    ok(&[
        "gen", "--out", s(&data), "--scenes", "6", "--points", "24", "--model-points", "80", "--seed", "4",
    ]);
    data
}

#[test]
fn usage_errors_exit_with_one() {
    assert_eq!(corrfuse(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(corrfuse(&["train", "--lr", "fast"]).status.code(), Some(1));
    assert_eq!(corrfuse(&["gen", "--occlusion", "0.9", "--out", "/tmp/never-written"]).status.code(), Some(1));
    assert_eq!(corrfuse(&["--help"]).status.code(), Some(0));
}

#[test]
fn runtime_failures_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nothing-here");
    let out = corrfuse(&["eval", "--data", s(&missing), "--oracle", "true", "--out", s(dir.path())]);
    assert_eq!(out.status.code(), Some(2));
    assert!(!out.stderr.is_empty());
}

#[test]
fn unknown_config_keys_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.cfg");
    fs::write(&cfg, "[gen]\nscenes = 3\nscenez = 4\n").unwrap();
    let out = corrfuse(&["gen", "--config", s(&cfg), "--out", s(&dir.path().join("d"))]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("scenez"));
}

#[test]
fn gen_is_deterministic_and_echo_reproduces_it() {
    let dir = tempfile::tempdir().unwrap();
    let a = small_dataset(dir.path());
    let b = dir.path().join("again");
    ok(&["gen", "--config", s(&a.join("config.echo")), "--out", s(&b)]);
    assert_eq!(tree(&a), tree(&b));
}

/// Relative path and contents of every file below `root`, sorted. The echo
/// is skipped because it records the output directory.
fn tree(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else if !path.ends_with("config.echo") {
                let rel = path.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.push((rel, fs::read(&path).unwrap()));
            }
        }
    }
    out.sort();
    assert!(out.len() > 2);
    out
}

#[test]
fn oracle_eval_scores_zero() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_dataset(dir.path());
    let out = dir.path().join("eval");
    ok(&["eval", "--data", s(&data), "--oracle", "true", "--out", s(&out)]);
    let csv = fs::read_to_string(out.join("report.csv")).unwrap();
    assert!(csv.lines().count() > 1);
    let dump = fs::read_to_string(out.join("distances.txt")).unwrap();
    for line in dump.lines().filter(|l| !l.starts_with('#')) {
        let d: f64 = line.split_whitespace().last().unwrap().parse().unwrap();
        assert!(d < 1e-9, "oracle distance {d} in {line:?}");
    }
}

#[test]
fn train_then_report_from_dump() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_dataset(dir.path());
    let run = dir.path().join("train");
    ok(&[
        "train", "--data", s(&data), "--out", s(&run), "--epochs", "1", "--dim", "8", "--encoder-hidden", "8",
        "--head-hidden", "8", "--lr", "1e-3", "--lr-schedule", "cosine",
    ]);
    let echo = fs::read_to_string(run.join("config.echo")).unwrap();
    assert!(echo.contains("lr_schedule = cosine"), "{echo}");
    let log = fs::read_to_string(run.join("estimator.log.jsonl")).unwrap();
    assert_eq!(log.lines().filter(|l| l.contains(r#""record":"epoch""#)).count(), 1);
    assert!(!run.join("refiner.ckpt").exists());

    let ev = dir.path().join("eval");
    ok(&["eval", "--data", s(&data), "--checkpoint", s(&run.join("estimator.ckpt")), "--out", s(&ev)]);
    let rep = dir.path().join("report");
    ok(&["report", "--dump", s(&ev.join("distances.txt")), "--out", s(&rep)]);
    assert_eq!(
        fs::read_to_string(ev.join("report.csv")).unwrap(),
        fs::read_to_string(rep.join("report.csv")).unwrap()
    );
}
