use std::path::Path;
use std::process::{Command, Output};

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_spike-sparse")).args(args).output().expect("binary runs")
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn selftest_succeeds() {
    let out = run(&["selftest"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stdout));
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.lines().any(|l| l.starts_with("PASS")));
    assert!(!text.contains("FAIL"));
}

#[test]
fn unknown_flag_is_a_usage_error() {
    assert_eq!(run(&["selftest", "--bogus"]).status.code(), Some(2));
}

#[test]
fn profile_requires_checkpoint() {
    assert_eq!(run(&["profile", "--input", "x.xyz"]).status.code(), Some(2));
}

#[test]
fn missing_input_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("o.svt");
    let code = run(&["voxelize", "--input", path(&dir.path().join("absent.xyz")), "--output", path(&out)]).status.code();
    assert_eq!(code, Some(3));
}

#[test]
fn toy_pipeline_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let gen = run(&["gen-toy", "--out-dir", path(d), "--per-class", "2", "--seed", "1"]);
    assert_eq!(gen.status.code(), Some(0));
    let manifest = d.join("manifest.txt");
    assert!(manifest.exists());

    let svt = d.join("one.svt");
    let first = std::fs::read_dir(d)
        .unwrap()
        .map(|e| e.unwrap().path())
        .find(|p| p.extension().is_some_and(|e| e == "xyz"))
        .unwrap();
    assert_eq!(run(&["voxelize", "--input", path(&first), "--output", path(&svt)]).status.code(), Some(0));
    assert!(svt.exists());

    let ckpt = d.join("model.swt");
    let train = run(&[
        "train", "--manifest", path(&manifest), "--checkpoint", path(&ckpt), "--epochs", "1", "--batch-size", "4",
        "--num-classes", "4",
    ]);
    assert_eq!(train.status.code(), Some(0), "{}", String::from_utf8_lossy(&train.stderr));
    assert!(ckpt.exists() && ckpt.with_extension("cfg").exists() && ckpt.with_extension("log.jsonl").exists());

    let eval = run(&["eval", "--checkpoint", path(&ckpt), "--manifest", path(&manifest)]);
    assert_eq!(eval.status.code(), Some(0), "{}", String::from_utf8_lossy(&eval.stderr));
    let v: serde_json::Value = serde_json::from_slice(&eval.stdout).unwrap();
    let acc = v["accuracy"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&acc));
    assert_eq!(v["samples"], 8);

    let prof = run(&["profile", "--checkpoint", path(&ckpt), "--input", path(&svt)]);
    assert_eq!(prof.status.code(), Some(0), "{}", String::from_utf8_lossy(&prof.stderr));
    assert!(String::from_utf8_lossy(&prof.stdout).contains("total_mJ"));
}
