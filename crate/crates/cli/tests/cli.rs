//! The `luda` binary end to end on a shortened stream.

use std::path::Path;
use std::process::Command;

const CONFIG: &str = "[stream]\nnum_stages = 2\n[run]\nepochs_per_stage = 1\npretrain_epochs = 2\nseeds = [5]\n";

fn luda(dir: &Path, args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_luda"))
        .args(args)
        .arg("--config")
        .arg(dir.join("config.toml"))
        .arg("--out")
        .arg(dir.join("out"))
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

#[test]
fn pretrain_run_and_eval() {
    let tmp = tempfile::tempdir().unwrap();
    std::fs::write(tmp.path().join("config.toml"), CONFIG).unwrap();
    let out = tmp.path().join("out");
    assert!(luda(tmp.path(), &["pretrain"]).status.success());
    assert!(out.join("pretrain/5/checkpoints/source.bin").exists());
    let run = luda(tmp.path(), &["run", "--method", "cdr", "--scenario", "dynamic"]);
    assert!(run.status.success(), "{}", String::from_utf8_lossy(&run.stderr));
    assert!(out.join("cdr/5/metrics.csv").exists());
    let stem = out.join("cdr/5/checkpoints/stage_2");
    let eval = luda(tmp.path(), &["eval", "--checkpoint", stem.to_str().unwrap()]);
    assert!(eval.status.success(), "{}", String::from_utf8_lossy(&eval.stderr));
    assert!(out.join("eval/5/metrics.csv").exists());
}

#[test]
fn failure_writes_marker_and_exit_code() {
    let tmp = tempfile::tempdir().unwrap();
    std::fs::write(tmp.path().join("config.toml"), CONFIG).unwrap();
    let stem = tmp.path().join("missing");
    let r = luda(tmp.path(), &["eval", "--checkpoint", stem.to_str().unwrap()]);
    assert!(!r.status.success());
    let marker = std::fs::read_to_string(tmp.path().join("out/FAILED.json")).unwrap();
    assert!(marker.contains("\"command\":\"eval\""), "{marker}");
}

#[test]
fn invalid_config_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    std::fs::write(tmp.path().join("config.toml"), "[run]\nunknown = 1\n").unwrap();
    assert!(!luda(tmp.path(), &["run"]).status.success());
}
