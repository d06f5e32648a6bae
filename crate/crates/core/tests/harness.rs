//! Staged runs end to end on a shortened stream: outputs, determinism,
//! failure markers, ablation merging and configuration round trips.

use std::fs;
use std::path::Path;

use luda::bench::Scenario;
use luda::eval::read_metrics_csv;
use luda::harness::{
    cmd_ablate, cmd_diagnose, cmd_run, cmd_run_in, AblationPlan, Method, RunConfig, FAILURE_MARKER,
};
use luda::memory::MemoryPolicy;
use luda::optim::DistillChoice;

fn short(out: &Path) -> RunConfig {
    let mut cfg = RunConfig::default().with_out(out.to_path_buf());
    cfg.stream.num_stages = Some(2);
    cfg.run.epochs_per_stage = 2;
    cfg.run.pretrain_epochs = 3;
    cfg.run.seeds = vec![3];
    cfg
}

#[test]
fn run_writes_every_artifact() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = short(tmp.path()).with_method(Method::CdrRcl);
    let o = cmd_run(&cfg, 3).unwrap();
    for f in ["resolved-config.toml", "metrics.csv", "baseline.csv", "diag.jsonl", "checkpoints/stage_2.bin"] {
        assert!(o.dir.join(f).exists(), "missing {f}");
    }
    let resolved = RunConfig::load(&o.dir.join("resolved-config.toml")).unwrap();
    assert_eq!(resolved.stream.num_stages, Some(2));
    assert_eq!(read_metrics_csv(&o.dir.join("metrics.csv")).unwrap(), o.records);
    let stages: Vec<usize> = o.records.iter().map(|r| r.stage).collect();
    assert!(stages.contains(&1) && stages.contains(&2));
    assert!(o.records.iter().all(|r| (0.0..=1.0).contains(&r.map)));
}

#[test]
fn identical_runs_are_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = short(tmp.path()).with_method(Method::CdrRcl);
    let a = cmd_run_in(&cfg, 3, &tmp.path().join("a")).unwrap();
    let b = cmd_run_in(&cfg, 3, &tmp.path().join("b")).unwrap();
    let read = |d: &Path| fs::read(d.join("metrics.csv")).unwrap();
    assert_eq!(read(&a.dir), read(&b.dir));
}

#[test]
fn dynamic_scenario_runs_every_method() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = short(tmp.path()).with_scenario(Scenario::Dynamic);
    cfg.stream.num_stages = Some(3);
    cfg.run.epochs_per_stage = 1;
    for m in Method::LADDER.iter().copied().chain([Method::AllInOne]) {
        let o = cmd_run(&cfg.with_method(m), 3).unwrap();
        assert_eq!(o.records.iter().map(|r| r.stage).max(), Some(3), "{m}");
    }
}

#[test]
fn failed_run_leaves_a_marker() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = short(tmp.path());
    cfg.stream.id_rank = 0;
    let dir = tmp.path().join("broken");
    assert!(cmd_run_in(&cfg, 3, &dir).is_err());
    assert!(dir.join(FAILURE_MARKER).exists());
}

#[test]
fn ablation_merges_variants() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = short(tmp.path());
    let plan = AblationPlan {
        methods: vec![Method::Stagewise, Method::CdrRcl],
        memory_policies: vec![MemoryPolicy::IdRs, MemoryPolicy::Fifo],
        distill: vec![DistillChoice::OnlyKl],
    };
    let rows = cmd_ablate(&cfg, &plan).unwrap();
    let mut variants: Vec<&str> = rows.iter().map(|r| r.variant.as_str()).collect();
    variants.dedup();
    assert_eq!(
        variants,
        ["stagewise", "cdr_rcl", "cdr_rcl+memory=id_rs", "cdr_rcl+memory=fifo", "cdr_rcl+distill=only_kl"]
    );
    let by = |v: &str| rows.iter().filter(|r| r.variant == v).map(|r| r.map).collect::<Vec<_>>();
    assert_eq!(by("cdr_rcl"), by("cdr_rcl+memory=id_rs"));
    assert!(tmp.path().join("ablation.csv").exists());
}

#[test]
fn diagnose_reports_every_term() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = short(tmp.path());
    let r = cmd_diagnose(&cfg, 3, None, 2).unwrap();
    assert_eq!(r.gradient_checks.len(), 6);
    assert!(r.taylor.iter().all(|t| t.median_ratio.is_finite()));
    let text = fs::read_to_string(tmp.path().join("diagnose/3/report.json")).unwrap();
    serde_json::from_str::<serde_json::Value>(&text).unwrap();
}

#[test]
fn config_round_trips_through_toml() {
    let cfg = RunConfig::default().with_method(Method::CdrKl).with_scenario(Scenario::Dynamic);
    let text = cfg.to_toml_string().unwrap();
    assert_eq!(RunConfig::from_toml_str(&text).unwrap(), cfg);
}

#[test]
fn config_rejects_unknown_and_inconsistent_fields() {
    assert!(RunConfig::from_toml_str("[run]\nepochs = 3\n").is_err());
    assert!(RunConfig::from_toml_str("[model]\ninput_dim = 7\n").is_err());
    assert!(RunConfig::from_toml_str("[run]\nbatch_ids = 1\n").is_err());
    let partial = RunConfig::from_toml_str("[run]\nmethod = \"stagewise\"\n").unwrap();
    assert_eq!(partial.run.method, Method::Stagewise);
}
