//! Acceptance gate: prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

mod common;

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::process::ExitCode;
use std::time::Instant;

use luda::bench::Scenario;
use luda::eval::{average_precision, MetricRecord};
use luda::harness::{cmd_run, cmd_run_in, median, Method, RunConfig, RunOutcome};
use luda::memory::MemoryPolicy;

const SLACK: f64 = 0.005;
const LADDER: [Method; 5] = [Method::Stagewise, Method::ReplayJoint, Method::Cdr, Method::CdrKl, Method::CdrRcl];

struct Gate {
    failures: usize,
}

impl Gate {
    fn check(&mut self, id: usize, name: &str, ok: bool, detail: String) {
        println!("{} criterion {id:>2} {name}: {detail}", if ok { "PASS" } else { "FAIL" });
        if !ok {
            self.failures += 1;
        }
    }
}

fn final_map(records: &[MetricRecord], split: &str) -> f64 {
    let last = records.iter().map(|r| r.stage).max().expect("no records");
    records
        .iter()
        .find(|r| r.stage == last && r.split == split)
        .unwrap_or_else(|| panic!("no final {split} record"))
        .map
}

fn med(mut values: Vec<f64>) -> f64 {
    median(&mut values).expect("no values")
}

fn split_maps(records: &[MetricRecord], split: &str) -> Vec<f64> {
    let mut rows: Vec<&MetricRecord> = records.iter().filter(|r| r.split == split).collect();
    rows.sort_by_key(|r| r.stage);
    rows.iter().map(|r| r.map).collect()
}

fn runs(cfg: &RunConfig, seeds: &[u64]) -> Vec<RunOutcome> {
    seeds.iter().map(|&s| cmd_run(cfg, s).expect("run failed")).collect()
}

fn fmt(values: &[f64]) -> String {
    let parts: Vec<String> = values.iter().map(|v| format!("{v:.4}")).collect();
    format!("[{}]", parts.join(", "))
}

fn property_criteria(gate: &mut Gate) {
    let grads = common::gradient_check(20, 101);
    let worst = grads.iter().map(|r| r.worst).fold(0.0, f64::max);
    let kinks: usize = grads.iter().map(|r| r.kinks).sum();
    let enough = grads.iter().all(|r| r.checked >= 20 * common::FD_COORDS * 99 / 100);
    let detail: Vec<String> = grads.iter().map(|r| format!("{}={:.1e}", r.term, r.worst)).collect();
    gate.check(
        1,
        "gradient correctness",
        worst <= 1e-4 && enough,
        format!("20 instances, {}, {kinks} coordinates on selection kinks skipped", detail.join(" ")),
    );

    let gap = common::alpha_zero_gap(10, 102);
    gate.check(2, "zero-step reduction", gap <= 1e-12, format!("max coordinate gap {gap:.1e}"));

    let ratios = common::taylor_ratios(20, 103, &[1e-2, 5e-3]);
    let ok = ratios.iter().all(|r| (3.0..=5.0).contains(r));
    gate.check(3, "quadratic Taylor remainder", ok, format!("median ratios {}", fmt(&ratios)));

    let st = common::id_reservoir(10, 100, 100_000);
    let ok = st.max_ids <= 10 && (st.min_freq - 0.10).abs() <= 0.02 && (st.max_freq - 0.10).abs() <= 0.02;
    gate.check(
        4,
        "ID-wise reservoir",
        ok,
        format!("freq in [{:.4}, {:.4}], max resident {}", st.min_freq, st.max_freq, st.max_ids),
    );

    let mismatches = common::metric_mismatches(100, 104);
    let ap = average_precision(&[true, false, true]).expect("ap");
    let ok = mismatches == 0 && (ap - 5.0 / 6.0).abs() <= f64::EPSILON;
    gate.check(5, "metric oracles", ok, format!("{mismatches} mismatches in 100 splits, hand AP {ap}"));

    let mismatches = common::dbscan_mismatches(100, 105);
    let ari = common::dbscan_blob_ari(106);
    let ok = mismatches == 0 && ari == 1.0;
    gate.check(6, "DBSCAN oracle", ok, format!("{mismatches} mismatches in 100 instances, ARI {ari}"));
}

fn run_criteria(gate: &mut Gate, out: &Path) {
    let base = RunConfig::default().with_out(out.to_path_buf());
    let seeds = base.run.seeds.clone();

    let mut ladder: BTreeMap<&str, Vec<RunOutcome>> = BTreeMap::new();
    for m in LADDER {
        ladder.insert(m.name(), runs(&base.with_method(m), &seeds));
    }
    let src: Vec<f64> = LADDER
        .iter()
        .map(|m| med(ladder[m.name()].iter().map(|o| final_map(&o.records, "source")).collect()))
        .collect();
    let beats = src[1..].iter().all(|&v| v > src[0]);
    let ordered = src.windows(2).all(|w| w[1] >= w[0] - SLACK);
    let gap = src[4] - src[0];
    gate.check(
        7,
        "stationary ladder",
        beats && ordered && gap >= 0.05,
        format!("median final source mAP stagewise..cdr_rcl {}, cdr_rcl - stagewise {gap:.4}", fmt(&src)),
    );

    let dynamic = base.with_method(Method::CdrRcl).with_scenario(Scenario::Dynamic);
    let dyn_runs = runs(&dynamic, &seeds);
    let mut all_gain = true;
    let mut min_gain = f64::INFINITY;
    let mut recurrence = Vec::new();
    for o in &dyn_runs {
        let trained = split_maps(&o.records, "target");
        let pretrained = split_maps(&o.baseline, "target");
        assert_eq!(trained.len(), 6, "dynamic run must report six stages");
        for (t, p) in trained.iter().zip(&pretrained) {
            all_gain &= t > p;
            min_gain = min_gain.min(t - p);
        }
        recurrence.push(trained[3] - trained[0]);
    }
    let rec = med(recurrence);
    gate.check(
        8,
        "dynamic adaptation",
        all_gain && rec >= 0.0,
        format!("min gain over pre-trained {min_gain:.4}, median stage-4 minus stage-1 {rec:.4}"),
    );

    let degradation = |name: &str| {
        med(ladder[name]
            .iter()
            .map(|o| final_map(&o.baseline, "source") - final_map(&o.records, "source"))
            .collect())
    };
    let (d_rcl, d_sw) = (degradation("cdr_rcl"), degradation("stagewise"));
    gate.check(
        9,
        "anti-forgetting",
        d_rcl < d_sw,
        format!("median source degradation cdr_rcl {d_rcl:.4} vs stagewise {d_sw:.4}"),
    );

    let unseen = |name: &str| med(ladder[name].iter().map(|o| final_map(&o.records, "unseen")).collect());
    let (u_rcl, u_sw) = (unseen("cdr_rcl"), unseen("stagewise"));
    gate.check(
        10,
        "unseen-domain generalization",
        u_rcl >= u_sw,
        format!("median unseen mAP cdr_rcl {u_rcl:.4} vs stagewise {u_sw:.4}"),
    );

    let cfg = base.with_method(Method::CdrRcl);
    let first = out.join("determinism/a");
    let second = out.join("determinism/b");
    cmd_run_in(&cfg, seeds[0], &first).expect("run failed");
    cmd_run_in(&cfg, seeds[0], &second).expect("run failed");
    let a = fs::read(first.join("metrics.csv")).expect("metrics a");
    let b = fs::read(second.join("metrics.csv")).expect("metrics b");
    gate.check(11, "determinism", a == b, format!("metrics.csv {} vs {} bytes, identical: {}", a.len(), b.len(), a == b));

    let mut policy = vec![src[4]];
    for p in [MemoryPolicy::InstanceRs, MemoryPolicy::Fifo] {
        let mut c = cfg.clone();
        c.memory.policy = p;
        let finals = seeds.iter().map(|&s| {
            let o = cmd_run_in(&c, s, &out.join(p.name()).join(s.to_string())).expect("run failed");
            final_map(&o.records, "source")
        });
        policy.push(med(finals.collect()));
    }
    let ok = policy.windows(2).all(|w| w[0] >= w[1] - SLACK);
    gate.check(
        12,
        "memory-policy ablation",
        ok,
        format!("median final source mAP id_rs, instance_rs, fifo {}", fmt(&policy)),
    );
}

fn main() -> ExitCode {
    let start = Instant::now();
    let tmp = tempfile::tempdir().expect("tempdir");
    let mut gate = Gate { failures: 0 };
    property_criteria(&mut gate);
    run_criteria(&mut gate, tmp.path());
    println!(
        "acceptance: {} of 12 criteria passed in {:.0}s",
        12 - gate.failures,
        start.elapsed().as_secs_f64()
    );
    if gate.failures == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
