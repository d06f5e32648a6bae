//! Ablation sweeps: the method ladder plus memory-policy and distillation toggles.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use super::config::{Method, RunConfig};
use super::run::cmd_run_in;
use crate::error::{Error, Result};
use crate::memory::MemoryPolicy;
use crate::optim::DistillChoice;

/// Which runs an ablation performs besides the method ladder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationPlan {
    pub methods: Vec<Method>,
    /// Memory policies compared under `cdr_rcl`.
    pub memory_policies: Vec<MemoryPolicy>,
    /// Distillation toggles compared under `cdr_rcl`.
    pub distill: Vec<DistillChoice>,
}

impl Default for AblationPlan {
    fn default() -> Self {
        Self {
            methods: Method::LADDER.to_vec(),
            memory_policies: vec![MemoryPolicy::IdRs, MemoryPolicy::InstanceRs, MemoryPolicy::Fifo],
            distill: vec![DistillChoice::OnlyKl, DistillChoice::OnlyRel, DistillChoice::Both],
        }
    }
}

/// One tidy row of the merged ablation table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub method: String,
    pub memory_policy: String,
    pub distill: String,
    pub seed: u64,
    pub stage: usize,
    pub split: String,
    pub rank1: f64,
    pub map: f64,
}

fn distill_name(d: DistillChoice) -> &'static str {
    match d {
        DistillChoice::Auto => "auto",
        DistillChoice::None => "none",
        DistillChoice::OnlyKl => "only_kl",
        DistillChoice::OnlyRel => "only_rel",
        DistillChoice::Both => "both",
    }
}

struct Variant {
    name: String,
    cfg: RunConfig,
}

fn variants(cfg: &RunConfig, plan: &AblationPlan) -> Vec<Variant> {
    let mut out: Vec<Variant> = plan
        .methods
        .iter()
        .map(|&m| Variant {
            name: m.name().to_string(),
            cfg: cfg.with_method(m),
        })
        .collect();
    for &policy in &plan.memory_policies {
        let mut c = cfg.with_method(Method::CdrRcl);
        c.memory.policy = policy;
        out.push(Variant {
            name: format!("cdr_rcl+memory={}", policy.name()),
            cfg: c,
        });
    }
    for &d in &plan.distill {
        let mut c = cfg.with_method(Method::CdrRcl);
        c.optimizer.distill = d;
        out.push(Variant {
            name: format!("cdr_rcl+distill={}", distill_name(d)),
            cfg: c,
        });
    }
    out
}

/// Runs every variant on every seed and merges the metrics into
/// `<out>/ablation.csv`. Variants whose configuration equals an earlier one
/// reuse that run's metrics.
pub fn cmd_ablate(cfg: &RunConfig, plan: &AblationPlan) -> Result<Vec<AblationRow>> {
    cfg.validate()?;
    if cfg.run.seeds.is_empty() {
        return Err(Error::Config("ablation needs at least one seed".into()));
    }
    let vars = variants(cfg, plan);
    let mut rows = Vec::new();
    for &seed in &cfg.run.seeds {
        let mut done: Vec<(usize, Vec<crate::eval::MetricRecord>)> = Vec::new();
        for (i, v) in vars.iter().enumerate() {
            let reused = done
                .iter()
                .find(|(j, _)| vars[*j].cfg == v.cfg)
                .map(|(_, r)| r.clone());
            let records = match reused {
                Some(r) => r,
                None => {
                    let dir: PathBuf = cfg.run.out.join(&v.name).join(seed.to_string());
                    cmd_run_in(&v.cfg, seed, &dir)?.records
                }
            };
            rows.extend(records.iter().map(|r| AblationRow {
                variant: v.name.clone(),
                method: v.cfg.run.method.name().to_string(),
                memory_policy: v.cfg.memory.policy.name().to_string(),
                distill: distill_name(v.cfg.optimizer.distill).to_string(),
                seed: r.seed,
                stage: r.stage,
                split: r.split.clone(),
                rank1: r.rank1,
                map: r.map,
            }));
            done.push((i, records));
        }
    }
    std::fs::create_dir_all(&cfg.run.out)?;
    let mut w = csv::Writer::from_path(cfg.run.out.join("ablation.csv"))?;
    for r in &rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(rows)
}

/// Median of `map` over seeds for rows matching `variant`, `split` and the
/// final stage present in the table.
pub fn median_final_map(rows: &[AblationRow], variant: &str, split: &str) -> Option<f64> {
    let last = rows.iter().filter(|r| r.variant == variant).map(|r| r.stage).max()?;
    let mut v: Vec<f64> = rows
        .iter()
        .filter(|r| r.variant == variant && r.split == split && r.stage == last)
        .map(|r| r.map)
        .collect();
    median(&mut v)
}

pub fn median(values: &mut [f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(f64::total_cmp);
    let n = values.len();
    Some(if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    })
}
