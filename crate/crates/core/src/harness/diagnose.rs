//! Gradient checks, Taylor-remainder scaling and alignment summaries.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::ablate::median;
use super::config::{Method, RunConfig};
use super::run::run_dir;
use crate::bench::{generate_source, PkSampler, Sample};
use crate::error::{Error, Result};
use crate::losses::{Batch, BatchKind, LossInputs, LossSpec, LossTerm, Scope};
use crate::model::{load_checkpoint, ModelParams};
use crate::optim::{model_gradient_check, taylor_alignment_diagnostic, CdrConfig, Mode};
use crate::util::rng_for;

pub const GRADIENT_STEP: f64 = 1e-4;
pub const MIN_COORDS: usize = 200;
pub const TAYLOR_ALPHAS: [f64; 3] = [1e-2, 5e-3, 2.5e-3];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientCheck {
    pub term: String,
    pub instances: usize,
    pub max_rel_error: f64,
}

/// Median over instances of `remainder(alpha) / remainder(alpha / 2)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaylorRatio {
    pub alpha: f64,
    pub instances: usize,
    pub median_ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentSummary {
    pub stage: usize,
    pub steps: usize,
    pub mean_dot_product: f64,
    pub positive_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnoseReport {
    pub seed: u64,
    pub gradient_checks: Vec<GradientCheck>,
    pub taylor: Vec<TaylorRatio>,
    /// From the `cdr_rcl` run's step log, when that run exists.
    pub alignment: Vec<AlignmentSummary>,
}

/// A random loss-evaluation instance: model, teacher, new and old batches.
pub struct Instance {
    pub params: ModelParams,
    pub historical: ModelParams,
    pub new: Batch,
    pub old: Batch,
}

impl Instance {
    pub fn inputs(&self) -> LossInputs<'_> {
        LossInputs {
            new: Some(&self.new),
            old: Some(&self.old),
            historical: Some(&self.historical),
        }
    }
}

/// Builds an instance from disjoint halves of the source identities. The
/// teacher is the model with small Gaussian noise added.
pub fn random_instance<R: Rng + ?Sized>(
    base: &ModelParams,
    source: &[Sample],
    p: usize,
    k: usize,
    noise: f64,
    rng: &mut R,
) -> Result<Instance> {
    let labels: Vec<Option<usize>> = source.iter().map(|s| s.label).collect();
    let max = labels.iter().flatten().max().copied().unwrap_or(0);
    let half = |keep_low: bool| -> Vec<Option<usize>> {
        labels
            .iter()
            .map(|l| l.filter(|&v| (v <= max / 2) == keep_low))
            .collect()
    };
    let new = PkSampler::new(&half(true)).sample(source, p, k, BatchKind::New, rng)?;
    let old = PkSampler::new(&half(false)).sample(source, p, k, BatchKind::Old, rng)?;
    let jitter = |v: &f64, rng: &mut R| v + noise * rng.sample::<f64, _>(rand_distr::StandardNormal);
    let params = base.with_values(base.values().iter().map(|v| jitter(v, rng)).collect())?;
    let historical = params
        .with_values(params.values().iter().map(|v| jitter(v, rng)).collect())?
        .to_historical();
    Ok(Instance {
        params,
        historical,
        new,
        old,
    })
}

/// The individual and composite objectives covered by the gradient checks.
pub fn checked_terms() -> Vec<(&'static str, LossSpec)> {
    let distill = crate::losses::Distillation::BOTH;
    vec![
        ("l_tri", LossSpec::single(LossTerm::Triplet(BatchKind::New))),
        ("l_cls", LossSpec::single(LossTerm::Classification(BatchKind::New))),
        ("l_rel", LossSpec::single(LossTerm::Relational(Scope::Both))),
        ("l_kl", LossSpec::single(LossTerm::Kl(Scope::Both))),
        ("l_adap", LossSpec::adaptation()),
        ("l_antif", LossSpec::antiforgetting(distill, Scope::Both)),
    ]
}

fn base_model(cfg: &RunConfig, seed: u64, checkpoint: Option<&Path>) -> Result<ModelParams> {
    match checkpoint {
        Some(c) => load_checkpoint(c),
        None => {
            let mut m = cfg.model.clone();
            m.num_classes = cfg.stream.source_ids;
            ModelParams::init(&m, &mut rng_for(seed, "diagnose/init"))
        }
    }
}

fn alignment(path: &Path) -> Result<Vec<AlignmentSummary>> {
    let Ok(text) = fs::read_to_string(path) else {
        return Ok(Vec::new());
    };
    let mut per_stage: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for line in text.lines() {
        let v: serde_json::Value = serde_json::from_str(line)?;
        if v["event"] != "step" || v["warmup"] == true {
            continue;
        }
        let (Some(stage), Some(dp)) = (v["stage"].as_u64(), v["dot_product"].as_f64()) else {
            continue;
        };
        per_stage.entry(stage as usize).or_default().push(dp);
    }
    Ok(per_stage
        .into_iter()
        .map(|(stage, dps)| AlignmentSummary {
            stage,
            steps: dps.len(),
            mean_dot_product: dps.iter().sum::<f64>() / dps.len() as f64,
            positive_fraction: dps.iter().filter(|&&d| d > 0.0).count() as f64 / dps.len() as f64,
        })
        .collect())
}

/// Runs the diagnostics on `instances` random instances around the given
/// checkpoint (or a fresh model) and writes `<out>/diagnose/<seed>/report.json`.
pub fn cmd_diagnose(cfg: &RunConfig, seed: u64, checkpoint: Option<&Path>, instances: usize) -> Result<DiagnoseReport> {
    cfg.validate()?;
    if instances == 0 {
        return Err(Error::Config("diagnose needs at least one instance".into()));
    }
    let stream = cfg.stream.resolve(seed)?;
    let source = generate_source(&stream).train;
    let base = base_model(cfg, seed, checkpoint)?;
    let (p, k) = (cfg.run.batch_ids, cfg.run.batch_instances);
    let mut rng = rng_for(seed, "diagnose/instances");
    let terms = checked_terms();
    let mut worst = vec![0.0f64; terms.len()];
    let plan = CdrConfig {
        mode: Mode::CdrRcl,
        ..cfg.optimizer.clone()
    }
    .plan();
    let mut ratios: Vec<Vec<f64>> = vec![Vec::new(); TAYLOR_ALPHAS.len() - 1];
    for _ in 0..instances {
        let inst = random_instance(&base, &source, p, k, 0.05, &mut rng)?;
        let inputs = inst.inputs();
        for (i, (_, spec)) in terms.iter().enumerate() {
            let err = model_gradient_check(&inst.params, &inputs, spec, &cfg.losses, GRADIENT_STEP, MIN_COORDS, &mut rng)?;
            worst[i] = worst[i].max(err);
        }
        let recs = taylor_alignment_diagnostic(&inst.params, &inputs, &plan, &cfg.losses, &TAYLOR_ALPHAS)?;
        for (i, pair) in recs.windows(2).enumerate() {
            if pair[1].remainder > 0.0 {
                ratios[i].push(pair[0].remainder / pair[1].remainder);
            }
        }
    }
    let report = DiagnoseReport {
        seed,
        gradient_checks: terms
            .iter()
            .zip(&worst)
            .map(|((name, _), &e)| GradientCheck {
                term: name.to_string(),
                instances,
                max_rel_error: e,
            })
            .collect(),
        taylor: ratios
            .iter_mut()
            .enumerate()
            .map(|(i, r)| TaylorRatio {
                alpha: TAYLOR_ALPHAS[i],
                instances: r.len(),
                median_ratio: median(r).unwrap_or(f64::NAN),
            })
            .collect(),
        alignment: alignment(&run_dir(&cfg.with_method(Method::CdrRcl), seed).join("diag.jsonl"))?,
    };
    let dir = cfg.run.out.join("diagnose").join(seed.to_string());
    fs::create_dir_all(&dir)?;
    fs::write(dir.join("report.json"), serde_json::to_string_pretty(&report)?)?;
    Ok(report)
}
