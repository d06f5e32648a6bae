//! Source pre-training and staged target runs.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use log::{info, warn};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::config::{ClassifierInit, Method, RunConfig};
use crate::bench::{generate_source, PkSampler, Sample, World};
use crate::cluster::{refresh_labels, LabelNamespace};
use crate::error::{Error, Result};
use crate::eval::{evaluate_split, evaluate_stage, write_metrics_csv, MetricRecord};
use crate::losses::{evaluate, BatchKind, LossInputs, LossSpec};
use crate::memory::MemoryBuffer;
use crate::model::{
    ema_update_in_place, grow_classifier, load_checkpoint, save_checkpoint, set_class_rows, ModelParams,
};
use crate::optim::{adam_apply, train_step, AdamHyper, AdamState, CdrConfig};
use crate::util::{derive_seed, rng_for};

pub const FAILURE_MARKER: &str = "FAILED.json";

/// `<out>/<method>/<seed>`
pub fn run_dir(cfg: &RunConfig, seed: u64) -> PathBuf {
    cfg.run.out.join(cfg.run.method.name()).join(seed.to_string())
}

/// `<out>/pretrain/<seed>`
pub fn pretrain_dir(cfg: &RunConfig, seed: u64) -> PathBuf {
    cfg.run.out.join("pretrain").join(seed.to_string())
}

pub fn pretrain_checkpoint(cfg: &RunConfig, seed: u64) -> PathBuf {
    pretrain_dir(cfg, seed).join("checkpoints").join("source")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainSummary {
    pub seed: u64,
    pub steps: usize,
    pub final_loss: f64,
    pub untrained_map: f64,
    pub untrained_rank1: f64,
    pub source_map: f64,
    pub source_rank1: f64,
}

/// Settings that determine the pre-trained checkpoint; a cached checkpoint
/// is reused only when these match.
fn pretrain_key(cfg: &RunConfig, seed: u64) -> Result<String> {
    let key = json!({
        "seed": seed,
        "model": cfg.model,
        "losses": cfg.losses,
        "stream": cfg.stream,
        "pretrain_epochs": cfg.run.pretrain_epochs,
        "pretrain_lr": cfg.run.pretrain_lr,
        "batch": [cfg.run.batch_ids, cfg.run.batch_instances],
        "adam": [cfg.optimizer.adam_beta1, cfg.optimizer.adam_beta2, cfg.optimizer.adam_eps],
    });
    Ok(serde_json::to_string_pretty(&key)?)
}

fn steps_per_epoch(labeled: usize, p: usize, k: usize) -> usize {
    labeled.div_ceil(p * k).max(1)
}

/// Supervised triplet + cross-entropy training on the labeled source domain.
pub fn cmd_pretrain(cfg: &RunConfig, seed: u64) -> Result<PretrainSummary> {
    cfg.validate()?;
    let dir = pretrain_dir(cfg, seed);
    fs::create_dir_all(&dir)?;
    let stream = cfg.stream.resolve(seed)?;
    let source = generate_source(&stream);
    let mut model_cfg = cfg.model.clone();
    model_cfg.num_classes = cfg.stream.source_ids;
    let mut params = ModelParams::init(&model_cfg, &mut rng_for(seed, "init"))?;
    let (untrained_rank1, untrained_map) = evaluate_split(&params, &source.test)?;

    let labels: Vec<Option<usize>> = source.train.iter().map(|s| s.label).collect();
    let sampler = PkSampler::new(&labels);
    let (p, k) = (cfg.run.batch_ids, cfg.run.batch_instances);
    let per_epoch = steps_per_epoch(sampler.num_samples(), p, k);
    let hyper = AdamHyper {
        lr: cfg.run.pretrain_lr,
        ..AdamHyper::from(&cfg.optimizer)
    };
    let mut state = AdamState::new(params.len());
    let mut rng = rng_for(seed, "pretrain/batches");
    let spec = LossSpec::adaptation();
    let mut steps = 0;
    let mut last = f64::NAN;
    for epoch in 0..cfg.run.pretrain_epochs {
        for _ in 0..per_epoch {
            let batch = sampler.sample(&source.train, p, k, BatchKind::New, &mut rng)?;
            let inputs = LossInputs {
                new: Some(&batch),
                ..Default::default()
            };
            let ev = evaluate(&params, &inputs, &spec, &cfg.losses, true)
                .map_err(|e| Error::numeric("pretrain", format!("epoch {epoch}, step {steps}: {e}")))?;
            if !ev.value.is_finite() {
                return Err(Error::numeric("pretrain", format!("epoch {epoch}, step {steps}: loss {}", ev.value)));
            }
            let grad = ev.gradient.expect("gradient requested");
            (params, state) = adam_apply(&state, &params, &grad, hyper)?;
            last = ev.value;
            steps += 1;
        }
    }
    save_checkpoint(&params, &pretrain_checkpoint(cfg, seed))?;
    let (source_rank1, source_map) = evaluate_split(&params, &source.test)?;
    let summary = PretrainSummary {
        seed,
        steps,
        final_loss: last,
        untrained_map,
        untrained_rank1,
        source_map,
        source_rank1,
    };
    let rows = [("untrained", untrained_rank1, untrained_map), ("pretrained", source_rank1, source_map)].map(
        |(m, rank1, map)| MetricRecord {
            method: m.into(),
            seed,
            stage: 0,
            split: "source".into(),
            rank1,
            map,
        },
    );
    write_metrics_csv(&rows, &dir.join("metrics.csv"))?;
    fs::write(dir.join("summary.json"), serde_json::to_string_pretty(&summary)?)?;
    fs::write(dir.join("pretrain-key.json"), pretrain_key(cfg, seed)?)?;
    info!("pretrained seed {seed}: source mAP {source_map:.4} (untrained {untrained_map:.4})");
    Ok(summary)
}

/// Loads the cached source checkpoint for this configuration, pre-training first if needed.
pub fn ensure_pretrained(cfg: &RunConfig, seed: u64) -> Result<ModelParams> {
    let key_path = pretrain_dir(cfg, seed).join("pretrain-key.json");
    let fresh = fs::read_to_string(&key_path).ok() == Some(pretrain_key(cfg, seed)?);
    if !fresh {
        cmd_pretrain(cfg, seed)?;
    }
    load_checkpoint(&pretrain_checkpoint(cfg, seed))
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub dir: PathBuf,
    pub records: Vec<MetricRecord>,
    /// The pre-trained model evaluated on every stage's splits.
    pub baseline: Vec<MetricRecord>,
}

/// Runs one method on one seed. On error a failure marker is left in the
/// run directory next to whatever outputs were already written.
pub fn cmd_run(cfg: &RunConfig, seed: u64) -> Result<RunOutcome> {
    cmd_run_in(cfg, seed, &run_dir(cfg, seed))
}

/// [`cmd_run`] writing into an explicit run directory.
pub fn cmd_run_in(cfg: &RunConfig, seed: u64, dir: &Path) -> Result<RunOutcome> {
    cfg.validate()?;
    fs::create_dir_all(dir)?;
    let marker = dir.join(FAILURE_MARKER);
    if marker.exists() {
        fs::remove_file(&marker)?;
    }
    run_inner(cfg, seed, dir).inspect_err(|e| {
        let body = json!({
            "method": cfg.run.method.name(),
            "seed": seed,
            "error": e.to_string(),
        });
        if let Err(w) = fs::write(&marker, body.to_string()) {
            warn!("could not write failure marker: {w}");
        }
    })
}

fn run_inner(cfg: &RunConfig, seed: u64, dir: &Path) -> Result<RunOutcome> {
    let stream = cfg.stream.resolve(seed)?;
    let mut resolved = cfg.clone();
    resolved.stream.num_stages = Some(stream.num_stages);
    resolved.stream.domain_schedule = Some(stream.schedule.clone());
    resolved.run.seeds = vec![seed];
    fs::write(dir.join("resolved-config.toml"), resolved.to_toml_string()?)?;

    let world = World::generate(&stream)?;
    let pretrained = ensure_pretrained(cfg, seed)?;
    let mut baseline = Vec::new();
    for t in 1..=stream.num_stages {
        baseline.extend(evaluate_stage(&pretrained, &world, t, "pretrained", seed)?);
    }
    write_metrics_csv(&baseline, &dir.join("baseline.csv"))?;

    let mut learner = Learner::new(cfg, seed, pretrained, dir)?;
    let records = match cfg.run.method {
        Method::AllInOne => learner.all_in_one(&world)?,
        _ => learner.staged(&world)?,
    };
    write_metrics_csv(&records, &dir.join("metrics.csv"))?;
    learner.diag.flush()?;
    Ok(RunOutcome {
        dir: dir.to_path_buf(),
        records,
        baseline,
    })
}

struct Learner<'a> {
    cfg: &'a RunConfig,
    opt: CdrConfig,
    seed: u64,
    params: ModelParams,
    historical: Option<ModelParams>,
    adam: AdamState,
    memory: Option<MemoryBuffer>,
    namespace: LabelNamespace,
    rng: ChaCha8Rng,
    init_rng: ChaCha8Rng,
    dir: PathBuf,
    diag: BufWriter<File>,
}

fn with_labels(samples: &[Sample], labels: &[Option<usize>]) -> Vec<Sample> {
    samples
        .iter()
        .zip(labels)
        .map(|(s, l)| {
            let mut s = s.clone();
            s.label = *l;
            s
        })
        .collect()
}

impl<'a> Learner<'a> {
    fn new(cfg: &'a RunConfig, seed: u64, pretrained: ModelParams, dir: &Path) -> Result<Self> {
        let opt = cfg.optimizer_for_method();
        let staged = cfg.run.method != Method::AllInOne;
        let historical = (staged && opt.needs_historical()).then(|| pretrained.to_historical());
        let memory = if staged && opt.mode.uses_replay() {
            let mut m = MemoryBuffer::new(cfg.memory.clone(), derive_seed(seed, "memory"))?;
            let stream = cfg.stream.resolve(seed)?;
            let source = generate_source(&stream);
            for label in 0..cfg.stream.source_ids {
                let members: Vec<Sample> = source.train.iter().filter(|s| s.label == Some(label)).cloned().collect();
                m.offer(label, &members)?;
            }
            Some(m)
        } else {
            None
        };
        Ok(Self {
            cfg,
            opt,
            seed,
            adam: AdamState::new(pretrained.len()),
            namespace: LabelNamespace::new(pretrained.num_classes()),
            params: pretrained,
            historical,
            memory,
            rng: rng_for(seed, "run/batches"),
            init_rng: rng_for(seed, "run/classifier"),
            dir: dir.to_path_buf(),
            diag: BufWriter::new(File::create(dir.join("diag.jsonl"))?),
        })
    }

    fn log(&mut self, value: serde_json::Value) -> Result<()> {
        writeln!(self.diag, "{value}")?;
        Ok(())
    }

    /// Re-clusters `samples`; keeps `previous` when clustering fails or yields too few identities.
    fn refresh(
        &mut self,
        samples: &[Sample],
        previous: Option<Vec<Option<usize>>>,
        stage: usize,
        epoch: usize,
    ) -> Result<Option<Vec<Option<usize>>>> {
        let inputs: Vec<&[f64]> = samples.iter().map(|s| s.x.as_slice()).collect();
        let p = self.cfg.run.batch_ids;
        let attempt = refresh_labels(&inputs, &self.params, &self.cfg.cluster, &mut self.namespace).and_then(|a| {
            if a.num_new_clusters < p {
                Err(Error::Clustering(format!(
                    "{} clusters cannot fill a batch of {p} identities",
                    a.num_new_clusters
                )))
            } else {
                Ok(a)
            }
        });
        match attempt {
            Ok(a) => {
                let size = self.namespace.size();
                grow_classifier(&mut self.params, self.historical.as_mut(), size, &mut self.init_rng)?;
                if self.cfg.run.classifier_init == ClassifierInit::Centroid {
                    set_class_rows(
                        &mut self.params,
                        self.historical.as_mut(),
                        a.namespace_offset,
                        &a.centroids,
                        self.cfg.run.centroid_scale,
                    )?;
                }
                self.adam.grow(self.params.len());
                self.log(json!({
                    "event": "refresh",
                    "stage": stage,
                    "epoch": epoch,
                    "clusters": a.num_new_clusters,
                    "noise": a.num_noise(),
                    "namespace": size,
                }))?;
                Ok(Some(a.labels))
            }
            Err(Error::Clustering(msg)) => {
                warn!("stage {stage} epoch {epoch}: {msg}; keeping previous pseudo labels");
                self.log(json!({
                    "event": "clustering_failure",
                    "stage": stage,
                    "epoch": epoch,
                    "reason": msg,
                    "fallback": previous.is_some(),
                }))?;
                Ok(previous)
            }
            Err(e) => Err(e),
        }
    }

    fn train_on(&mut self, samples: &[Sample], epochs: usize, stage: usize) -> Result<Vec<Option<usize>>> {
        let period = self.cfg.cluster.refresh_period_epochs;
        let (p, k) = (self.cfg.run.batch_ids, self.cfg.run.batch_instances);
        let mut labels: Option<Vec<Option<usize>>> = None;
        for epoch in 0..epochs {
            if epoch % period == 0 {
                labels = self.refresh(samples, labels.take(), stage, epoch)?;
            }
            // First clustering failed: skip the stage.
            let Some(current) = labels.as_ref() else {
                break;
            };
            let sampler = PkSampler::new(current);
            let per_epoch = steps_per_epoch(sampler.num_samples(), p, k);
            for step in 0..per_epoch {
                let new = sampler.sample(samples, p, k, BatchKind::New, &mut self.rng)?;
                let old = match &self.memory {
                    Some(m) => match m.sample_old_batch(p, k, &mut self.rng) {
                        Ok(b) => Some(b),
                        Err(Error::WarmUp { .. }) => None,
                        Err(e) => return Err(e),
                    },
                    None => None,
                };
                let inputs = LossInputs {
                    new: Some(&new),
                    old: old.as_ref(),
                    historical: self.historical.as_ref(),
                };
                let out = train_step(&self.params, &self.adam, &inputs, &self.opt, &self.cfg.losses)
                    .map_err(|e| Error::numeric("training step", format!("stage {stage}, epoch {epoch}, step {step}: {e}")))?;
                self.params = out.params;
                self.adam = out.state;
                if let Some(h) = self.historical.as_mut() {
                    ema_update_in_place(h, &self.params, self.cfg.run.ema_beta)?;
                }
                let d = out.diagnostics;
                self.log(json!({
                    "event": "step",
                    "stage": stage,
                    "epoch": epoch,
                    "step": step,
                    "warmup": d.warmup,
                    "dot_product": d.dot_product,
                    "grad_norm_adap": d.grad_norm_adap,
                    "grad_norm_antif": d.grad_norm_antif,
                    "grad_norm_total": d.grad_norm_total,
                    "l_adap": out.report.l_adap,
                    "l_antif": out.report.l_antif,
                    "l_rel": out.report.l_rel,
                    "l_kl": out.report.l_kl,
                }))?;
            }
        }
        Ok(labels.unwrap_or_else(|| vec![None; samples.len()]))
    }

    /// Stores every final pseudo identity of the stage in memory.
    fn remember(&mut self, samples: &[Sample], labels: &[Option<usize>]) -> Result<()> {
        let Some(memory) = self.memory.as_mut() else {
            return Ok(());
        };
        let labeled = with_labels(samples, labels);
        let mut groups: std::collections::BTreeMap<usize, Vec<Sample>> = Default::default();
        for s in labeled {
            if let Some(l) = s.label {
                groups.entry(l).or_default().push(s);
            }
        }
        for (label, members) in groups {
            memory.offer(label, &members)?;
        }
        Ok(())
    }

    fn staged(&mut self, world: &World) -> Result<Vec<MetricRecord>> {
        let mut records = Vec::new();
        let checkpoints = self.dir.join("checkpoints");
        for stage in &world.stages {
            let t = stage.stage;
            let labels = self.train_on(&stage.train, self.cfg.run.epochs_per_stage, t)?;
            self.remember(&stage.train, &labels)?;
            save_checkpoint(&self.params, &checkpoints.join(format!("stage_{t}")))?;
            if let Some(m) = &self.memory {
                fs::write(
                    checkpoints.join(format!("memory_stage_{t}.json")),
                    serde_json::to_string(&m.snapshot())?,
                )?;
            }
            let rows = evaluate_stage(&self.params, world, t, self.cfg.run.method.name(), self.seed)?;
            if let Some(r) = rows.iter().find(|r| r.split == "target") {
                info!("{} seed {} stage {t}: target mAP {:.4}", self.cfg.run.method, self.seed, r.map);
            }
            records.extend(rows);
        }
        Ok(records)
    }

    /// One model trained on the union of all stage data, reported at every stage.
    fn all_in_one(&mut self, world: &World) -> Result<Vec<MetricRecord>> {
        let union: Vec<Sample> = world.stages.iter().flat_map(|s| s.train.iter().cloned()).collect();
        self.train_on(&union, self.cfg.run.epochs_per_stage, 0)?;
        save_checkpoint(&self.params, &self.dir.join("checkpoints").join("final"))?;
        let mut records = Vec::new();
        for t in 1..=world.stages.len() {
            records.extend(evaluate_stage(&self.params, world, t, self.cfg.run.method.name(), self.seed)?);
        }
        Ok(records)
    }
}
