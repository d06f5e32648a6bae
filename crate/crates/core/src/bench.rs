//! Synthetic source and target streams.
//!
//! Every identity has a latent prototype. A domain is an invertible affine
//! map applied to prototypes plus per-sample appearance variation and sensor
//! noise, standing in for camera and style shifts. The source domain is
//! labeled; each target stage brings identities never seen before, drawn
//! under the domain its schedule names. A domain that recurs in the schedule
//! reuses exactly the same transform.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use nalgebra::DMatrix;
use rand::seq::index::sample;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{EvalGate, RetrievalSplit};
use crate::losses::{Batch, BatchKind};
use crate::util::rng_for;

/// Ground-truth identity. Readable only through an [`EvalGate`].
#[derive(Clone, Copy, Serialize, Deserialize)]
pub struct TrueId(u64);

impl TrueId {
    pub fn reveal(self, _gate: &EvalGate) -> u64 {
        self.0
    }
}

impl fmt::Debug for TrueId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("TrueId(..)")
    }
}

/// One observation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Sample {
    pub x: Vec<f64>,
    true_id: TrueId,
    /// Label in the global namespace, once assigned.
    pub label: Option<usize>,
    pub domain: String,
    /// 0 for source data, `t` for target stage `t`.
    pub stage: usize,
    /// Position inside the split that produced the sample.
    pub index: usize,
}

impl Sample {
    pub fn new(x: Vec<f64>, true_id: u64, domain: impl Into<String>, stage: usize, index: usize) -> Self {
        Self {
            x,
            true_id: TrueId(true_id),
            label: None,
            domain: domain.into(),
            stage,
            index,
        }
    }

    pub fn true_id(&self) -> TrueId {
        self.true_id
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    Stationary,
    Dynamic,
}

impl Scenario {
    pub fn name(self) -> &'static str {
        match self {
            Scenario::Stationary => "stationary",
            Scenario::Dynamic => "dynamic",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StreamConfig {
    pub input_dim: usize,
    pub scenario: Scenario,
    /// Defaults to 5 (stationary) or 6 (dynamic) when absent.
    pub num_stages: Option<usize>,
    /// Defaults to `[A; T]` (stationary) or `A,B,C` repeated (dynamic).
    pub domain_schedule: Option<Vec<String>>,
    pub source_ids: usize,
    pub source_samples_per_id: usize,
    pub ids_per_stage: usize,
    pub samples_per_id: usize,
    /// Log-normal spread of per-identity training sample counts around
    /// their configured mean; 0 gives every identity the same count.
    pub train_size_spread: f64,
    pub query_per_id: usize,
    pub gallery_per_id: usize,
    /// Identities in each per-domain and unseen-domain test split.
    pub eval_ids: usize,
    pub unseen_domain: String,
    /// Latent dimensions that carry identity; the remaining dimensions hold
    /// only per-sample variation.
    pub id_rank: usize,
    /// Standard deviation of identity prototypes per identity dimension.
    pub id_spread: f64,
    /// Per-sample appearance variation around the prototype.
    pub intra_spread: f64,
    /// Strength of the random linear part of target domain transforms.
    pub domain_shift: f64,
    pub offset_scale: f64,
    pub max_condition: f64,
    pub noise_scale: f64,
}

impl Default for StreamConfig {
    fn default() -> Self {
        Self {
            input_dim: 32,
            scenario: Scenario::Stationary,
            num_stages: None,
            domain_schedule: None,
            source_ids: 50,
            source_samples_per_id: 16,
            ids_per_stage: 20,
            samples_per_id: 16,
            train_size_spread: 0.0,
            query_per_id: 4,
            gallery_per_id: 8,
            eval_ids: 20,
            unseen_domain: "U".into(),
            id_rank: 8,
            id_spread: 1.0,
            intra_spread: 0.15,
            domain_shift: 1.0,
            offset_scale: 0.5,
            max_condition: 5.0,
            noise_scale: 0.1,
        }
    }
}

/// Stream configuration with scenario defaults materialized.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResolvedStream {
    pub config: StreamConfig,
    pub num_stages: usize,
    pub schedule: Vec<String>,
    pub seed: u64,
}

pub const SOURCE_DOMAIN: &str = "source";

impl StreamConfig {
    pub fn resolve(&self, seed: u64) -> Result<ResolvedStream> {
        let default_len = match self.scenario {
            Scenario::Stationary => 5,
            Scenario::Dynamic => 6,
        };
        let schedule = match &self.domain_schedule {
            Some(s) => s.clone(),
            None => {
                let len = self.num_stages.unwrap_or(default_len);
                match self.scenario {
                    Scenario::Stationary => vec!["A".to_string(); len],
                    Scenario::Dynamic => ["A", "B", "C"].iter().cycle().take(len).map(|s| s.to_string()).collect(),
                }
            }
        };
        let num_stages = self.num_stages.unwrap_or(schedule.len());
        if num_stages == 0 || schedule.len() != num_stages {
            return Err(Error::Config(format!(
                "domain schedule has {} entries for {num_stages} stages",
                schedule.len()
            )));
        }
        if self.scenario == Scenario::Stationary && schedule.iter().any(|d| d != &schedule[0]) {
            return Err(Error::Config("a stationary stream needs a constant domain schedule".into()));
        }
        if schedule.iter().any(|d| d == &self.unseen_domain || d == SOURCE_DOMAIN) {
            return Err(Error::Config(format!(
                "schedule may not contain the source or held-out domain '{}'",
                self.unseen_domain
            )));
        }
        if self.input_dim == 0
            || self.source_ids < 2
            || self.ids_per_stage < 2
            || self.samples_per_id == 0
            || self.source_samples_per_id == 0
            || self.query_per_id == 0
            || self.gallery_per_id == 0
            || self.eval_ids < 2
            || self.id_rank == 0
            || self.id_rank > self.input_dim
        {
            return Err(Error::Config("stream sizes must be positive (>= 2 identities)".into()));
        }
        if !(self.train_size_spread >= 0.0) {
            return Err(Error::Config("train_size_spread must be >= 0".into()));
        }
        if !(self.max_condition >= 1.0) || !(self.noise_scale >= 0.0) {
            return Err(Error::Config("max_condition must be >= 1 and noise_scale >= 0".into()));
        }
        Ok(ResolvedStream {
            config: self.clone(),
            num_stages,
            schedule,
            seed,
        })
    }
}

/// Affine map from latent prototypes to observations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainSpec {
    pub name: String,
    /// Row-major `d × d`.
    pub matrix: Vec<f64>,
    pub offset: Vec<f64>,
    pub noise_scale: f64,
}

fn gaussian<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}

fn condition_number(m: &DMatrix<f64>) -> f64 {
    let sv = m.clone().svd(false, false).singular_values;
    let max = sv.iter().copied().fold(0.0, f64::max);
    let min = sv.iter().copied().fold(f64::INFINITY, f64::min);
    if min > 0.0 {
        max / min
    } else {
        f64::INFINITY
    }
}

impl DomainSpec {
    /// Deterministic in `(seed, name)`. The linear part is `Q·diag(s)`:
    /// `Q` orthogonalizes `I + shift·G/√d` and the scales `s` lie in
    /// `[κ^-½, κ^½]`, so the condition number never exceeds `κ`. The source
    /// domain carries the same kind of random map as the targets.
    pub fn generate(stream: &ResolvedStream, name: &str) -> Self {
        let cfg = &stream.config;
        let d = cfg.input_dim;
        let mut rng = rng_for(stream.seed, &format!("domain/{name}"));
        let shift = cfg.domain_shift / (d as f64).sqrt();
        let mut m = DMatrix::<f64>::identity(d, d);
        for v in m.iter_mut() {
            *v += shift * gaussian(&mut rng);
        }
        let qr = m.qr();
        let mut q = qr.q();
        let r = qr.r();
        for c in 0..d {
            if r[(c, c)] < 0.0 {
                q.column_mut(c).neg_mut();
            }
        }
        for c in 0..d {
            let s = cfg.max_condition.powf(rng.random::<f64>() - 0.5);
            q.column_mut(c).scale_mut(s);
        }
        let offset = (0..d).map(|_| cfg.offset_scale * gaussian(&mut rng)).collect();
        Self {
            name: name.to_string(),
            matrix: q.transpose().iter().copied().collect(),
            offset,
            noise_scale: cfg.noise_scale,
        }
    }

    pub fn condition_number(&self) -> f64 {
        let d = self.offset.len();
        condition_number(&DMatrix::from_row_slice(d, d, &self.matrix))
    }

    pub fn apply(&self, latent: &[f64]) -> Vec<f64> {
        let d = self.offset.len();
        (0..d)
            .map(|r| {
                self.offset[r]
                    + self.matrix[r * d..(r + 1) * d]
                        .iter()
                        .zip(latent)
                        .map(|(a, z)| a * z)
                        .sum::<f64>()
            })
            .collect()
    }
}

/// Labeled source data with its held-out test split.
#[derive(Debug, Clone)]
pub struct SourceData {
    pub train: Vec<Sample>,
    pub test: RetrievalSplit,
}

/// One stage of the unlabeled target stream.
#[derive(Debug, Clone)]
pub struct StageStream {
    pub stage: usize,
    pub domain: String,
    pub train: Vec<Sample>,
    pub test: RetrievalSplit,
}

fn prototype(stream: &ResolvedStream, id: u64) -> Vec<f64> {
    let mut rng = rng_for(stream.seed, &format!("prototype/{id}"));
    let cfg = &stream.config;
    (0..cfg.input_dim)
        .map(|i| if i < cfg.id_rank { cfg.id_spread * gaussian(&mut rng) } else { 0.0 })
        .collect()
}

fn observe<R: Rng + ?Sized>(stream: &ResolvedStream, domain: &DomainSpec, proto: &[f64], rng: &mut R) -> Vec<f64> {
    let latent: Vec<f64> = proto
        .iter()
        .map(|m| m + stream.config.intra_spread * gaussian(rng))
        .collect();
    domain
        .apply(&latent)
        .into_iter()
        .map(|v| v + domain.noise_scale * gaussian(rng))
        .collect()
}

struct IdBlock<'a> {
    ids: &'a [u64],
    domain: &'a DomainSpec,
    stage: usize,
    tag: String,
}

/// Per-identity training sample counts: log-normal around `mean`, at least 2
/// and at most `4 * mean`.
fn train_sizes(stream: &ResolvedStream, block: &IdBlock<'_>, mean: usize) -> Vec<usize> {
    let spread = stream.config.train_size_spread;
    if spread == 0.0 {
        return vec![mean; block.ids.len()];
    }
    let mut rng = rng_for(stream.seed, &format!("{}/sizes", block.tag));
    block
        .ids
        .iter()
        .map(|_| {
            let m = (spread * gaussian(&mut rng) - 0.5 * spread * spread).exp();
            ((mean as f64 * m).round() as usize).clamp(2, 4 * mean)
        })
        .collect()
}

fn draw(stream: &ResolvedStream, block: &IdBlock<'_>, per_id: usize, part: &str) -> Vec<Sample> {
    let mut rng = rng_for(stream.seed, &format!("{}/{part}", block.tag));
    let sizes = if part == "train" {
        train_sizes(stream, block, per_id)
    } else {
        vec![per_id; block.ids.len()]
    };
    let mut out = Vec::with_capacity(sizes.iter().sum());
    for (&id, &n) in block.ids.iter().zip(&sizes) {
        let proto = prototype(stream, id);
        for _ in 0..n {
            let x = observe(stream, block.domain, &proto, &mut rng);
            let index = out.len();
            out.push(Sample::new(x, id, block.domain.name.clone(), block.stage, index));
        }
    }
    out
}

fn test_split(stream: &ResolvedStream, name: &str, block: &IdBlock<'_>) -> RetrievalSplit {
    let cfg = &stream.config;
    RetrievalSplit {
        name: name.to_string(),
        queries: draw(stream, block, cfg.query_per_id, "query"),
        gallery: draw(stream, block, cfg.gallery_per_id, "gallery"),
    }
}

const STAGE_ID_BASE: u64 = 1_000_000;
const DOMAIN_TEST_ID_BASE: u64 = 2_000_000;
const UNSEEN_ID_BASE: u64 = 3_000_000;

/// Source training data (labels = identity index) and its test split.
pub fn generate_source(stream: &ResolvedStream) -> SourceData {
    let cfg = &stream.config;
    let domain = DomainSpec::generate(stream, SOURCE_DOMAIN);
    let ids: Vec<u64> = (0..cfg.source_ids as u64).collect();
    let block = IdBlock {
        ids: &ids,
        domain: &domain,
        stage: 0,
        tag: "source".into(),
    };
    let mut train = draw(stream, &block, cfg.source_samples_per_id, "train");
    for s in &mut train {
        s.label = Some(s.true_id.0 as usize);
    }
    SourceData {
        train,
        test: test_split(stream, "source", &block),
    }
}

/// Target stage `t` (1-based): fresh identities under the scheduled domain.
pub fn generate_stage(stream: &ResolvedStream, t: usize) -> Result<StageStream> {
    if t == 0 || t > stream.num_stages {
        return Err(Error::Protocol(format!(
            "stage {t} is outside 1..={}",
            stream.num_stages
        )));
    }
    let cfg = &stream.config;
    let domain_name = &stream.schedule[t - 1];
    let domain = DomainSpec::generate(stream, domain_name);
    let first = STAGE_ID_BASE + ((t - 1) * cfg.ids_per_stage) as u64;
    let ids: Vec<u64> = (first..first + cfg.ids_per_stage as u64).collect();
    let block = IdBlock {
        ids: &ids,
        domain: &domain,
        stage: t,
        tag: format!("stage/{t}"),
    };
    Ok(StageStream {
        stage: t,
        domain: domain_name.clone(),
        train: draw(stream, &block, cfg.samples_per_id, "train"),
        test: test_split(stream, "target", &block),
    })
}

fn held_out_split(stream: &ResolvedStream, domain_name: &str, base: u64, split_name: &str) -> RetrievalSplit {
    let domain = DomainSpec::generate(stream, domain_name);
    let ids: Vec<u64> = (base..base + stream.config.eval_ids as u64).collect();
    let block = IdBlock {
        ids: &ids,
        domain: &domain,
        stage: 0,
        tag: format!("heldout/{domain_name}"),
    };
    test_split(stream, split_name, &block)
}

/// Every dataset of one seeded run.
#[derive(Debug, Clone)]
pub struct World {
    pub stream: ResolvedStream,
    pub source: SourceData,
    pub stages: Vec<StageStream>,
    /// One split per distinct scheduled domain, with identities of its own.
    pub domain_tests: Vec<RetrievalSplit>,
    /// Held-out domain that never appears in the schedule.
    pub unseen: RetrievalSplit,
}

impl World {
    pub fn generate(stream: &ResolvedStream) -> Result<Self> {
        let stages = (1..=stream.num_stages)
            .map(|t| generate_stage(stream, t))
            .collect::<Result<Vec<_>>>()?;
        let mut domains: Vec<&String> = Vec::new();
        for d in &stream.schedule {
            if !domains.contains(&d) {
                domains.push(d);
            }
        }
        let domain_tests = domains
            .iter()
            .enumerate()
            .map(|(i, d)| {
                let base = DOMAIN_TEST_ID_BASE + (i * stream.config.eval_ids) as u64;
                held_out_split(stream, d, base, &format!("domain_{d}"))
            })
            .collect();
        Ok(Self {
            source: generate_source(stream),
            stages,
            domain_tests,
            unseen: held_out_split(stream, &stream.config.unseen_domain, UNSEEN_ID_BASE, "unseen"),
            stream: stream.clone(),
        })
    }
}

/// Draws PK batches from labeled samples; unlabeled (noise) samples are skipped.
#[derive(Debug, Clone)]
pub struct PkSampler {
    groups: Vec<(usize, Vec<usize>)>,
}

impl PkSampler {
    pub fn new(labels: &[Option<usize>]) -> Self {
        let mut map: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, l) in labels.iter().enumerate() {
            if let Some(l) = l {
                map.entry(*l).or_default().push(i);
            }
        }
        Self {
            groups: map.into_iter().collect(),
        }
    }

    pub fn num_labels(&self) -> usize {
        self.groups.len()
    }

    pub fn num_samples(&self) -> usize {
        self.groups.iter().map(|(_, g)| g.len()).sum()
    }

    /// `p` labels uniformly without replacement, `k` samples each (with
    /// replacement only when a label has fewer than `k`).
    pub fn sample<R: Rng + ?Sized>(
        &self,
        samples: &[Sample],
        p: usize,
        k: usize,
        kind: BatchKind,
        rng: &mut R,
    ) -> Result<Batch> {
        if self.groups.len() < p {
            return Err(Error::Protocol(format!(
                "only {} usable labels for a batch of {p} identities; fall back to the previous clustering",
                self.groups.len()
            )));
        }
        if k < 2 {
            return Err(Error::Config("PK batches need k >= 2 instances per identity".into()));
        }
        let mut inputs = Vec::with_capacity(p * k);
        let mut labels = Vec::with_capacity(p * k);
        for gi in sample(rng, self.groups.len(), p).into_iter() {
            let (label, members) = &self.groups[gi];
            let picks: Vec<usize> = if members.len() >= k {
                sample(rng, members.len(), k).into_iter().map(|j| members[j]).collect()
            } else {
                (0..k).map(|_| members[rng.random_range(0..members.len())]).collect()
            };
            for i in picks {
                inputs.push(samples[i].x.clone());
                labels.push(*label);
            }
        }
        Batch::new(inputs, labels, kind)
    }
}

/// PK batch of kind `new` from samples and their current labels.
pub fn sample_pk_batch<R: Rng + ?Sized>(
    samples: &[Sample],
    labels: &[Option<usize>],
    p: usize,
    k: usize,
    rng: &mut R,
) -> Result<Batch> {
    PkSampler::new(labels).sample(samples, p, k, BatchKind::New, rng)
}

/// Writes one row per sample: `stage,domain,true_id,f0,f1,...`.
pub fn export_csv(samples: &[Sample], path: &Path) -> Result<()> {
    let gate = EvalGate::for_inspection();
    let mut w = csv::Writer::from_path(path)?;
    let dim = samples.first().map_or(0, |s| s.x.len());
    let mut header = vec!["stage".to_string(), "domain".into(), "true_id".into()];
    header.extend((0..dim).map(|i| format!("f{i}")));
    w.write_record(&header)?;
    for s in samples {
        let mut row = vec![s.stage.to_string(), s.domain.clone(), s.true_id.reveal(&gate).to_string()];
        row.extend(s.x.iter().map(|v| format!("{v:?}")));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}
