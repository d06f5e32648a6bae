//! Retrieval metrics and evaluation protocols.
//!
//! Ranking is by cosine similarity of embeddings, ties broken by ascending
//! gallery index. This module is the only consumer of ground-truth identities.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::bench::{Sample, World};
use crate::error::{Error, Result};
use crate::model::{embed_all, ModelParams};
use crate::util::{dot, l2_normalized};

/// Capability required to read ground-truth identities.
pub struct EvalGate {
    _private: (),
}

impl EvalGate {
    pub(crate) fn new() -> Self {
        Self { _private: () }
    }

    /// For evaluation, export and tests. Training code must never hold one.
    pub fn for_inspection() -> Self {
        Self::new()
    }
}

/// Ground-truth identities of samples, for evaluation only.
pub fn true_ids(samples: &[Sample]) -> Vec<u64> {
    let gate = EvalGate::new();
    samples.iter().map(|s| s.true_id().reveal(&gate)).collect()
}

#[derive(Debug, Clone)]
pub struct RetrievalSplit {
    pub name: String,
    pub queries: Vec<Sample>,
    pub gallery: Vec<Sample>,
}

impl RetrievalSplit {
    /// `relevance[q][g]` is true when query `q` and gallery item `g` share an identity.
    pub fn relevance(&self) -> Vec<Vec<bool>> {
        let g = true_ids(&self.gallery);
        true_ids(&self.queries)
            .into_iter()
            .map(|q| g.iter().map(|&x| x == q).collect())
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        for (q, row) in self.relevance().iter().enumerate() {
            if !row.iter().any(|&r| r) {
                return Err(Error::Protocol(format!(
                    "query {q} of split '{}' has no gallery positive",
                    self.name
                )));
            }
        }
        Ok(())
    }
}

/// Gallery indices per query by descending cosine similarity.
pub fn rank_by_similarity(queries: &[Vec<f64>], gallery: &[Vec<f64>]) -> Vec<Vec<usize>> {
    let g: Vec<Vec<f64>> = gallery.iter().map(|v| l2_normalized(v)).collect();
    queries
        .iter()
        .map(|q| {
            let q = l2_normalized(q);
            let sims: Vec<f64> = g.iter().map(|v| dot(&q, v)).collect();
            let mut order: Vec<usize> = (0..g.len()).collect();
            order.sort_by(|&a, &b| sims[b].total_cmp(&sims[a]).then(a.cmp(&b)));
            order
        })
        .collect()
}

pub fn rank_gallery(params: &ModelParams, split: &RetrievalSplit) -> Result<Vec<Vec<usize>>> {
    let q: Vec<&[f64]> = split.queries.iter().map(|s| s.x.as_slice()).collect();
    let g: Vec<&[f64]> = split.gallery.iter().map(|s| s.x.as_slice()).collect();
    Ok(rank_by_similarity(&embed_all(params, &q)?, &embed_all(params, &g)?))
}

/// Fraction of queries whose top-ranked gallery item is a positive.
pub fn cmc_rank1_from(rankings: &[Vec<usize>], relevance: &[Vec<bool>]) -> f64 {
    if rankings.is_empty() {
        return 0.0;
    }
    let hits = rankings
        .iter()
        .zip(relevance)
        .filter(|(r, rel)| r.first().is_some_and(|&g| rel[g]))
        .count();
    hits as f64 / rankings.len() as f64
}

pub fn cmc_rank1(rankings: &[Vec<usize>], split: &RetrievalSplit) -> f64 {
    cmc_rank1_from(rankings, &split.relevance())
}

/// Mean of precision@k over the ranks k of the positives; `None` without positives.
pub fn average_precision(ranked_relevance: &[bool]) -> Option<f64> {
    let mut hits = 0usize;
    let mut total = 0.0;
    for (i, &r) in ranked_relevance.iter().enumerate() {
        if r {
            hits += 1;
            total += hits as f64 / (i + 1) as f64;
        }
    }
    (hits > 0).then(|| total / hits as f64)
}

pub fn mean_average_precision_from(rankings: &[Vec<usize>], relevance: &[Vec<bool>]) -> Result<f64> {
    if rankings.is_empty() {
        return Ok(0.0);
    }
    let mut sum = 0.0;
    for (q, (r, rel)) in rankings.iter().zip(relevance).enumerate() {
        let ranked: Vec<bool> = r.iter().map(|&g| rel[g]).collect();
        sum += average_precision(&ranked)
            .ok_or_else(|| Error::Protocol(format!("query {q} has no positives in the gallery")))?;
    }
    Ok(sum / rankings.len() as f64)
}

pub fn mean_average_precision(rankings: &[Vec<usize>], split: &RetrievalSplit) -> Result<f64> {
    mean_average_precision_from(rankings, &split.relevance())
}

/// One metric row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub method: String,
    pub seed: u64,
    pub stage: usize,
    pub split: String,
    pub rank1: f64,
    pub map: f64,
}

/// Rank-1 and mAP of a model on a split.
pub fn evaluate_split(params: &ModelParams, split: &RetrievalSplit) -> Result<(f64, f64)> {
    let rankings = rank_gallery(params, split)?;
    let rel = split.relevance();
    Ok((cmc_rank1_from(&rankings, &rel), mean_average_precision_from(&rankings, &rel)?))
}

fn record(params: &ModelParams, split: &RetrievalSplit, name: &str, stage: usize, method: &str, seed: u64) -> Result<MetricRecord> {
    let (rank1, map) = evaluate_split(params, split)?;
    Ok(MetricRecord {
        method: method.to_string(),
        seed,
        stage,
        split: name.to_string(),
        rank1,
        map,
    })
}

/// Names of the splits evaluated after every stage, in output order.
pub fn stage_split_names(world: &World) -> Vec<String> {
    let mut names = vec!["source".to_string(), "target".to_string(), "unseen".to_string()];
    names.extend(world.domain_tests.iter().map(|s| s.name.clone()));
    names
}

/// Instant evaluation at the end of stage `t`: source, the stage's own
/// split, the held-out domain and every scheduled domain.
pub fn evaluate_stage(params: &ModelParams, world: &World, t: usize, method: &str, seed: u64) -> Result<Vec<MetricRecord>> {
    let stage = world
        .stages
        .get(t.wrapping_sub(1))
        .ok_or_else(|| Error::Protocol(format!("no stage {t} in this stream")))?;
    let mut out = vec![
        record(params, &world.source.test, "source", t, method, seed)?,
        record(params, &stage.test, "target", t, method, seed)?,
        record(params, &world.unseen, "unseen", t, method, seed)?,
    ];
    for split in &world.domain_tests {
        out.push(record(params, split, &split.name, t, method, seed)?);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    /// Each stage's model on that stage's own test split.
    Adaptation,
    /// Each stage's model on the source split and every scheduled domain.
    AntiForgetting,
    /// Each stage's model on the held-out domain.
    Generalization,
}

/// Runs a protocol over per-stage checkpoints for the requested stages.
pub fn run_protocol(
    checkpoints: &BTreeMap<usize, ModelParams>,
    stages: &[usize],
    world: &World,
    protocol: Protocol,
    method: &str,
    seed: u64,
) -> Result<Vec<MetricRecord>> {
    let missing: Vec<usize> = stages.iter().copied().filter(|t| !checkpoints.contains_key(t)).collect();
    if !missing.is_empty() {
        return Err(Error::Protocol(format!("missing checkpoints for stages {missing:?}")));
    }
    let mut out = Vec::new();
    for &t in stages {
        let params = &checkpoints[&t];
        match protocol {
            Protocol::Adaptation => {
                let stage = world
                    .stages
                    .get(t.wrapping_sub(1))
                    .ok_or_else(|| Error::Protocol(format!("no stage {t} in this stream")))?;
                out.push(record(params, &stage.test, "target", t, method, seed)?);
            }
            Protocol::AntiForgetting => {
                out.push(record(params, &world.source.test, "source", t, method, seed)?);
                for split in &world.domain_tests {
                    out.push(record(params, split, &split.name, t, method, seed)?);
                }
            }
            Protocol::Generalization => {
                out.push(record(params, &world.unseen, "unseen", t, method, seed)?);
            }
        }
    }
    Ok(out)
}

pub fn write_metrics_csv(records: &[MetricRecord], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in records {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_metrics_csv(path: &Path) -> Result<Vec<MetricRecord>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

/// Adjusted Rand index between two labelings; unlabeled entries count as singletons.
pub fn adjusted_rand_index<A, B>(a: &[Option<A>], b: &[Option<B>]) -> f64
where
    A: std::hash::Hash + Eq + Clone,
    B: std::hash::Hash + Eq + Clone,
{
    assert_eq!(a.len(), b.len(), "labelings must have equal length");
    let n = a.len();
    let key_a = |i: usize| a[i].clone().ok_or(i);
    let key_b = |i: usize| b[i].clone().ok_or(i);
    let mut table: HashMap<(std::result::Result<A, usize>, std::result::Result<B, usize>), u64> = HashMap::new();
    let mut rows: HashMap<std::result::Result<A, usize>, u64> = HashMap::new();
    let mut cols: HashMap<std::result::Result<B, usize>, u64> = HashMap::new();
    for i in 0..n {
        *table.entry((key_a(i), key_b(i))).or_default() += 1;
        *rows.entry(key_a(i)).or_default() += 1;
        *cols.entry(key_b(i)).or_default() += 1;
    }
    let c2 = |x: u64| (x * x.saturating_sub(1) / 2) as f64;
    let index: f64 = table.values().map(|&v| c2(v)).sum();
    let sa: f64 = rows.values().map(|&v| c2(v)).sum();
    let sb: f64 = cols.values().map(|&v| c2(v)).sum();
    let total = c2(n as u64);
    if total == 0.0 {
        return 1.0;
    }
    let expected = sa * sb / total;
    let max = (sa + sb) / 2.0;
    if (max - expected).abs() < f64::EPSILON {
        return 1.0;
    }
    (index - expected) / (max - expected)
}
