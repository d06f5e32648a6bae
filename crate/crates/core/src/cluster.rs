//! DBSCAN pseudo labels over current-model embeddings.
//!
//! Core points and their connected components are fixed by the data alone.
//! A border point joins the cluster of its lowest-index core neighbour, and
//! clusters are numbered by their lowest-index core, so results are fully
//! deterministic.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{embed_all, ModelParams};
use crate::util::l2_normalized;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClusterConfig {
    pub eps: f64,
    pub min_pts: usize,
    pub refresh_period_epochs: usize,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        Self {
            eps: 0.15,
            min_pts: 4,
            refresh_period_epochs: 2,
        }
    }
}

impl ClusterConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eps > 0.0) {
            return Err(Error::Config(format!("eps must be > 0, got {}", self.eps)));
        }
        if self.min_pts < 2 {
            return Err(Error::Config(format!("min_pts must be >= 2, got {}", self.min_pts)));
        }
        if self.refresh_period_epochs == 0 {
            return Err(Error::Config("refresh_period_epochs must be positive".into()));
        }
        Ok(())
    }
}

/// Raw DBSCAN output: cluster index per point, `None` for noise.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Partition {
    pub assignment: Vec<Option<usize>>,
    pub num_clusters: usize,
    pub core: Vec<bool>,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// DBSCAN with Euclidean distance; a point's neighbourhood includes itself.
pub fn dbscan(points: &[Vec<f64>], eps: f64, min_pts: usize) -> Partition {
    let n = points.len();
    let eps2 = eps * eps;
    let neighbours: Vec<Vec<usize>> = (0..n)
        .map(|i| (0..n).filter(|&j| sq_dist(&points[i], &points[j]) <= eps2).collect())
        .collect();
    let core: Vec<bool> = neighbours.iter().map(|nb| nb.len() >= min_pts).collect();

    let mut assignment: Vec<Option<usize>> = vec![None; n];
    let mut num_clusters = 0;
    for start in 0..n {
        if !core[start] || assignment[start].is_some() {
            continue;
        }
        let c = num_clusters;
        num_clusters += 1;
        assignment[start] = Some(c);
        let mut queue = VecDeque::from([start]);
        while let Some(p) = queue.pop_front() {
            for &q in &neighbours[p] {
                if core[q] && assignment[q].is_none() {
                    assignment[q] = Some(c);
                    queue.push_back(q);
                }
            }
        }
    }
    for i in 0..n {
        if !core[i] {
            assignment[i] = neighbours[i]
                .iter()
                .find(|&&j| core[j])
                .and_then(|&j| assignment[j]);
        }
    }
    Partition {
        assignment,
        num_clusters,
        core,
    }
}

/// Pseudo labels in the global namespace for one stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelAssignment {
    /// Global label per sample; `None` marks noise.
    pub labels: Vec<Option<usize>>,
    pub num_new_clusters: usize,
    pub namespace_offset: usize,
    /// Unit-norm mean of the L2-normalized member embeddings, per new cluster.
    pub centroids: Vec<Vec<f64>>,
}

impl LabelAssignment {
    pub fn num_noise(&self) -> usize {
        self.labels.iter().filter(|l| l.is_none()).count()
    }
}

/// Strictly growing allocator of global label ids.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelNamespace {
    next: usize,
}

impl LabelNamespace {
    /// Namespace whose first `reserved` ids (source identities) are taken.
    pub fn new(reserved: usize) -> Self {
        Self { next: reserved }
    }

    pub fn size(&self) -> usize {
        self.next
    }

    pub fn allocate(&mut self, count: usize) -> usize {
        let offset = self.next;
        self.next += count;
        offset
    }
}

/// Clusters L2-normalized embeddings; fails when every point is noise.
pub fn cluster(embeddings: &[Vec<f64>], cfg: &ClusterConfig, namespace: &mut LabelNamespace) -> Result<LabelAssignment> {
    cfg.validate()?;
    if embeddings.len() < cfg.min_pts {
        return Err(Error::Clustering(format!(
            "{} points cannot form a cluster with min_pts = {}",
            embeddings.len(),
            cfg.min_pts
        )));
    }
    let units: Vec<Vec<f64>> = embeddings.iter().map(|e| l2_normalized(e)).collect();
    let part = dbscan(&units, cfg.eps, cfg.min_pts);
    if part.num_clusters == 0 {
        return Err(Error::Clustering(format!(
            "all {} points are noise at eps = {}",
            embeddings.len(),
            cfg.eps
        )));
    }
    let mut sums = vec![vec![0.0; units[0].len()]; part.num_clusters];
    for (u, a) in units.iter().zip(&part.assignment) {
        if let Some(c) = a {
            for (s, v) in sums[*c].iter_mut().zip(u) {
                *s += v;
            }
        }
    }
    let offset = namespace.allocate(part.num_clusters);
    Ok(LabelAssignment {
        labels: part.assignment.iter().map(|a| a.map(|c| c + offset)).collect(),
        num_new_clusters: part.num_clusters,
        namespace_offset: offset,
        centroids: sums.iter().map(|s| l2_normalized(s)).collect(),
    })
}

/// Embeds the stage inputs with the current model and clusters them with
/// fresh ids. The caller grows the classifiers to `namespace.size()`.
pub fn refresh_labels(
    inputs: &[&[f64]],
    params: &ModelParams,
    cfg: &ClusterConfig,
    namespace: &mut LabelNamespace,
) -> Result<LabelAssignment> {
    let emb = embed_all(params, inputs)?;
    cluster(&emb, cfg, namespace)
}
