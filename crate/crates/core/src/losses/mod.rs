//! Loss terms and their input gradients.
//!
//! Every primitive here works on per-sample embeddings or logits and returns
//! the gradient with respect to those rows. [`objective`] chains them through
//! the model to parameter gradients and builds the composite objectives.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{log_softmax, Role};
use crate::util::{dot, norm};

pub mod objective;

pub use objective::{
    adaptation_loss, antiforgetting_loss, evaluate, Distillation, Evaluation, LossInputs,
    LossReport, LossSettings, LossSpec, LossTerm, Scope,
};

/// Whether a batch comes from the current stream or from memory.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BatchKind {
    New,
    Old,
}

/// Inputs with their labels in the global namespace.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub inputs: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
    pub kind: BatchKind,
}

impl Batch {
    pub fn new(inputs: Vec<Vec<f64>>, labels: Vec<usize>, kind: BatchKind) -> Result<Self> {
        if inputs.is_empty() {
            return Err(Error::Protocol("batch is empty".into()));
        }
        if inputs.len() != labels.len() {
            return Err(Error::Protocol(format!(
                "batch has {} inputs but {} labels",
                inputs.len(),
                labels.len()
            )));
        }
        Ok(Self { inputs, labels, kind })
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }
}

/// Scalar loss and its gradient with respect to each input row.
#[derive(Debug, Clone, PartialEq)]
pub struct LossGrad {
    pub value: f64,
    pub grad: Vec<Vec<f64>>,
}

impl LossGrad {
    fn zeros(n: usize, d: usize) -> Self {
        Self {
            value: 0.0,
            grad: vec![vec![0.0; d]; n],
        }
    }
}

/// Pairwise cosine similarities of one model's embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct AffinityMatrix {
    pub n: usize,
    pub values: Vec<f64>,
    pub source: Role,
}

impl AffinityMatrix {
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.n + j]
    }
}

fn unit_rows(embeddings: &[Vec<f64>], context: &str) -> Result<(Vec<Vec<f64>>, Vec<f64>)> {
    let mut units = Vec::with_capacity(embeddings.len());
    let mut norms = Vec::with_capacity(embeddings.len());
    for (i, e) in embeddings.iter().enumerate() {
        let n = norm(e);
        if !(n > 0.0) || !n.is_finite() {
            return Err(Error::numeric(
                context,
                format!("embedding of sample {i} has norm {n}"),
            ));
        }
        units.push(e.iter().map(|v| v / n).collect());
        norms.push(n);
    }
    Ok((units, norms))
}

pub fn affinity_matrix(embeddings: &[Vec<f64>], source: Role) -> Result<AffinityMatrix> {
    let (units, _) = unit_rows(embeddings, "affinity")?;
    let n = units.len();
    let mut values = vec![0.0; n * n];
    for i in 0..n {
        values[i * n + i] = 1.0;
        for j in i + 1..n {
            let r = dot(&units[i], &units[j]).clamp(-1.0, 1.0);
            values[i * n + j] = r;
            values[j * n + i] = r;
        }
    }
    Ok(AffinityMatrix { n, values, source })
}

// Pull a gradient on a unit vector back to the raw vector: (g - u(u·g)) / |e|.
fn through_normalization(g: &[f64], unit: &[f64], norm: f64) -> Vec<f64> {
    let ug = dot(unit, g);
    g.iter().zip(unit).map(|(g, u)| (g - u * ug) / norm).collect()
}

/// Per-anchor batch-hard triplet hinge values on L2-normalized embeddings.
pub fn triplet_anchor_losses(embeddings: &[Vec<f64>], labels: &[usize], margin: f64) -> Result<Vec<f64>> {
    Ok(triplet_core(embeddings, labels, margin, false)?.0)
}

pub fn triplet_loss(embeddings: &[Vec<f64>], labels: &[usize], margin: f64) -> Result<f64> {
    let per = triplet_anchor_losses(embeddings, labels, margin)?;
    Ok(per.iter().sum::<f64>() / per.len() as f64)
}

/// Batch-hard triplet loss: mean over anchors of
/// `max(0, d(a, hardest positive) - d(a, hardest negative) + margin)`.
pub fn triplet_loss_grad(embeddings: &[Vec<f64>], labels: &[usize], margin: f64) -> Result<LossGrad> {
    let (per, grad) = triplet_core(embeddings, labels, margin, true)?;
    Ok(LossGrad {
        value: per.iter().sum::<f64>() / per.len() as f64,
        grad,
    })
}

fn triplet_core(
    embeddings: &[Vec<f64>],
    labels: &[usize],
    margin: f64,
    with_grad: bool,
) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
    let n = embeddings.len();
    if n == 0 || labels.len() != n {
        return Err(Error::Protocol(format!(
            "triplet loss needs matching non-empty embeddings and labels ({n} vs {})",
            labels.len()
        )));
    }
    for &l in labels {
        let count = labels.iter().filter(|&&m| m == l).count();
        if count < 2 {
            return Err(Error::Protocol(format!(
                "label {l} has a single instance in the triplet batch"
            )));
        }
    }
    if labels.iter().all(|&l| l == labels[0]) {
        return Err(Error::Protocol("triplet batch has no negatives".into()));
    }
    let (units, norms) = unit_rows(embeddings, "triplet_loss")?;
    let d = units[0].len();
    let mut dist = vec![0.0; n * n];
    for i in 0..n {
        for j in i + 1..n {
            let s: f64 = units[i]
                .iter()
                .zip(&units[j])
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            dist[i * n + j] = s.sqrt();
            dist[j * n + i] = s.sqrt();
        }
    }
    let mut per = vec![0.0; n];
    let mut g_unit = vec![vec![0.0; d]; n];
    let scale = 1.0 / n as f64;
    for a in 0..n {
        let mut pos: Option<usize> = None;
        let mut neg: Option<usize> = None;
        for j in 0..n {
            if j == a {
                continue;
            }
            let dj = dist[a * n + j];
            if labels[j] == labels[a] {
                if pos.is_none_or(|p| dj > dist[a * n + p]) {
                    pos = Some(j);
                }
            } else if neg.is_none_or(|q| dj < dist[a * n + q]) {
                neg = Some(j);
            }
        }
        let (p, q) = (pos.expect("checked >= 2 instances"), neg.expect("checked negatives"));
        let h = dist[a * n + p] - dist[a * n + q] + margin;
        if h <= 0.0 {
            continue;
        }
        per[a] = h;
        if !with_grad {
            continue;
        }
        // d|u_a - u_j| / du_a = (u_a - u_j) / dist, zero at coincident points
        for (other, sign) in [(p, 1.0), (q, -1.0)] {
            let dd = dist[a * n + other];
            if dd <= 1e-15 {
                continue;
            }
            for k in 0..d {
                let g = sign * scale * (units[a][k] - units[other][k]) / dd;
                g_unit[a][k] += g;
                g_unit[other][k] -= g;
            }
        }
    }
    let grad = if with_grad {
        g_unit
            .iter()
            .enumerate()
            .map(|(i, g)| through_normalization(g, &units[i], norms[i]))
            .collect()
    } else {
        Vec::new()
    };
    Ok((per, grad))
}

fn check_labels(num_classes: usize, labels: &[usize]) -> Result<()> {
    if let Some(&l) = labels.iter().find(|&&l| l >= num_classes) {
        return Err(Error::Protocol(format!(
            "label {l} is outside the classifier's {num_classes} classes (namespace desync)"
        )));
    }
    Ok(())
}

/// Mean cross-entropy of the true label under the softmax of the logits.
pub fn classification_loss_grad(logits: &[Vec<f64>], labels: &[usize]) -> Result<LossGrad> {
    let n = logits.len();
    if n == 0 || labels.len() != n {
        return Err(Error::Protocol("classification loss needs matching logits and labels".into()));
    }
    let c = logits[0].len();
    check_labels(c, labels)?;
    let mut out = LossGrad::zeros(n, c);
    for (i, (z, &y)) in logits.iter().zip(labels).enumerate() {
        let lp = log_softmax(z);
        out.value -= lp[y] / n as f64;
        for (k, g) in out.grad[i].iter_mut().enumerate() {
            *g = (lp[k].exp() - if k == y { 1.0 } else { 0.0 }) / n as f64;
        }
    }
    Ok(out)
}

pub fn classification_loss(logits: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
    classification_loss_grad(logits, labels).map(|g| g.value)
}

/// Squared difference between current and historical cosine affinities of
/// one batch, summed over unordered pairs `i < j`. The historical side is a
/// constant target.
pub fn relational_term_grad(
    current: &[Vec<f64>],
    historical: &[Vec<f64>],
    mean_over_pairs: bool,
) -> Result<LossGrad> {
    if current.len() != historical.len() {
        return Err(Error::Protocol(format!(
            "relational consistency needs paired embeddings ({} vs {})",
            current.len(),
            historical.len()
        )));
    }
    let n = current.len();
    let d = current.first().map_or(0, Vec::len);
    let (uc, nc) = unit_rows(current, "relational_consistency_loss (current)")?;
    let (uh, _) = unit_rows(historical, "relational_consistency_loss (historical)")?;
    let pairs = n * n.saturating_sub(1) / 2;
    let scale = if mean_over_pairs && pairs > 0 {
        1.0 / pairs as f64
    } else {
        1.0
    };
    let mut out = LossGrad::zeros(n, d);
    let mut g_unit = vec![vec![0.0; d]; n];
    for i in 0..n {
        for j in i + 1..n {
            let rc = dot(&uc[i], &uc[j]);
            let rh = dot(&uh[i], &uh[j]);
            let diff = rc - rh;
            out.value += scale * diff * diff;
            let w = 2.0 * scale * diff;
            for k in 0..d {
                g_unit[i][k] += w * uc[j][k];
                g_unit[j][k] += w * uc[i][k];
            }
        }
    }
    for i in 0..n {
        out.grad[i] = through_normalization(&g_unit[i], &uc[i], nc[i]);
    }
    Ok(out)
}

/// Relational consistency over the new and old batches, each with its own
/// affinity matrix.
pub fn relational_consistency_loss(
    new_current: &[Vec<f64>],
    new_historical: &[Vec<f64>],
    old_current: &[Vec<f64>],
    old_historical: &[Vec<f64>],
) -> Result<f64> {
    Ok(relational_term_grad(new_current, new_historical, false)?.value
        + relational_term_grad(old_current, old_historical, false)?.value)
}

const LOG_PROB_FLOOR: f64 = -27.631_021_115_928_547; // ln(1e-12)

/// Mean over samples of `KL(softmax(current) || softmax(historical))`.
/// Gradients flow only into the current logits.
pub fn kl_consistency_grad(current: &[Vec<f64>], historical: &[Vec<f64>]) -> Result<LossGrad> {
    let n = current.len();
    if n == 0 || historical.len() != n {
        return Err(Error::Protocol(format!(
            "KL consistency needs paired logits ({n} vs {})",
            historical.len()
        )));
    }
    let c = current[0].len();
    let mut out = LossGrad::zeros(n, c);
    for (i, (zc, zh)) in current.iter().zip(historical).enumerate() {
        if zc.len() != zh.len() {
            return Err(Error::Protocol(format!(
                "current model has {} classes, historical has {}; classifier growth was not synced",
                zc.len(),
                zh.len()
            )));
        }
        let lp = log_softmax(zc);
        let lq: Vec<f64> = log_softmax(zh)
            .into_iter()
            .map(|v| v.max(LOG_PROB_FLOOR))
            .collect();
        let kl: f64 = lp.iter().zip(&lq).map(|(a, b)| a.exp() * (a - b)).sum();
        out.value += kl / n as f64;
        for (k, g) in out.grad[i].iter_mut().enumerate() {
            *g = lp[k].exp() * ((lp[k] - lq[k]) - kl) / n as f64;
        }
    }
    Ok(out)
}

pub fn kl_consistency_loss(current: &[Vec<f64>], historical: &[Vec<f64>]) -> Result<f64> {
    kl_consistency_grad(current, historical).map(|g| g.value)
}
