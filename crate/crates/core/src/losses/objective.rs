//! Composite objectives and their exact parameter gradients.
//!
//! A [`LossSpec`] lists the terms to evaluate. [`evaluate`] runs the current
//! model over the batches those terms need, the historical model where
//! distillation terms need teacher outputs, and backpropagates the summed
//! loss into a gradient aligned with the flat parameter vector.

use serde::{Deserialize, Serialize};

use super::{
    classification_loss_grad, kl_consistency_grad, relational_term_grad, triplet_loss_grad, Batch,
    BatchKind,
};
use crate::error::{Error, Result};
use crate::model::{backward_sample, forward, forward_cached, ForwardCache, ModelOutput, ModelParams};

/// Which batches a distillation term covers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scope {
    New,
    Old,
    Both,
}

impl Scope {
    fn kinds(self) -> &'static [BatchKind] {
        match self {
            Scope::New => &[BatchKind::New],
            Scope::Old => &[BatchKind::Old],
            Scope::Both => &[BatchKind::New, BatchKind::Old],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LossTerm {
    Triplet(BatchKind),
    Classification(BatchKind),
    Relational(Scope),
    Kl(Scope),
}

/// Which distillation terms are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Distillation {
    pub relational: bool,
    pub kl: bool,
}

impl Distillation {
    pub const NONE: Self = Self {
        relational: false,
        kl: false,
    };
    pub const KL: Self = Self {
        relational: false,
        kl: true,
    };
    pub const RELATIONAL: Self = Self {
        relational: true,
        kl: false,
    };
    pub const BOTH: Self = Self {
        relational: true,
        kl: true,
    };

    pub fn is_active(self) -> bool {
        self.relational || self.kl
    }

    pub fn terms(self, scope: Scope) -> Vec<LossTerm> {
        let mut t = Vec::new();
        if self.relational {
            t.push(LossTerm::Relational(scope));
        }
        if self.kl {
            t.push(LossTerm::Kl(scope));
        }
        t
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossSettings {
    pub margin: f64,
    /// Divide the relational term by the number of pairs instead of summing.
    pub rel_mean_over_pairs: bool,
}

impl Default for LossSettings {
    fn default() -> Self {
        Self {
            margin: 0.3,
            rel_mean_over_pairs: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossSpec {
    pub terms: Vec<LossTerm>,
    pub scale: f64,
}

impl LossSpec {
    pub fn new(terms: Vec<LossTerm>) -> Self {
        Self { terms, scale: 1.0 }
    }

    pub fn single(term: LossTerm) -> Self {
        Self::new(vec![term])
    }

    pub fn scaled(mut self, scale: f64) -> Self {
        self.scale = scale;
        self
    }

    pub fn plus(mut self, other: &LossSpec) -> Self {
        self.terms.extend(&other.terms);
        self
    }

    /// Triplet plus cross-entropy on the new batch.
    pub fn adaptation() -> Self {
        Self::new(vec![
            LossTerm::Triplet(BatchKind::New),
            LossTerm::Classification(BatchKind::New),
        ])
    }

    /// Distillation over `scope` plus triplet and cross-entropy on the old batch.
    pub fn antiforgetting(distill: Distillation, scope: Scope) -> Self {
        let mut terms = distill.terms(scope);
        terms.push(LossTerm::Triplet(BatchKind::Old));
        terms.push(LossTerm::Classification(BatchKind::Old));
        Self::new(terms)
    }

    pub fn is_empty(&self) -> bool {
        self.terms.is_empty()
    }

    fn needs(&self, kind: BatchKind) -> bool {
        self.terms.iter().any(|t| match t {
            LossTerm::Triplet(k) | LossTerm::Classification(k) => *k == kind,
            LossTerm::Relational(s) | LossTerm::Kl(s) => s.kinds().contains(&kind),
        })
    }

    fn needs_teacher(&self, kind: BatchKind) -> bool {
        self.terms.iter().any(|t| match t {
            LossTerm::Relational(s) | LossTerm::Kl(s) => s.kinds().contains(&kind),
            _ => false,
        })
    }
}

/// Values of each loss term from one evaluation; composite fields are sums of parts.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub l_tri: f64,
    pub l_cls: f64,
    pub l_tri_old: f64,
    pub l_cls_old: f64,
    pub l_rel: f64,
    pub l_kl: f64,
    pub l_adap: f64,
    pub l_antif: f64,
}

impl LossReport {
    fn finish(mut self) -> Self {
        self.l_adap = self.l_tri + self.l_cls;
        self.l_antif = self.l_rel + self.l_kl + self.l_tri_old + self.l_cls_old;
        self
    }

    /// Sums the per-term fields of two reports from disjoint term sets.
    pub fn combine(&self, other: &LossReport) -> LossReport {
        LossReport {
            l_tri: self.l_tri + other.l_tri,
            l_cls: self.l_cls + other.l_cls,
            l_tri_old: self.l_tri_old + other.l_tri_old,
            l_cls_old: self.l_cls_old + other.l_cls_old,
            l_rel: self.l_rel + other.l_rel,
            l_kl: self.l_kl + other.l_kl,
            ..Default::default()
        }
        .finish()
    }

    fn all_finite(&self) -> bool {
        [
            self.l_tri,
            self.l_cls,
            self.l_tri_old,
            self.l_cls_old,
            self.l_rel,
            self.l_kl,
        ]
        .iter()
        .all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct LossInputs<'a> {
    pub new: Option<&'a Batch>,
    pub old: Option<&'a Batch>,
    pub historical: Option<&'a ModelParams>,
}

#[derive(Debug, Clone)]
pub struct Evaluation {
    pub report: LossReport,
    /// Scaled sum of the evaluated terms.
    pub value: f64,
    pub gradient: Option<Vec<f64>>,
}

struct BatchPass {
    outputs: Vec<ModelOutput>,
    caches: Vec<ForwardCache>,
    teacher: Option<(Vec<Vec<f64>>, Vec<Vec<f64>>)>,
    d_emb: Vec<Vec<f64>>,
    d_logits: Vec<Vec<f64>>,
}

impl BatchPass {
    fn embeddings(&self) -> Vec<Vec<f64>> {
        self.outputs.iter().map(|o| o.embedding.vector.clone()).collect()
    }

    fn logits(&self) -> Vec<Vec<f64>> {
        self.outputs.iter().map(|o| o.logits.values.clone()).collect()
    }

    fn add(target: &mut [Vec<f64>], grad: &[Vec<f64>], scale: f64) {
        for (t, g) in target.iter_mut().zip(grad) {
            for (a, b) in t.iter_mut().zip(g) {
                *a += scale * b;
            }
        }
    }
}

fn run_batch(
    params: &ModelParams,
    batch: &Batch,
    historical: Option<&ModelParams>,
    with_teacher: bool,
) -> Result<BatchPass> {
    let mut outputs = Vec::with_capacity(batch.len());
    let mut caches = Vec::with_capacity(batch.len());
    for x in &batch.inputs {
        let (o, c) = forward_cached(params, x)?;
        outputs.push(o);
        caches.push(c);
    }
    let teacher = if with_teacher {
        let h = historical.ok_or_else(|| {
            Error::Protocol("distillation term requested without a historical model".into())
        })?;
        let mut emb = Vec::with_capacity(batch.len());
        let mut logits = Vec::with_capacity(batch.len());
        for x in &batch.inputs {
            let o = forward(h, x)?;
            emb.push(o.embedding.vector);
            logits.push(o.logits.values);
        }
        Some((emb, logits))
    } else {
        None
    };
    let d = params.config().embed_dim;
    let c = params.num_classes();
    Ok(BatchPass {
        d_emb: vec![vec![0.0; d]; batch.len()],
        d_logits: vec![vec![0.0; c]; batch.len()],
        outputs,
        caches,
        teacher,
    })
}

/// Evaluates `spec` at `params` and, when `with_grad`, its exact gradient.
///
/// Historical-model outputs are constants: no gradient flows into the teacher.
pub fn evaluate(
    params: &ModelParams,
    inputs: &LossInputs<'_>,
    spec: &LossSpec,
    settings: &LossSettings,
    with_grad: bool,
) -> Result<Evaluation> {
    let mut passes: [Option<BatchPass>; 2] = [None, None];
    for (slot, kind, batch) in [(0, BatchKind::New, inputs.new), (1, BatchKind::Old, inputs.old)] {
        if !spec.needs(kind) {
            continue;
        }
        let batch = batch.ok_or_else(|| match kind {
            BatchKind::New => Error::Protocol("loss needs a new batch".into()),
            BatchKind::Old => Error::Protocol(
                "loss needs an old batch but the memory is empty; run adaptation-only warm-up steps".into(),
            ),
        })?;
        passes[slot] = Some(run_batch(params, batch, inputs.historical, spec.needs_teacher(kind))?);
    }
    let slot = |k: BatchKind| match k {
        BatchKind::New => 0,
        BatchKind::Old => 1,
    };
    let batch_of = |k: BatchKind| match k {
        BatchKind::New => inputs.new.expect("checked above"),
        BatchKind::Old => inputs.old.expect("checked above"),
    };

    let mut report = LossReport::default();
    let mut value = 0.0;
    let s = spec.scale;
    for term in &spec.terms {
        match *term {
            LossTerm::Triplet(k) => {
                let pass = passes[slot(k)].as_mut().expect("batch evaluated");
                let lg = triplet_loss_grad(&pass.embeddings(), &batch_of(k).labels, settings.margin)?;
                BatchPass::add(&mut pass.d_emb, &lg.grad, s);
                match k {
                    BatchKind::New => report.l_tri += lg.value,
                    BatchKind::Old => report.l_tri_old += lg.value,
                }
                value += lg.value;
            }
            LossTerm::Classification(k) => {
                let pass = passes[slot(k)].as_mut().expect("batch evaluated");
                let lg = classification_loss_grad(&pass.logits(), &batch_of(k).labels)?;
                BatchPass::add(&mut pass.d_logits, &lg.grad, s);
                match k {
                    BatchKind::New => report.l_cls += lg.value,
                    BatchKind::Old => report.l_cls_old += lg.value,
                }
                value += lg.value;
            }
            LossTerm::Relational(scope) => {
                for &k in scope.kinds() {
                    let pass = passes[slot(k)].as_mut().expect("batch evaluated");
                    let (t_emb, _) = pass.teacher.as_ref().expect("teacher evaluated");
                    let lg = relational_term_grad(&pass.embeddings(), t_emb, settings.rel_mean_over_pairs)?;
                    BatchPass::add(&mut pass.d_emb, &lg.grad, s);
                    report.l_rel += lg.value;
                    value += lg.value;
                }
            }
            LossTerm::Kl(scope) => {
                // one mean over the union of the covered samples
                let mut cur = Vec::new();
                let mut teach = Vec::new();
                for &k in scope.kinds() {
                    let pass = passes[slot(k)].as_ref().expect("batch evaluated");
                    cur.extend(pass.logits());
                    teach.extend(pass.teacher.as_ref().expect("teacher evaluated").1.iter().cloned());
                }
                let lg = kl_consistency_grad(&cur, &teach)?;
                let mut offset = 0;
                for &k in scope.kinds() {
                    let pass = passes[slot(k)].as_mut().expect("batch evaluated");
                    let n = pass.outputs.len();
                    BatchPass::add(&mut pass.d_logits, &lg.grad[offset..offset + n], s);
                    offset += n;
                }
                report.l_kl += lg.value;
                value += lg.value;
            }
        }
    }
    let report = report.finish();
    if !report.all_finite() {
        return Err(Error::numeric("loss evaluation", format!("non-finite loss: {report:?}")));
    }

    let gradient = if with_grad {
        let mut grad = vec![0.0; params.len()];
        for pass in passes.iter().flatten() {
            for i in 0..pass.outputs.len() {
                backward_sample(
                    params,
                    &pass.outputs[i],
                    &pass.caches[i],
                    &pass.d_emb[i],
                    Some(&pass.d_logits[i]),
                    &mut grad,
                );
            }
        }
        if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
            return Err(Error::numeric(
                params.slice_name(i),
                format!("non-finite gradient at parameter {i}"),
            ));
        }
        Some(grad)
    } else {
        None
    };
    Ok(Evaluation {
        report,
        value: s * value,
        gradient,
    })
}

/// Adaptation objective on the new batch: triplet plus cross-entropy.
pub fn adaptation_loss(params: &ModelParams, new_batch: &Batch, settings: &LossSettings) -> Result<LossReport> {
    if new_batch.kind != BatchKind::New {
        return Err(Error::Protocol("adaptation loss expects a new batch".into()));
    }
    let inputs = LossInputs {
        new: Some(new_batch),
        ..Default::default()
    };
    Ok(evaluate(params, &inputs, &LossSpec::adaptation(), settings, false)?.report)
}

/// Anti-forgetting objective: distillation over both batches plus triplet
/// and cross-entropy on the replayed batch.
pub fn antiforgetting_loss(
    params: &ModelParams,
    historical: &ModelParams,
    old_batch: Option<&Batch>,
    new_batch: &Batch,
    distill: Distillation,
    settings: &LossSettings,
) -> Result<LossReport> {
    let old = old_batch.ok_or_else(|| {
        Error::Protocol("memory is empty; anti-forgetting needs an old batch (use warm-up steps)".into())
    })?;
    let inputs = LossInputs {
        new: Some(new_batch),
        old: Some(old),
        historical: Some(historical),
    };
    let spec = LossSpec::antiforgetting(distill, Scope::Both);
    Ok(evaluate(params, &inputs, &spec, settings, false)?.report)
}
