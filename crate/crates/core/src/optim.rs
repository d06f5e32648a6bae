//! Coordinated replay step, the joint-objective baseline and Adam.
//!
//! The coordinated step treats adaptation as meta-train and anti-forgetting
//! as meta-test. With `g1 = ∇L_adap(θ)` and `θ' = θ - α·g1`, the update
//! direction is `g1 + ∇L_antif(θ')`, the first-order gradient of
//! `L_adap(θ) + L_antif(θ - α∇L_adap(θ))`. At `α = 0` this is exactly the
//! gradient of the joint objective `L_adap + L_antif`.

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{
    evaluate, BatchKind, Distillation, LossInputs, LossReport, LossSettings, LossSpec, LossTerm,
    Scope,
};
use crate::model::ModelParams;
use crate::util::{dot, norm};

/// Training method ladder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, PartialOrd, Ord)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Stagewise,
    ReplayJoint,
    Cdr,
    CdrKl,
    CdrRcl,
}

impl Mode {
    pub const LADDER: [Mode; 5] = [
        Mode::Stagewise,
        Mode::ReplayJoint,
        Mode::Cdr,
        Mode::CdrKl,
        Mode::CdrRcl,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Mode::Stagewise => "stagewise",
            Mode::ReplayJoint => "replay_joint",
            Mode::Cdr => "cdr",
            Mode::CdrKl => "cdr_kl",
            Mode::CdrRcl => "cdr_rcl",
        }
    }

    pub fn uses_replay(self) -> bool {
        self != Mode::Stagewise
    }

    pub fn is_meta(self) -> bool {
        matches!(self, Mode::Cdr | Mode::CdrKl | Mode::CdrRcl)
    }

    pub fn default_distillation(self) -> Distillation {
        match self {
            Mode::Stagewise | Mode::ReplayJoint | Mode::Cdr => Distillation::NONE,
            Mode::CdrKl => Distillation::KL,
            Mode::CdrRcl => Distillation::BOTH,
        }
    }
}

/// Which batches the distillation loss covers, and on which side of the meta split.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KdPlacement {
    /// Distill on old and new batches, all in meta-test.
    Union,
    OldOnly,
    NewOnly,
    /// Distillation on the new batch joins meta-train; on the old batch stays in meta-test.
    DataSplit,
}

/// Override of the mode's distillation terms (used by ablations).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DistillChoice {
    #[default]
    Auto,
    None,
    OnlyKl,
    OnlyRel,
    Both,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CdrConfig {
    /// Inner (meta-train) plain descent rate.
    pub alpha: f64,
    pub outer_lr: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub mode: Mode,
    pub meta_test_data: KdPlacement,
    pub distill: DistillChoice,
}

impl Default for CdrConfig {
    fn default() -> Self {
        Self {
            alpha: 3.5e-4,
            outer_lr: 1e-2,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            mode: Mode::CdrRcl,
            meta_test_data: KdPlacement::Union,
            distill: DistillChoice::Auto,
        }
    }
}

impl CdrConfig {
    pub fn validate(&self) -> Result<()> {
        if self.mode.is_meta() && !(self.alpha >= 0.0) {
            return Err(Error::Config(format!("alpha must be >= 0, got {}", self.alpha)));
        }
        if !(self.outer_lr > 0.0) {
            return Err(Error::Config(format!("outer_lr must be > 0, got {}", self.outer_lr)));
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return Err(Error::Config("Adam betas must lie in [0, 1)".into()));
        }
        if !(self.adam_eps > 0.0) {
            return Err(Error::Config("adam_eps must be > 0".into()));
        }
        Ok(())
    }

    pub fn distillation(&self) -> Distillation {
        match self.distill {
            DistillChoice::Auto => self.mode.default_distillation(),
            DistillChoice::None => Distillation::NONE,
            DistillChoice::OnlyKl => Distillation::KL,
            DistillChoice::OnlyRel => Distillation::RELATIONAL,
            DistillChoice::Both => Distillation::BOTH,
        }
    }

    pub fn needs_historical(&self) -> bool {
        self.mode.uses_replay() && self.distillation().is_active()
    }

    /// Meta-train and meta-test objectives for this configuration.
    pub fn plan(&self) -> StepPlan {
        let distill = self.distillation();
        let adap = LossSpec::adaptation();
        let replay_old = LossSpec::new(vec![
            LossTerm::Triplet(BatchKind::Old),
            LossTerm::Classification(BatchKind::Old),
        ]);
        if !self.mode.uses_replay() {
            return StepPlan {
                meta_train: adap,
                meta_test: LossSpec::new(Vec::new()),
            };
        }
        let (train_kd, test_kd) = match self.meta_test_data {
            KdPlacement::Union => (vec![], distill.terms(Scope::Both)),
            KdPlacement::OldOnly => (vec![], distill.terms(Scope::Old)),
            KdPlacement::NewOnly => (vec![], distill.terms(Scope::New)),
            KdPlacement::DataSplit => (distill.terms(Scope::New), distill.terms(Scope::Old)),
        };
        StepPlan {
            meta_train: adap.plus(&LossSpec::new(train_kd)),
            meta_test: LossSpec::new(test_kd).plus(&replay_old),
        }
    }
}

/// The two objectives of one step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepPlan {
    pub meta_train: LossSpec,
    pub meta_test: LossSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub first_moment: Vec<f64>,
    pub second_moment: Vec<f64>,
    pub step_count: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        Self {
            first_moment: vec![0.0; len],
            second_moment: vec![0.0; len],
            step_count: 0,
        }
    }

    /// Zero moments for newly appended parameters.
    pub fn grow(&mut self, len: usize) {
        if len > self.first_moment.len() {
            self.first_moment.resize(len, 0.0);
            self.second_moment.resize(len, 0.0);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl From<&CdrConfig> for AdamHyper {
    fn from(c: &CdrConfig) -> Self {
        Self {
            lr: c.outer_lr,
            beta1: c.adam_beta1,
            beta2: c.adam_beta2,
            eps: c.adam_eps,
        }
    }
}

/// One bias-corrected Adam update. Inputs are untouched on error.
pub fn adam_apply(
    state: &AdamState,
    params: &ModelParams,
    gradient: &[f64],
    hyper: AdamHyper,
) -> Result<(ModelParams, AdamState)> {
    let n = params.len();
    if gradient.len() != n || state.first_moment.len() != n || state.second_moment.len() != n {
        return Err(Error::Protocol(format!(
            "Adam shape mismatch: params {n}, gradient {}, moments {}",
            gradient.len(),
            state.first_moment.len()
        )));
    }
    let mut next = state.clone();
    next.step_count += 1;
    let t = next.step_count as i32;
    let c1 = 1.0 - hyper.beta1.powi(t);
    let c2 = 1.0 - hyper.beta2.powi(t);
    let mut values = params.values().to_vec();
    for i in 0..n {
        let g = gradient[i];
        let m = hyper.beta1 * next.first_moment[i] + (1.0 - hyper.beta1) * g;
        let v = hyper.beta2 * next.second_moment[i] + (1.0 - hyper.beta2) * g * g;
        next.first_moment[i] = m;
        next.second_moment[i] = v;
        values[i] -= hyper.lr * (m / c1) / ((v / c2).sqrt() + hyper.eps);
    }
    let updated = params.with_values(values)?;
    updated.check_finite()?;
    Ok((updated, next))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct StepDiagnostics {
    /// `∇L_train · ∇L_test`, both taken at the step's starting point.
    pub dot_product: f64,
    pub grad_norm_adap: f64,
    pub grad_norm_antif: f64,
    pub grad_norm_total: f64,
    pub warmup: bool,
}

/// Total update direction and its parts.
#[derive(Debug, Clone)]
pub struct StepGradient {
    pub total: Vec<f64>,
    pub train: Vec<f64>,
    pub test: Vec<f64>,
    pub report: LossReport,
}

fn sum(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

/// First-order coordinated gradient `g1 + ∇L_test(θ - α·g1)`.
pub fn meta_gradient(
    params: &ModelParams,
    inputs: &LossInputs<'_>,
    plan: &StepPlan,
    alpha: f64,
    settings: &LossSettings,
) -> Result<StepGradient> {
    let train = evaluate(params, inputs, &plan.meta_train, settings, true)?;
    let g1 = train.gradient.expect("gradient requested");
    if plan.meta_test.is_empty() {
        return Ok(StepGradient {
            test: vec![0.0; g1.len()],
            total: g1.clone(),
            train: g1,
            report: train.report,
        });
    }
    let inner: Vec<f64> = params
        .values()
        .iter()
        .zip(&g1)
        .map(|(p, g)| p - alpha * g)
        .collect();
    let pre_updated = params.with_values(inner)?;
    let test = evaluate(&pre_updated, inputs, &plan.meta_test, settings, true)?;
    let g2 = test.gradient.expect("gradient requested");
    Ok(StepGradient {
        total: sum(&g1, &g2),
        train: g1,
        test: g2,
        report: train.report.combine(&test.report),
    })
}

/// Gradient of `L_train + L_test` at the unperturbed parameters.
pub fn joint_gradient(
    params: &ModelParams,
    inputs: &LossInputs<'_>,
    plan: &StepPlan,
    settings: &LossSettings,
) -> Result<StepGradient> {
    let train = evaluate(params, inputs, &plan.meta_train, settings, true)?;
    let g1 = train.gradient.expect("gradient requested");
    if plan.meta_test.is_empty() {
        return Ok(StepGradient {
            test: vec![0.0; g1.len()],
            total: g1.clone(),
            train: g1,
            report: train.report,
        });
    }
    let test = evaluate(params, inputs, &plan.meta_test, settings, true)?;
    let g2 = test.gradient.expect("gradient requested");
    Ok(StepGradient {
        total: sum(&g1, &g2),
        train: g1,
        test: g2,
        report: train.report.combine(&test.report),
    })
}

#[derive(Debug, Clone)]
pub struct StepOutcome {
    pub params: ModelParams,
    pub state: AdamState,
    pub report: LossReport,
    pub diagnostics: StepDiagnostics,
}

fn warmup_inputs<'a>(inputs: &LossInputs<'a>) -> LossInputs<'a> {
    LossInputs {
        new: inputs.new,
        old: None,
        historical: inputs.historical,
    }
}

fn finish_step(
    params: &ModelParams,
    state: &AdamState,
    g: StepGradient,
    cfg: &CdrConfig,
    warmup: bool,
) -> Result<StepOutcome> {
    let (updated, state) = adam_apply(state, params, &g.total, cfg.into())?;
    Ok(StepOutcome {
        params: updated,
        state,
        report: g.report,
        diagnostics: StepDiagnostics {
            dot_product: dot(&g.train, &g.test),
            grad_norm_adap: norm(&g.train),
            grad_norm_antif: norm(&g.test),
            grad_norm_total: norm(&g.total),
            warmup,
        },
    })
}

/// Coordinated replay step. Without an old batch (memory still warming up)
/// it falls back to an adaptation-only step and flags `warmup`.
pub fn meta_step(
    params: &ModelParams,
    state: &AdamState,
    inputs: &LossInputs<'_>,
    cfg: &CdrConfig,
    settings: &LossSettings,
) -> Result<StepOutcome> {
    if inputs.old.is_none() && cfg.mode.uses_replay() {
        let g = meta_gradient(params, &warmup_inputs(inputs), &adaptation_plan(), 0.0, settings)?;
        return finish_step(params, state, g, cfg, true);
    }
    let g = meta_gradient(params, inputs, &cfg.plan(), cfg.alpha, settings)?;
    finish_step(params, state, g, cfg, false)
}

/// Joint-objective step: one Adam step on `∇(L_train + L_test)`.
pub fn joint_step(
    params: &ModelParams,
    state: &AdamState,
    inputs: &LossInputs<'_>,
    cfg: &CdrConfig,
    settings: &LossSettings,
) -> Result<StepOutcome> {
    if inputs.old.is_none() && cfg.mode.uses_replay() {
        let g = joint_gradient(params, &warmup_inputs(inputs), &adaptation_plan(), settings)?;
        return finish_step(params, state, g, cfg, true);
    }
    let g = joint_gradient(params, inputs, &cfg.plan(), settings)?;
    finish_step(params, state, g, cfg, false)
}

fn adaptation_plan() -> StepPlan {
    StepPlan {
        meta_train: LossSpec::adaptation(),
        meta_test: LossSpec::new(Vec::new()),
    }
}

/// Dispatches on the configured mode.
pub fn train_step(
    params: &ModelParams,
    state: &AdamState,
    inputs: &LossInputs<'_>,
    cfg: &CdrConfig,
    settings: &LossSettings,
) -> Result<StepOutcome> {
    if cfg.mode.is_meta() {
        meta_step(params, state, inputs, cfg, settings)
    } else {
        joint_step(params, state, inputs, cfg, settings)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TaylorRecord {
    pub alpha: f64,
    /// `L_test(θ - α∇L_train)`
    pub lhs: f64,
    /// `L_test(θ) - α ∇L_train·∇L_test`
    pub first_order_rhs: f64,
    pub remainder: f64,
    pub dot_product: f64,
}

/// Compares the anti-forgetting loss after an inner step against its
/// first-order expansion, for each `α`.
pub fn taylor_alignment_diagnostic(
    params: &ModelParams,
    inputs: &LossInputs<'_>,
    plan: &StepPlan,
    settings: &LossSettings,
    alphas: &[f64],
) -> Result<Vec<TaylorRecord>> {
    let train = evaluate(params, inputs, &plan.meta_train, settings, true)?;
    let test = evaluate(params, inputs, &plan.meta_test, settings, true)?;
    let g1 = train.gradient.expect("gradient requested");
    let g2 = test.gradient.expect("gradient requested");
    let dp = dot(&g1, &g2);
    alphas
        .iter()
        .map(|&alpha| {
            let moved: Vec<f64> = params
                .values()
                .iter()
                .zip(&g1)
                .map(|(p, g)| p - alpha * g)
                .collect();
            let lhs = params
                .with_values(moved)
                .and_then(|p| evaluate(&p, inputs, &plan.meta_test, settings, false))
                .map_err(|e| Error::numeric("taylor diagnostic", format!("alpha = {alpha}: {e}")))?
                .value;
            if !lhs.is_finite() {
                return Err(Error::numeric("taylor diagnostic", format!("non-finite loss at alpha = {alpha}")));
            }
            let rhs = test.value - alpha * dp;
            Ok(TaylorRecord {
                alpha,
                lhs,
                first_order_rhs: rhs,
                remainder: (lhs - rhs).abs(),
                dot_product: dp,
            })
        })
        .collect()
}

/// Maximum relative error `|a - n| / (|n| + 1e-8)` between `analytic` and
/// central differences of `f` over the given coordinates.
pub fn finite_difference_check<F>(point: &[f64], analytic: &[f64], f: F, h: f64, coords: &[usize]) -> Result<f64>
where
    F: Fn(&[f64]) -> Result<f64>,
{
    let mut x = point.to_vec();
    let mut worst: f64 = 0.0;
    for &i in coords {
        let orig = x[i];
        x[i] = orig + h;
        let up = f(&x)?;
        x[i] = orig - h;
        let down = f(&x)?;
        x[i] = orig;
        let numeric = (up - down) / (2.0 * h);
        let err = (analytic[i] - numeric).abs() / (numeric.abs() + 1e-8);
        worst = worst.max(err);
    }
    Ok(worst)
}

/// Gradient check of a composite loss on a random subset of at least
/// `min_coords` parameters (all of them when the model is smaller).
pub fn model_gradient_check<R: Rng + ?Sized>(
    params: &ModelParams,
    inputs: &LossInputs<'_>,
    spec: &LossSpec,
    settings: &LossSettings,
    h: f64,
    min_coords: usize,
    rng: &mut R,
) -> Result<f64> {
    let analytic = evaluate(params, inputs, spec, settings, true)?
        .gradient
        .expect("gradient requested");
    let n = params.len();
    let coords: Vec<usize> = if n <= min_coords {
        (0..n).collect()
    } else {
        let mut c = sample(rng, n, min_coords).into_vec();
        c.sort_unstable();
        c
    };
    finite_difference_check(
        params.values(),
        &analytic,
        |v| {
            let p = params.with_values(v.to_vec())?;
            Ok(evaluate(&p, inputs, spec, settings, false)?.value)
        },
        h,
        &coords,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::Batch;
    use crate::model::ModelConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn hyper(lr: f64) -> AdamHyper {
        AdamHyper {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    fn tiny() -> ModelParams {
        let cfg = ModelConfig {
            input_dim: 3,
            hidden_dims: vec![],
            grid_size: 1,
            embed_dim: 2,
            gem_p: 3.0,
            num_classes: 1,
        };
        ModelParams::init(&cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap()
    }

    #[test]
    fn adam_zero_gradient_keeps_params() {
        let p = tiny();
        let s = AdamState::new(p.len());
        let (q, s2) = adam_apply(&s, &p, &vec![0.0; p.len()], hyper(0.1)).unwrap();
        assert_eq!(p, q);
        assert_eq!(s2.step_count, 1);
    }

    #[test]
    fn adam_first_step_matches_scalar_evaluation() {
        let p = tiny();
        let mut g = vec![0.0; p.len()];
        g[0] = 0.37;
        let s = AdamState::new(p.len());
        let (q, _) = adam_apply(&s, &p, &g, hyper(0.01)).unwrap();
        // m̂ = g, v̂ = g², step = lr·g/(|g| + eps)
        let expected = p.values()[0] - 0.01 * 0.37 / (0.37 + 1e-8);
        assert!((q.values()[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn adam_constant_gradient_steps_approach_lr() {
        let mut p = tiny();
        let mut s = AdamState::new(p.len());
        let g = vec![2.5; p.len()];
        let mut last = 0.0;
        for _ in 0..2000 {
            let before = p.values()[0];
            let (q, s2) = adam_apply(&s, &p, &g, hyper(1e-3)).unwrap();
            last = before - q.values()[0];
            p = q;
            s = s2;
        }
        assert!((last - 1e-3).abs() < 1e-6, "{last}");
    }

    #[test]
    fn adam_shape_mismatch_is_protocol_error() {
        let p = tiny();
        let s = AdamState::new(p.len() + 1);
        assert!(matches!(
            adam_apply(&s, &p, &vec![0.0; p.len()], hyper(0.1)),
            Err(Error::Protocol(_))
        ));
    }

    #[test]
    fn finite_difference_checker_behaviour() {
        let w = [0.3, -1.2, 2.0];
        let lin = |x: &[f64]| Ok(x.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>());
        let err = finite_difference_check(&[1.0, 2.0, 3.0], &w, lin, 1e-4, &[0, 1, 2]).unwrap();
        assert!(err <= 1e-10, "{err}");

        let cubic = |x: &[f64]| Ok(x[0].powi(3) + x[0].sin());
        let point = [0.7];
        let analytic = [3.0 * 0.49 + 0.7f64.cos()];
        let small = finite_difference_check(&point, &analytic, cubic, 1e-4, &[0]).unwrap();
        let large = finite_difference_check(&point, &analytic, cubic, 1e-1, &[0]).unwrap();
        assert!(small < 1e-6);
        assert!(large > small * 100.0);
    }

    // Scalar toy: L_adap = θ², L_antif = (θ-1)², first-order meta gradient
    // g = 2θ + 2((θ - α·2θ) - 1).
    fn toy_gradient(theta: f64, alpha: f64) -> f64 {
        let g1 = 2.0 * theta;
        let inner = theta - alpha * g1;
        g1 + 2.0 * (inner - 1.0)
    }

    #[test]
    fn scalar_toy_meta_gradient() {
        assert!((toy_gradient(1.0, 0.1) - 1.6).abs() < 1e-12);
        assert!((toy_gradient(1.0, 0.0) - 2.0).abs() < 1e-12);
    }

    #[test]
    fn stagewise_plan_has_no_meta_test() {
        let cfg = CdrConfig {
            mode: Mode::Stagewise,
            ..Default::default()
        };
        assert!(cfg.plan().meta_test.is_empty());
        assert!(!cfg.needs_historical());
    }

    #[test]
    fn data_split_places_new_kd_in_meta_train() {
        let cfg = CdrConfig {
            meta_test_data: KdPlacement::DataSplit,
            ..Default::default()
        };
        let plan = cfg.plan();
        assert!(plan.meta_train.terms.contains(&LossTerm::Kl(Scope::New)));
        assert!(plan.meta_test.terms.contains(&LossTerm::Relational(Scope::Old)));
    }

    #[test]
    fn meta_step_without_old_batch_is_warmup() {
        let cfg_m = ModelConfig {
            input_dim: 3,
            hidden_dims: vec![4],
            grid_size: 2,
            embed_dim: 3,
            gem_p: 3.0,
            num_classes: 2,
        };
        let p = ModelParams::init(&cfg_m, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let hist = p.to_historical();
        let batch = Batch::new(
            vec![vec![0.1, 0.2, 0.3], vec![0.1, 0.25, 0.3], vec![-1.0, 0.0, 1.0], vec![-1.0, 0.1, 1.0]],
            vec![0, 0, 1, 1],
            BatchKind::New,
        )
        .unwrap();
        let inputs = LossInputs {
            new: Some(&batch),
            old: None,
            historical: Some(&hist),
        };
        let s = AdamState::new(p.len());
        let out = meta_step(&p, &s, &inputs, &CdrConfig::default(), &LossSettings::default()).unwrap();
        assert!(out.diagnostics.warmup);
        assert_ne!(out.params, p);
    }
}
