//! Experiment driver: configuration, pre-training, staged runs, ablations
//! and diagnostics. Every output is a function of the configuration and seed.

mod ablate;
mod config;
mod diagnose;
mod run;

pub use ablate::{cmd_ablate, median, median_final_map, AblationPlan, AblationRow};
pub use config::{ClassifierInit, Method, RunConfig, RunSection};
pub use diagnose::{
    checked_terms, cmd_diagnose, random_instance, AlignmentSummary, DiagnoseReport, GradientCheck, Instance,
    TaylorRatio, GRADIENT_STEP, MIN_COORDS, TAYLOR_ALPHAS,
};
pub use run::{
    cmd_pretrain, cmd_run, cmd_run_in, ensure_pretrained, pretrain_checkpoint, pretrain_dir, run_dir,
    PretrainSummary, RunOutcome, FAILURE_MARKER,
};
