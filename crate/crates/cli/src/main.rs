//! Command-line front end for pre-training, staged runs, ablations,
//! diagnostics and checkpoint evaluation.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use luda::bench::{Scenario, World};
use luda::eval::{evaluate_stage, write_metrics_csv};
use luda::harness::{self, AblationPlan, Method, RunConfig};
use luda::model::load_checkpoint;

#[derive(Parser)]
#[command(name = "luda", version, about = "Lifelong unsupervised domain adaptation for retrieval")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args, Clone)]
struct Common {
    /// TOML configuration; omitted sections use defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run a single seed instead of the configured list.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    method: Option<Method>,
    #[arg(long)]
    scenario: Option<Scenario>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Supervised pre-training on the labeled source domain.
    Pretrain(Common),
    /// Staged adaptation over the target stream.
    Run(Common),
    /// Method ladder plus memory-policy and distillation toggles.
    Ablate(Common),
    /// Gradient checks, Taylor-remainder scaling and gradient alignment.
    Diagnose {
        #[command(flatten)]
        common: Common,
        /// Checkpoint stem to diagnose; a fresh model otherwise.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value_t = 20)]
        instances: usize,
    },
    /// Evaluates a checkpoint on every stage's splits.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Checkpoint stem (path without `.bin` / `.json`).
        #[arg(long)]
        checkpoint: PathBuf,
    },
}

impl Common {
    fn load(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p).with_context(|| format!("reading {}", p.display()))?,
            None => RunConfig::default(),
        };
        if let Some(m) = self.method {
            cfg = cfg.with_method(m);
        }
        if let Some(s) = self.scenario {
            cfg = cfg.with_scenario(s);
        }
        if let Some(o) = &self.out {
            cfg = cfg.with_out(o.clone());
        }
        if let Some(s) = self.seed {
            cfg.run.seeds = vec![s];
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn write_failure(out: &Path, command: &str, err: &anyhow::Error) {
    let body = serde_json::json!({ "command": command, "error": format!("{err:#}") });
    let _ = std::fs::create_dir_all(out);
    let _ = std::fs::write(out.join(harness::FAILURE_MARKER), body.to_string());
}

fn execute(command: &Command) -> Result<()> {
    match command {
        Command::Pretrain(c) => {
            let cfg = c.load()?;
            for &seed in &cfg.run.seeds {
                let s = harness::cmd_pretrain(&cfg, seed)?;
                println!("{}", serde_json::to_string(&s)?);
            }
        }
        Command::Run(c) => {
            let cfg = c.load()?;
            for &seed in &cfg.run.seeds {
                let o = harness::cmd_run(&cfg, seed)?;
                println!("{}", o.dir.join("metrics.csv").display());
            }
        }
        Command::Ablate(c) => {
            let cfg = c.load()?;
            let plan = match c.method {
                Some(m) => AblationPlan {
                    methods: vec![m],
                    ..AblationPlan::default()
                },
                None => AblationPlan::default(),
            };
            let rows = harness::cmd_ablate(&cfg, &plan)?;
            println!("{} rows -> {}", rows.len(), cfg.run.out.join("ablation.csv").display());
        }
        Command::Diagnose {
            common,
            checkpoint,
            instances,
        } => {
            let cfg = common.load()?;
            for &seed in &cfg.run.seeds {
                let r = harness::cmd_diagnose(&cfg, seed, checkpoint.as_deref(), *instances)?;
                println!("{}", serde_json::to_string_pretty(&r)?);
            }
        }
        Command::Eval { common, checkpoint } => {
            let cfg = common.load()?;
            let params = load_checkpoint(checkpoint).with_context(|| format!("loading {}", checkpoint.display()))?;
            for &seed in &cfg.run.seeds {
                let world = World::generate(&cfg.stream.resolve(seed)?)?;
                let mut rows = Vec::new();
                for t in 1..=world.stages.len() {
                    rows.extend(evaluate_stage(&params, &world, t, "checkpoint", seed)?);
                }
                let dir = cfg.run.out.join("eval").join(seed.to_string());
                std::fs::create_dir_all(&dir)?;
                let path = dir.join("metrics.csv");
                write_metrics_csv(&rows, &path)?;
                println!("{}", path.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match execute(&cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let (name, common) = match &cli.command {
                Command::Pretrain(c) => ("pretrain", c),
                Command::Run(c) => ("run", c),
                Command::Ablate(c) => ("ablate", c),
                Command::Diagnose { common, .. } => ("diagnose", common),
                Command::Eval { common, .. } => ("eval", common),
            };
            let out = common
                .load()
                .map(|c| c.run.out)
                .unwrap_or_else(|_| common.out.clone().unwrap_or_else(|| PathBuf::from("runs")));
            write_failure(&out, name, &e);
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
