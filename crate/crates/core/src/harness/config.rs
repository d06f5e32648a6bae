//! Run configuration: every module's settings plus run-level options.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::bench::{Scenario, StreamConfig};
use crate::cluster::ClusterConfig;
use crate::error::{Error, Result};
use crate::losses::LossSettings;
use crate::memory::MemoryConfig;
use crate::model::ModelConfig;
use crate::optim::{CdrConfig, Mode};

/// Method tag: a rung of the ablation ladder or the all-in-one reference.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Stagewise,
    ReplayJoint,
    Cdr,
    CdrKl,
    CdrRcl,
    /// Trains once on the union of all stage data.
    AllInOne,
}

impl Method {
    pub const LADDER: [Method; 5] = [
        Method::Stagewise,
        Method::ReplayJoint,
        Method::Cdr,
        Method::CdrKl,
        Method::CdrRcl,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::AllInOne => "all_in_one",
            m => m.mode().expect("ladder method").name(),
        }
    }

    /// Step rule; the all-in-one reference trains like the stage-wise baseline.
    pub fn mode(self) -> Option<Mode> {
        match self {
            Method::Stagewise => Some(Mode::Stagewise),
            Method::ReplayJoint => Some(Mode::ReplayJoint),
            Method::Cdr => Some(Mode::Cdr),
            Method::CdrKl => Some(Mode::CdrKl),
            Method::CdrRcl => Some(Mode::CdrRcl),
            Method::AllInOne => None,
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::LADDER
            .iter()
            .chain(&[Method::AllInOne])
            .copied()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown method '{s}'")))
    }
}

impl FromStr for Scenario {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "stationary" => Ok(Scenario::Stationary),
            "dynamic" => Ok(Scenario::Dynamic),
            _ => Err(Error::Config(format!("unknown scenario '{s}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassifierInit {
    /// Uniform random rows.
    Random,
    /// The cluster's mean normalized embedding.
    Centroid,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    pub method: Method,
    pub epochs_per_stage: usize,
    pub pretrain_epochs: usize,
    pub pretrain_lr: f64,
    /// Identities per PK batch.
    pub batch_ids: usize,
    /// Instances per identity in a PK batch.
    pub batch_instances: usize,
    /// EMA momentum of the historical model.
    pub ema_beta: f64,
    /// How classifier rows of new pseudo identities start.
    pub classifier_init: ClassifierInit,
    /// Norm of centroid-initialized classifier rows.
    pub centroid_scale: f64,
    pub seeds: Vec<u64>,
    pub out: PathBuf,
}

impl Default for RunSection {
    fn default() -> Self {
        Self {
            method: Method::CdrRcl,
            epochs_per_stage: 10,
            pretrain_epochs: 30,
            pretrain_lr: 1e-3,
            batch_ids: 8,
            batch_instances: 4,
            ema_beta: 0.999,
            classifier_init: ClassifierInit::Centroid,
            centroid_scale: 1.0,
            seeds: vec![0, 1, 2, 3, 4],
            out: PathBuf::from("runs"),
        }
    }
}

/// Merged configuration of all modules.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub losses: LossSettings,
    pub optimizer: CdrConfig,
    pub memory: MemoryConfig,
    pub cluster: ClusterConfig,
    pub stream: StreamConfig,
    pub run: RunSection,
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml_str(&fs::read_to_string(path)?)
    }

    /// Full configuration with every default written out.
    pub fn to_toml_string(&self) -> Result<String> {
        Ok(toml::to_string_pretty(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.optimizer.validate()?;
        self.cluster.validate()?;
        if self.model.input_dim != self.stream.input_dim {
            return Err(Error::Config(format!(
                "model input_dim {} differs from stream input_dim {}",
                self.model.input_dim, self.stream.input_dim
            )));
        }
        if self.memory.capacity_ids == 0 || self.memory.per_id_cap == 0 {
            return Err(Error::Config("memory capacity must be positive".into()));
        }
        let r = &self.run;
        if r.batch_ids < 2 || r.batch_instances < 2 {
            return Err(Error::Config("PK batches need at least 2 identities and 2 instances".into()));
        }
        if r.epochs_per_stage == 0 || r.pretrain_epochs == 0 {
            return Err(Error::Config("epoch counts must be positive".into()));
        }
        if !(r.pretrain_lr > 0.0) {
            return Err(Error::Config("pretrain_lr must be > 0".into()));
        }
        if !(r.centroid_scale > 0.0) {
            return Err(Error::Config("centroid_scale must be > 0".into()));
        }
        if !(0.0..=1.0).contains(&r.ema_beta) {
            return Err(Error::Config(format!("ema_beta must lie in [0, 1], got {}", r.ema_beta)));
        }
        if r.seeds.is_empty() {
            return Err(Error::Config("seeds list is empty".into()));
        }
        Ok(())
    }

    /// Optimizer settings with the step rule of the configured method.
    pub fn optimizer_for_method(&self) -> CdrConfig {
        let mut c = self.optimizer.clone();
        c.mode = self.run.method.mode().unwrap_or(Mode::Stagewise);
        c
    }

    pub fn with_method(&self, method: Method) -> Self {
        let mut c = self.clone();
        c.run.method = method;
        c
    }

    pub fn with_scenario(&self, scenario: Scenario) -> Self {
        let mut c = self.clone();
        c.stream.scenario = scenario;
        c
    }

    pub fn with_out(&self, out: impl Into<PathBuf>) -> Self {
        let mut c = self.clone();
        c.run.out = out.into();
        c
    }
}
