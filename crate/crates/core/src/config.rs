//! Run configuration: one TOML document holding every module config.
//!
//! All tables reject unknown keys and fill missing ones with defaults, so an
//! empty file is a valid config. `--ci` swaps in the CI profile, which only
//! shrinks sizes.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dataset::{ColumnMap, ExtractConfig, OfflineEnvConfig, SyntheticConfig, Units};
use crate::env::ScenarioConfig;
use crate::error::{Error, Result};
use crate::optimizer::UpdateConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    TrainOnline,
    TrainOffline,
    Eval,
    FilterOnly,
    ExtractDataset,
    GenSynthetic,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::TrainOnline => "train-online",
            Mode::TrainOffline => "train-offline",
            Mode::Eval => "eval",
            Mode::FilterOnly => "filter-only",
            Mode::ExtractDataset => "extract-dataset",
            Mode::GenSynthetic => "gen-synthetic",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PolicyConfig {
    pub hidden: Vec<usize>,
    pub init_log_std: f64,
    /// Scale of the initial output-layer weights.
    pub output_scale: f64,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            hidden: vec![64, 64],
            init_log_std: 0.5f64.ln(),
            output_scale: 0.01,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OnlineConfig {
    pub epochs: usize,
    pub episodes: usize,
    /// Policy steps per training rollout.
    pub length: usize,
    pub gamma: f64,
    pub eval_episodes: usize,
    /// Raw action held by the filter-only mode.
    pub filter_only_action: f64,
    /// Actor checkpoint for eval mode; a fresh random actor when absent.
    pub checkpoint: Option<PathBuf>,
}

impl Default for OnlineConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            episodes: 20,
            length: 50,
            gamma: 0.99,
            eval_episodes: 50,
            filter_only_action: 0.0,
            checkpoint: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OfflineConfig {
    /// NGSIM-schema CSV. Offline training falls back to generated synthetic
    /// data when absent.
    pub data: Option<PathBuf>,
    pub columns: ColumnMap,
    pub units: Units,
    pub extract: ExtractConfig,
    pub env: OfflineEnvConfig,
    pub epochs: usize,
    pub trajectories: usize,
    pub length: usize,
    pub gamma: f64,
    pub train_fraction: f64,
    pub val_fraction: f64,
    pub eval_trajectories: usize,
    pub eval_length: usize,
}

impl Default for OfflineConfig {
    fn default() -> Self {
        Self {
            data: None,
            columns: ColumnMap::default(),
            units: Units::Feet,
            extract: ExtractConfig::default(),
            env: OfflineEnvConfig::default(),
            epochs: 100,
            trajectories: 5000,
            length: 4,
            gamma: 0.99,
            train_fraction: 0.8,
            val_fraction: 0.1,
            eval_trajectories: 50,
            eval_length: 20,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    /// Set by `--ci`; the CI profile has been applied.
    pub ci: bool,
    pub scenario: ScenarioConfig,
    pub policy: PolicyConfig,
    pub update: UpdateConfig,
    pub online: OnlineConfig,
    pub offline: OfflineConfig,
    pub synthetic: SyntheticConfig,
}

impl RunConfig {
    /// Parses `text` as overrides on the default document, so a partial
    /// nested table keeps its parent's defaults (the scenario's coupled
    /// CBF, say) rather than the nested type's own.
    pub fn from_toml(text: &str) -> Result<Self> {
        let patch: toml::Table = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        let mut base = toml::Table::try_from(Self::default()).map_err(|e| Error::Config(e.to_string()))?;
        merge_tables(&mut base, patch);
        toml::Value::Table(base)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("serializing config: {e}")))
    }

    /// Shrinks widths, episode counts and epochs. Idempotent.
    pub fn apply_ci_profile(&mut self) {
        self.ci = true;
        self.policy.hidden = vec![32, 32];
        self.online.epochs = 5;
        self.online.episodes = 10;
        self.online.length = 20;
        self.online.eval_episodes = 10;
        self.offline.epochs = 20;
        self.offline.trajectories = 500;
        self.synthetic.merges = 40;
        self.synthetic.decoys = 5;
    }

    pub fn validate(&self) -> Result<()> {
        self.scenario.validate()?;
        self.update.trust_region.validate()?;
        self.offline.env.validate()?;
        self.synthetic.validate()?;
        let bad = |msg: String| Err(Error::Config(msg));
        if self.policy.hidden.contains(&0) {
            return bad(format!("policy.hidden widths must be >= 1, got {:?}", self.policy.hidden));
        }
        if !self.policy.init_log_std.is_finite() || !(self.policy.output_scale >= 0.0) {
            return bad("policy.init_log_std must be finite and policy.output_scale >= 0".into());
        }
        if !(self.update.critic.lr > 0.0) {
            return bad("update.critic.lr must be > 0".into());
        }
        for (key, gamma) in [("online.gamma", self.online.gamma), ("offline.gamma", self.offline.gamma)] {
            if !(0.0..=1.0).contains(&gamma) {
                return bad(format!("{key} must be in [0, 1], got {gamma}"));
            }
        }
        let (tf, vf) = (self.offline.train_fraction, self.offline.val_fraction);
        if !(tf > 0.0 && vf >= 0.0 && tf + vf <= 1.0) {
            return bad(format!("offline split fractions invalid: train {tf}, val {vf}"));
        }
        if self.offline.extract.threshold <= 0.0 {
            return bad("offline.extract.threshold must be > 0".into());
        }
        Ok(())
    }
}

fn merge_tables(base: &mut toml::Table, patch: toml::Table) {
    for (key, value) in patch {
        match (base.get_mut(&key), value) {
            (Some(toml::Value::Table(b)), toml::Value::Table(p)) => merge_tables(b, p),
            (_, value) => {
                base.insert(key, value);
            }
        }
    }
}
