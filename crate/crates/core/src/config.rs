//! Experiment configuration, read from TOML.
//!
//! Unknown keys are rejected. Everything except `rounds` and the `[scenario]`
//! table has a default; [`ExperimentConfig::to_toml`] writes the fully
//! materialized config back out.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::aggregation::{ConflictAverseConfig, HyperConfig};
use crate::data::ScenarioConfig;
use crate::model::ArchSpec;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AggregationMode {
    /// No aggregation at all.
    Local,
    /// Mean encoder update across clients, mean decoder update across all decoders.
    Fedavg,
    /// Conflict-averse encoder, cross-attention decoders, hyper weights.
    #[default]
    Hca2,
    /// Conflict-averse encoder only; decoders stay local.
    EncOnly,
    /// Cross-attention decoders only; encoders stay local.
    DecOnly,
}

impl AggregationMode {
    pub const ALL: [AggregationMode; 5] = [
        AggregationMode::Local,
        AggregationMode::Fedavg,
        AggregationMode::Hca2,
        AggregationMode::EncOnly,
        AggregationMode::DecOnly,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            AggregationMode::Local => "local",
            AggregationMode::Fedavg => "fedavg",
            AggregationMode::Hca2 => "hca2",
            AggregationMode::EncOnly => "enc_only",
            AggregationMode::DecOnly => "dec_only",
        }
    }

    pub fn aggregates_encoder(self) -> bool {
        matches!(self, AggregationMode::Hca2 | AggregationMode::EncOnly)
    }

    pub fn aggregates_decoders(self) -> bool {
        matches!(self, AggregationMode::Hca2 | AggregationMode::DecOnly)
    }
}

impl fmt::Display for AggregationMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AggregationMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| format!("unknown mode {s:?}"))
    }
}

fn default_local_epochs() -> usize {
    1
}
fn default_batch_size() -> usize {
    16
}
fn default_lr() -> f64 {
    0.05
}
fn default_eval_every() -> usize {
    1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Master seed; every random stream is derived from it.
    #[serde(default)]
    pub seed: u64,
    pub rounds: usize,
    #[serde(default = "default_local_epochs")]
    pub local_epochs: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default)]
    pub mode: AggregationMode,
    #[serde(default = "default_eval_every")]
    pub eval_every: usize,
    /// Write a checkpoint every this many rounds; 0 disables.
    #[serde(default)]
    pub checkpoint_every: usize,
    pub scenario: ScenarioConfig,
    #[serde(default)]
    pub arch: ArchSpec,
    #[serde(default)]
    pub conflict_averse: ConflictAverseConfig,
    #[serde(default)]
    pub hyper: HyperConfig,
}

impl ExperimentConfig {
    /// The default benchmark scenario with every default filled in.
    pub fn benchmark(rounds: usize, seed: u64) -> Self {
        Self {
            seed,
            rounds,
            local_epochs: default_local_epochs(),
            batch_size: default_batch_size(),
            lr: default_lr(),
            mode: AggregationMode::default(),
            eval_every: default_eval_every(),
            checkpoint_every: 0,
            scenario: ScenarioConfig::default(),
            arch: ArchSpec::default(),
            conflict_averse: ConflictAverseConfig::default(),
            hyper: HyperConfig::default(),
        }
    }

    pub fn with_mode(mut self, mode: AggregationMode) -> Self {
        self.mode = mode;
        self
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let violated = |invariant: &str, detail: String| {
            Err(ConfigError::Constraint {
                invariant: invariant.to_string(),
                detail,
            })
        };
        if self.rounds < 1 {
            return violated("rounds ≥ 1", format!("rounds = {}", self.rounds));
        }
        if self.local_epochs < 1 {
            return violated("local_epochs ≥ 1", format!("local_epochs = {}", self.local_epochs));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return violated("lr > 0", format!("lr = {}", self.lr));
        }
        if self.batch_size < 1 {
            return violated("batch_size ≥ 1", format!("batch_size = {}", self.batch_size));
        }
        if self.eval_every < 1 {
            return violated("eval_every ≥ 1", format!("eval_every = {}", self.eval_every));
        }
        let c = self.conflict_averse.c;
        if !(0.0..1.0).contains(&c) {
            return violated("c ∈ [0,1)", format!("conflict_averse.c = {c}"));
        }
        if let Err(e) = self.conflict_averse.validate() {
            return violated("conflict_averse solver settings", e.to_string());
        }
        if let Err(e) = self.hyper.validate() {
            return violated("hyper weight settings", e.to_string());
        }
        if let Err(e) = self.arch.validate() {
            return violated("architecture", e.to_string());
        }
        if let Err(e) = self.scenario.validate() {
            return violated("scenario", e.to_string());
        }
        if self.arch.input_dim != self.scenario.input_dim {
            return violated(
                "arch.input_dim = scenario.input_dim",
                format!("{} vs {}", self.arch.input_dim, self.scenario.input_dim),
            );
        }
        Ok(())
    }

    pub fn epochs_for(&self, client_index: usize) -> usize {
        self.scenario.clients[client_index]
            .local_epochs
            .unwrap_or(self.local_epochs)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always representable as TOML")
    }
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("config schema error at `{key_path}`: {message}")]
    Schema { key_path: String, message: String },

    #[error("config constraint violated ({invariant}): {detail}")]
    Constraint { invariant: String, detail: String },
}

/// Parses and validates a config from TOML text.
pub fn parse_config_str(text: &str) -> Result<ExperimentConfig, ConfigError> {
    let value: toml::Table = text.parse().map_err(|e: toml::de::Error| ConfigError::Schema {
        key_path: ".".into(),
        message: e.message().to_string(),
    })?;
    let cfg: ExperimentConfig =
        serde_path_to_error::deserialize(toml::Value::Table(value)).map_err(|e| ConfigError::Schema {
            key_path: e.path().to_string(),
            message: e.inner().message().to_string(),
        })?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn parse_config(path: &Path) -> Result<ExperimentConfig, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_config_str(&text)
}
