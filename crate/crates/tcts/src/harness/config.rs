//! Experiment configuration and the harness error/exit-code contract.

use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::autodiff::AdError;
use crate::data::DataError;
use crate::losses::LossError;
use crate::metrics::MetricError;
use crate::model::ModelError;
use crate::rl::RlError;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config error: {0}")]
    Config(String),
    #[error("data contract violation: {0}")]
    DataContract(String),
    #[error("incompatible checkpoint: {0}")]
    IncompatibleCheckpoint(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl HarnessError {
    /// Process exit code: 2 config, 3 data contract, 4 numeric, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Config(_) => 2,
            HarnessError::DataContract(_) | HarnessError::IncompatibleCheckpoint(_) => 3,
            HarnessError::Numeric(_) => 4,
            HarnessError::Io(_) => 1,
        }
    }
}

impl From<ModelError> for HarnessError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Ad(ad) => ad.into(),
            ModelError::OovToken(_) | ModelError::MissingAttributes => {
                HarnessError::DataContract(e.to_string())
            }
            ModelError::ModeViolation => HarnessError::Numeric(e.to_string()),
        }
    }
}

impl From<AdError> for HarnessError {
    fn from(e: AdError) -> Self {
        HarnessError::Numeric(e.to_string())
    }
}

impl From<MetricError> for HarnessError {
    fn from(e: MetricError) -> Self {
        HarnessError::DataContract(e.to_string())
    }
}

impl From<RlError> for HarnessError {
    fn from(e: RlError) -> Self {
        HarnessError::Numeric(e.to_string())
    }
}

impl From<LossError> for HarnessError {
    fn from(e: LossError) -> Self {
        HarnessError::Numeric(e.to_string())
    }
}

impl From<DataError> for HarnessError {
    fn from(e: DataError) -> Self {
        HarnessError::DataContract(e.to_string())
    }
}

/// Training regimes. `tcts-*` modes consult the frozen teacher.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    #[serde(rename = "teacher")]
    Teacher,
    #[serde(rename = "xe")]
    Xe,
    #[serde(rename = "tcts-xe")]
    TctsXe,
    #[serde(rename = "scst")]
    Scst,
    #[serde(rename = "tcts-rl")]
    TctsRl,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Mode::Teacher => "teacher",
            Mode::Xe => "xe",
            Mode::TctsXe => "tcts-xe",
            Mode::Scst => "scst",
            Mode::TctsRl => "tcts-rl",
        };
        f.write_str(s)
    }
}

/// One experiment's knobs. Unknown JSON keys are rejected.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub mode: Mode,
    #[serde(default = "default_lambda1")]
    pub lambda1: f64,
    #[serde(default = "default_lambda2")]
    pub lambda2: f64,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    /// Defaults per stage when absent: 0.2 for XE-style modes, 0.02 for RL.
    #[serde(default)]
    pub learning_rate: Option<f64>,
    #[serde(default = "default_decay_factor")]
    pub lr_decay_factor: f64,
    /// Decay interval in epochs; defaults to `max(epochs / 3, 1)`.
    #[serde(default)]
    pub lr_decay_every: Option<usize>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_hidden_dim")]
    pub hidden_dim: usize,
    #[serde(default = "default_max_len")]
    pub max_len: usize,
    #[serde(default = "default_min_count")]
    pub min_count: usize,
    /// Optional self-critical fine-tune epochs after teacher XE training.
    #[serde(default)]
    pub teacher_rl_epochs: usize,
    /// Reuse teacher captions across epochs (the teacher is frozen, so this
    /// only trades memory for speed).
    #[serde(default)]
    pub cache_teacher_captions: bool,
    pub data_path: PathBuf,
    #[serde(default)]
    pub checkpoint_in: Option<PathBuf>,
    #[serde(default)]
    pub checkpoint_out: Option<PathBuf>,
    #[serde(default)]
    pub teacher_checkpoint: Option<PathBuf>,
    #[serde(default)]
    pub report_path: Option<PathBuf>,
}

fn default_lambda1() -> f64 {
    0.2
}
fn default_lambda2() -> f64 {
    0.02
}
fn default_epochs() -> usize {
    15
}
fn default_batch_size() -> usize {
    32
}
fn default_decay_factor() -> f64 {
    0.5
}
fn default_hidden_dim() -> usize {
    64
}
fn default_max_len() -> usize {
    16
}
fn default_min_count() -> usize {
    5
}

const DEFAULT_XE_LR: f64 = 2.0;
const DEFAULT_RL_LR: f64 = 0.02;

impl ExperimentConfig {
    pub fn from_file(path: &Path) -> Result<ExperimentConfig, HarnessError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| HarnessError::Config(format!("cannot read {}: {e}", path.display())))?;
        let cfg: ExperimentConfig = serde_json::from_str(&text)
            .map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        if self.lambda1 < 0.0 || self.lambda2 < 0.0 {
            return Err(HarnessError::Config(
                "lambda1 and lambda2 must be non-negative".into(),
            ));
        }
        if self.batch_size == 0 || self.hidden_dim == 0 || self.max_len == 0 || self.min_count == 0
        {
            return Err(HarnessError::Config(
                "batch_size, hidden_dim, max_len and min_count must be positive".into(),
            ));
        }
        if let Some(lr) = self.learning_rate {
            if !(lr > 0.0) {
                return Err(HarnessError::Config("learning_rate must be positive".into()));
            }
        }
        match self.mode {
            Mode::TctsXe if self.teacher_checkpoint.is_none() => Err(HarnessError::Config(
                "tcts-xe requires teacher_checkpoint".into(),
            )),
            Mode::TctsRl if self.teacher_checkpoint.is_none() => Err(HarnessError::Config(
                "tcts-rl requires teacher_checkpoint".into(),
            )),
            Mode::Scst | Mode::TctsRl if self.checkpoint_in.is_none() => Err(
                HarnessError::Config(format!("{} requires checkpoint_in (an XE-stage checkpoint)", self.mode)),
            ),
            _ => Ok(()),
        }
    }

    /// Stage-appropriate learning rate when none was configured.
    pub fn effective_lr(&self) -> f64 {
        self.learning_rate.unwrap_or(match self.mode {
            Mode::Teacher | Mode::Xe | Mode::TctsXe => DEFAULT_XE_LR,
            Mode::Scst | Mode::TctsRl => DEFAULT_RL_LR,
        })
    }

    /// Step-decayed learning rate for an epoch, from `base`.
    pub fn lr_at(&self, base: f64, epoch: usize, total_epochs: usize) -> f64 {
        let every = self
            .lr_decay_every
            .unwrap_or_else(|| (total_epochs / 3).max(1))
            .max(1);
        base * self.lr_decay_factor.powi((epoch / every) as i32)
    }

    /// Hash over the canonical JSON form, recorded in checkpoints and
    /// reports.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        sha256_hex(json.as_bytes())
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn base_json() -> serde_json::Value {
        serde_json::json!({
            "mode": "xe",
            "data_path": "data.jsonl",
        })
    }

    #[test]
    fn defaults_match_protocol() {
        let cfg: ExperimentConfig = serde_json::from_value(base_json()).unwrap();
        assert_eq!(cfg.lambda1, 0.2);
        assert_eq!(cfg.lambda2, 0.02);
        assert_eq!(cfg.epochs, 15);
        assert_eq!(cfg.batch_size, 32);
        assert_eq!(cfg.hidden_dim, 64);
        assert_eq!(cfg.max_len, 16);
        assert_eq!(cfg.min_count, 5);
        cfg.validate().unwrap();
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let mut v = base_json();
        v["bogus"] = serde_json::json!(1);
        assert!(serde_json::from_value::<ExperimentConfig>(v).is_err());
    }

    #[test]
    fn rl_modes_require_checkpoints() {
        let mut v = base_json();
        v["mode"] = serde_json::json!("scst");
        let cfg: ExperimentConfig = serde_json::from_value(v).unwrap();
        assert!(matches!(cfg.validate(), Err(HarnessError::Config(_))));

        let mut v = base_json();
        v["mode"] = serde_json::json!("tcts-rl");
        v["checkpoint_in"] = serde_json::json!("student.ckpt");
        let cfg: ExperimentConfig = serde_json::from_value(v).unwrap();
        assert!(matches!(cfg.validate(), Err(HarnessError::Config(_))));
    }

    #[test]
    fn config_hash_is_stable_and_sensitive() {
        let a: ExperimentConfig = serde_json::from_value(base_json()).unwrap();
        let b: ExperimentConfig = serde_json::from_value(base_json()).unwrap();
        assert_eq!(a.hash(), b.hash());
        let mut v = base_json();
        v["seed"] = serde_json::json!(1);
        let c: ExperimentConfig = serde_json::from_value(v).unwrap();
        assert_ne!(a.hash(), c.hash());
    }

    #[test]
    fn lr_schedule_halves_every_third() {
        let cfg: ExperimentConfig = serde_json::from_value(base_json()).unwrap();
        let base = 0.3;
        assert_eq!(cfg.lr_at(base, 0, 15), 0.3);
        assert_eq!(cfg.lr_at(base, 4, 15), 0.3);
        assert_eq!(cfg.lr_at(base, 5, 15), 0.15);
        assert_eq!(cfg.lr_at(base, 10, 15), 0.075);
    }
}
