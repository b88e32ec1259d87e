//! Experiment configuration: a versioned TOML schema covering data
//! generation, model architecture, and training. Unknown keys are rejected
//! so stale configs fail loudly instead of silently running defaults.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::baselines::{BetaDpoConfig, TrDpoConfig};
use crate::oracle::LabelMode;
use crate::{Error, Result};

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub version: u32,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

/// Synthetic data generation: a per-position random reward table drives
/// Bradley-Terry sampling with responses drawn from the reference policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub n_pairs: usize,
    /// "hard", "soft", or "sampled".
    pub label_mode: String,
    pub reward_seed: u64,
    #[serde(default = "default_reward_scale")]
    pub reward_scale: f64,
    pub data_seed: u64,
}

fn default_reward_scale() -> f64 {
    1.0
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    Tabular,
    Neural,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub kind: ModelKind,
    pub prompts: usize,
    pub vocab: usize,
    pub seq_len: usize,
    /// Neural-only embedding width.
    pub embed_dim: Option<usize>,
    /// Neural-only hidden width.
    pub hidden: Option<usize>,
    #[serde(default)]
    pub init_seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Dpo,
    EpsilonDpo,
    TrDpo,
    BetaDpo,
}

impl Method {
    pub fn as_str(&self) -> &'static str {
        match self {
            Method::Dpo => "dpo",
            Method::EpsilonDpo => "epsilon-dpo",
            Method::TrDpo => "tr-dpo",
            Method::BetaDpo => "beta-dpo",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "dpo" => Ok(Method::Dpo),
            "epsilon-dpo" => Ok(Method::EpsilonDpo),
            "tr-dpo" => Ok(Method::TrDpo),
            "beta-dpo" => Ok(Method::BetaDpo),
            other => Err(Error::Config(format!("unknown method {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub method: Method,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    pub learning_rate: f64,
    #[serde(default = "default_warmup_ratio")]
    pub warmup_ratio: f64,
    pub seed: u64,
    pub beta0: f64,
    /// Checkpoint cadence in epochs; fractions give intra-epoch snapshots.
    #[serde(default = "default_checkpoint_every")]
    pub checkpoint_every: f64,
    /// When false (the default), wall-clock columns emit 0 so reruns are
    /// byte-identical; timing runs opt in explicitly.
    #[serde(default)]
    pub timing: bool,
    /// Shared perturbation size (sets both eps_c and eps_s).
    pub eps: Option<f64>,
    /// Criterion perturbation; overrides `eps` when present.
    pub eps_c: Option<f64>,
    /// Step-size perturbation; overrides `eps` when present.
    pub eps_s: Option<f64>,
    pub trdpo: Option<TrDpoSection>,
    pub betadpo: Option<BetaDpoSection>,
}

fn default_epochs() -> usize {
    1
}

fn default_batch_size() -> usize {
    128
}

fn default_warmup_ratio() -> f64 {
    0.1
}

fn default_checkpoint_every() -> f64 {
    0.2
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrDpoSection {
    /// "hard" or "soft".
    pub mode: String,
    pub tau: Option<u64>,
    pub alpha: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BetaDpoSection {
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default = "default_sensitivity")]
    pub sensitivity: f64,
}

fn default_momentum() -> f64 {
    0.9
}

fn default_sensitivity() -> f64 {
    0.5
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig =
            toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(Error::Config(format!(
                "unsupported config version {} (expected {CONFIG_VERSION})",
                self.version
            )));
        }
        LabelMode::parse(&self.data.label_mode)?;
        if self.data.n_pairs == 0 {
            return Err(Error::Config("data.n_pairs must be positive".into()));
        }
        if !(self.data.reward_scale > 0.0) {
            return Err(Error::Config("data.reward_scale must be positive".into()));
        }

        let m = &self.model;
        if !(2..=64).contains(&m.vocab) {
            return Err(Error::Config(format!("model.vocab {} outside 2..=64", m.vocab)));
        }
        if m.prompts == 0 || m.seq_len == 0 {
            return Err(Error::Config("model.prompts and model.seq_len must be positive".into()));
        }
        if m.kind == ModelKind::Neural && (m.embed_dim.is_none() || m.hidden.is_none()) {
            return Err(Error::Config("neural model needs embed_dim and hidden".into()));
        }

        let t = &self.train;
        if t.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be >= 1".into()));
        }
        if t.epochs == 0 {
            return Err(Error::Config("train.epochs must be >= 1".into()));
        }
        if !(t.learning_rate > 0.0) {
            return Err(Error::Config("train.learning_rate must be positive".into()));
        }
        if !(0.0..1.0).contains(&t.warmup_ratio) {
            return Err(Error::Config("train.warmup_ratio must lie in [0, 1)".into()));
        }
        if !(t.beta0 > 0.0) {
            return Err(Error::Config("train.beta0 must be positive".into()));
        }
        if !(t.checkpoint_every > 0.0) {
            return Err(Error::Config("train.checkpoint_every must be positive".into()));
        }
        match t.method {
            Method::EpsilonDpo => {
                let (c, s) = self.epsilon_pair()?;
                for e in [c, s] {
                    if !(0.0 < e && e < 1.0) {
                        return Err(Error::Config(format!("epsilon {e} outside (0, 1)")));
                    }
                }
            }
            Method::TrDpo => {
                self.trdpo_config()?;
            }
            Method::BetaDpo => {
                self.betadpo_config()?;
            }
            Method::Dpo => {}
        }
        Ok(())
    }

    /// (eps_c, eps_s), resolving the shared `eps` shorthand.
    pub fn epsilon_pair(&self) -> Result<(f64, f64)> {
        let t = &self.train;
        let c = t.eps_c.or(t.eps);
        let s = t.eps_s.or(t.eps);
        match (c, s) {
            (Some(c), Some(s)) => Ok((c, s)),
            _ => Err(Error::Config("epsilon-dpo needs eps, or both eps_c and eps_s".into())),
        }
    }

    pub fn trdpo_config(&self) -> Result<TrDpoConfig> {
        let section = self
            .train
            .trdpo
            .as_ref()
            .ok_or_else(|| Error::Config("tr-dpo needs a [train.trdpo] section".into()))?;
        match section.mode.as_str() {
            "hard" => TrDpoConfig::hard(
                section.tau.ok_or_else(|| Error::Config("trdpo hard mode needs tau".into()))?,
            ),
            "soft" => TrDpoConfig::soft(
                section.alpha.ok_or_else(|| Error::Config("trdpo soft mode needs alpha".into()))?,
            ),
            other => Err(Error::Config(format!("unknown trdpo mode {other:?}"))),
        }
    }

    pub fn betadpo_config(&self) -> Result<BetaDpoConfig> {
        match &self.train.betadpo {
            Some(s) => BetaDpoConfig::new(self.train.beta0, s.momentum, s.sensitivity),
            None => BetaDpoConfig::with_defaults(self.train.beta0),
        }
    }

    /// Short provenance hash over the canonical serialized form; embedded in
    /// every emitted artifact.
    pub fn hash(&self) -> String {
        let canonical = toml::to_string(self).expect("config serializes");
        let digest = Sha256::digest(canonical.as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }
}
