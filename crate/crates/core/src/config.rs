//! Experiment description shared by every module.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::data::SynthSpec;
use crate::model::ModelConfig;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("invalid configuration `{key}`: {reason}")]
pub struct ConfigError {
    pub key: String,
    pub reason: String,
}

impl ConfigError {
    pub fn new(key: impl Into<String>, reason: impl Into<String>) -> Self {
        Self { key: key.into(), reason: reason.into() }
    }
}

/// Weights of the distance and regularization terms in the client loss.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    /// Weight of the local/shared prompt distance loss.
    pub loss_alpha: f64,
    /// Weight of the squared L2 norm of the answer-head weights.
    pub beta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { loss_alpha: 0.5, beta: 0.001 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<(), ConfigError> {
        for (key, v) in [("losses.loss_alpha", self.loss_alpha), ("losses.beta", self.beta)] {
            if !v.is_finite() || v < 0.0 {
                return Err(ConfigError::new(key, format!("must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    pub global_epochs: usize,
    /// Full passes over the local train split per global epoch.
    pub local_epochs: usize,
    pub lr: f64,
    pub lr_decay_factor: f64,
    pub lr_decay_every: usize,
    pub batch_size: usize,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self { global_epochs: 30, local_epochs: 5, lr: 0.01, lr_decay_factor: 0.1, lr_decay_every: 10, batch_size: 16 }
    }
}

impl ScheduleConfig {
    /// Learning rate for a 1-based global epoch.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let steps = if self.lr_decay_every == 0 { 0 } else { (epoch.saturating_sub(1)) / self.lr_decay_every };
        let mut lr = self.lr;
        for _ in 0..steps {
            lr *= self.lr_decay_factor;
        }
        lr
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.global_epochs == 0 {
            return Err(ConfigError::new("schedule.global_epochs", "must be >= 1"));
        }
        if self.local_epochs == 0 {
            return Err(ConfigError::new("schedule.local_epochs", "must be >= 1"));
        }
        if self.batch_size == 0 {
            return Err(ConfigError::new("schedule.batch_size", "must be >= 1"));
        }
        if !self.lr.is_finite() || self.lr < 0.0 {
            return Err(ConfigError::new("schedule.lr", "must be finite and >= 0"));
        }
        if !self.lr_decay_factor.is_finite() || self.lr_decay_factor < 0.0 {
            return Err(ConfigError::new("schedule.lr_decay_factor", "must be finite and >= 0"));
        }
        Ok(())
    }
}

/// Ablation switches. The named presets mirror the four ablation studies:
/// `as1` no prompts and no communication, `as2` no communication,
/// `as3` no image prompts, `as4` no text prompts.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Ablation {
    pub no_prompt: bool,
    pub no_communication: bool,
    pub no_image_prompt: bool,
    pub no_text_prompt: bool,
}

impl Ablation {
    pub const NONE: Ablation = Ablation { no_prompt: false, no_communication: false, no_image_prompt: false, no_text_prompt: false };

    pub fn preset(name: &str) -> Option<Ablation> {
        let mut a = Ablation::NONE;
        match name {
            "none" | "pm" => {}
            "as1" => {
                a.no_prompt = true;
                a.no_communication = true;
            }
            "as2" => a.no_communication = true,
            "as3" => a.no_image_prompt = true,
            "as4" => a.no_text_prompt = true,
            _ => return None,
        }
        Some(a)
    }

    pub fn preset_name(&self) -> Option<&'static str> {
        ["none", "as1", "as2", "as3", "as4"].into_iter().find(|n| Ablation::preset(n).as_ref() == Some(self))
    }

    pub fn image_prompt(&self) -> bool {
        !self.no_prompt && !self.no_image_prompt
    }

    pub fn text_prompt(&self) -> bool {
        !self.no_prompt && !self.no_text_prompt
    }

    pub fn communicates(&self) -> bool {
        !self.no_communication && (self.image_prompt() || self.text_prompt())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FederationConfig {
    pub clients: usize,
    #[serde(default)]
    pub ablation: Ablation,
}

/// Where client datasets come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// Synthetic generator settings; used when `jsonl` is empty.
    pub synth: SynthSpec,
    /// One JSONL file per client, overriding the generator when non-empty.
    #[serde(default)]
    pub jsonl: Vec<String>,
    /// Train/val/test ratios applied to loaded JSONL datasets.
    #[serde(default = "default_split")]
    pub split: [f64; 3],
}

fn default_split() -> [f64; 3] {
    [0.7, 0.15, 0.15]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub output_dir: String,
    pub model: ModelConfig,
    pub losses: LossWeights,
    pub schedule: ScheduleConfig,
    pub federation: FederationConfig,
    pub data: DataConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let synth = SynthSpec::default();
        let model = ModelConfig::for_synth(&synth);
        Self {
            seed: 0,
            output_dir: String::from("runs/default"),
            model,
            losses: LossWeights::default(),
            schedule: ScheduleConfig::default(),
            federation: FederationConfig { clients: synth.clients.len(), ablation: Ablation::NONE },
            data: DataConfig { synth, jsonl: Vec::new(), split: default_split() },
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        self.model.validate()?;
        self.losses.validate()?;
        self.schedule.validate()?;
        let t = self.federation.clients;
        if t == 0 {
            return Err(ConfigError::new("federation.clients", "must be >= 1"));
        }
        if t < 2 && self.federation.ablation.communicates() {
            return Err(ConfigError::new("federation.clients", "communication needs at least 2 clients"));
        }
        if self.data.jsonl.is_empty() {
            self.data.synth.validate()?;
            if self.data.synth.clients.len() != t {
                return Err(ConfigError::new(
                    "data.synth.clients",
                    format!("{} client profiles for {} clients", self.data.synth.clients.len(), t),
                ));
            }
            if self.data.synth.image_vocab > self.model.image_vocab || self.data.synth.text_vocab > self.model.text_vocab {
                return Err(ConfigError::new("model.image_vocab", "model vocabularies smaller than the generator's"));
            }
        } else if self.data.jsonl.len() != t {
            return Err(ConfigError::new("data.jsonl", format!("{} files for {} clients", self.data.jsonl.len(), t)));
        }
        let s = self.data.split;
        if s.iter().any(|r| !(0.0..=1.0).contains(r)) || libm::fabs(s.iter().sum::<f64>() - 1.0) > 1e-9 {
            return Err(ConfigError::new("data.split", "ratios must lie in [0,1] and sum to 1"));
        }
        Ok(())
    }
}
