use alloc::format;

use serde::{Deserialize, Serialize};

use crate::config::ConfigError;
use crate::data::SynthSpec;

/// Dimensions of the two-tower client model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Number of prompt-based residual attention blocks per tower (`r`).
    pub blocks: usize,
    /// Prompt length in tokens per block (`L`); split in half for keys and values.
    pub prompt_len: usize,
    /// Model width (`D`).
    pub width: usize,
    /// Attention heads (`m`).
    pub heads: usize,
    pub ffn_hidden: usize,
    pub head_hidden: usize,
    pub head_dropout: f64,
    pub image_vocab: usize,
    pub text_vocab: usize,
    pub image_seq_len: usize,
    pub text_seq_len: usize,
    pub layer_norm_eps: f64,
    /// Std of the frozen projection and feed-forward weights.
    pub init_std: f64,
    /// Std of the frozen token embeddings.
    pub embed_std: f64,
    /// Std of freshly initialized local prompts.
    pub prompt_init_std: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            blocks: 4,
            prompt_len: 4,
            width: 64,
            heads: 4,
            ffn_hidden: 64,
            head_hidden: 512,
            head_dropout: 0.2,
            image_vocab: 64,
            text_vocab: 32,
            image_seq_len: 6,
            text_seq_len: 3,
            layer_norm_eps: 1e-5,
            // 1/sqrt(D): at 0.02 the frozen towers emit near-constant features.
            init_std: 0.125,
            embed_std: 1.0,
            prompt_init_std: 0.02,
        }
    }
}

impl ModelConfig {
    /// Default dimensions with vocabularies and sequence lengths taken from
    /// a generator profile.
    pub fn for_synth(spec: &SynthSpec) -> Self {
        Self {
            image_vocab: spec.image_vocab,
            text_vocab: spec.text_vocab,
            image_seq_len: spec.slots,
            text_seq_len: spec.question_len,
            ..Self::default()
        }
    }

    /// Width of one key (or value) half of a prompt slice.
    pub fn prefix_half(&self) -> usize {
        self.prompt_len / 2
    }

    pub fn head_dim(&self) -> usize {
        self.width / self.heads
    }

    pub fn max_seq_len(&self) -> usize {
        self.image_seq_len.max(self.text_seq_len)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.prompt_len % 2 != 0 {
            return Err(ConfigError::new("model.prompt_len", format!("must be even, got {}", self.prompt_len)));
        }
        if self.width == 0 {
            return Err(ConfigError::new("model.width", "must be >= 1"));
        }
        if self.heads == 0 || self.width % self.heads != 0 {
            return Err(ConfigError::new(
                "model.heads",
                format!("head count {} must divide width {}", self.heads, self.width),
            ));
        }
        if self.blocks == 0 {
            return Err(ConfigError::new("model.blocks", "must be >= 1"));
        }
        for (key, v) in [
            ("model.ffn_hidden", self.ffn_hidden),
            ("model.head_hidden", self.head_hidden),
            ("model.image_vocab", self.image_vocab),
            ("model.text_vocab", self.text_vocab),
            ("model.image_seq_len", self.image_seq_len),
            ("model.text_seq_len", self.text_seq_len),
        ] {
            if v == 0 {
                return Err(ConfigError::new(key, "must be >= 1"));
            }
        }
        if !(0.0..1.0).contains(&self.head_dropout) {
            return Err(ConfigError::new("model.head_dropout", "must lie in [0, 1)"));
        }
        if !(self.layer_norm_eps > 0.0) || !(self.init_std >= 0.0 && self.embed_std >= 0.0 && self.prompt_init_std >= 0.0) {
            return Err(ConfigError::new("model.layer_norm_eps", "eps must be > 0 and init stds >= 0"));
        }
        Ok(())
    }
}
