use serde::{Deserialize, Serialize};

use super::{AnswerHead, Backbone};

/// Parameter totals of a CLIP ViT-B/16 image+text backbone, used to put the
/// prompt payload in proportion at realistic scale.
pub const CLIP_VIT_B16_PARAMS: u64 = 149_620_737;

/// Bytes per transmitted scalar.
pub const SCALAR_BYTES: u64 = 8;

/// Parameter accounting for one federation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ParamAccounting {
    pub backbone_params: u64,
    /// Local prompts a client transmits: both towers, `r·L·D` each.
    pub prompt_params_per_client: u64,
    /// Answer-head parameters of one client (mean across clients when
    /// vocabularies differ).
    pub head_params: u64,
    /// `prompt / (backbone + head + prompt)`.
    pub payload_ratio: f64,
}

impl ParamAccounting {
    pub fn from_counts(backbone_params: u64, towers: u64, blocks: u64, prompt_len: u64, width: u64, head_params: u64) -> Self {
        let prompt = towers * blocks * prompt_len * width;
        let total = backbone_params + head_params + prompt;
        let payload_ratio = if total == 0 { 0.0 } else { prompt as f64 / total as f64 };
        Self { backbone_params, prompt_params_per_client: prompt, head_params, payload_ratio }
    }

    /// Bytes sent per communication round: every client sends its prompts
    /// plus one accuracy scalar.
    pub fn round_bytes(&self, clients: u64) -> u64 {
        clients * (self.prompt_params_per_client * SCALAR_BYTES + SCALAR_BYTES)
    }

    /// CLIP-scale profile: `r = 12`, `L = 4`, `D = 512`, a 2-layer head with
    /// hidden width 512 over `answers` classes.
    pub fn clip_profile(answers: u64) -> Self {
        let (d, hidden) = (512u64, 512u64);
        let head = 2 * d * hidden + hidden + hidden * answers + answers;
        Self::from_counts(CLIP_VIT_B16_PARAMS, 2, 12, 4, d, head)
    }
}

/// Accounting for a concrete backbone and client heads.
pub fn count_params(backbone: &Backbone, heads: &[AnswerHead]) -> ParamAccounting {
    let cfg = backbone.config();
    let head_params = if heads.is_empty() {
        0
    } else {
        heads.iter().map(AnswerHead::param_count).sum::<u64>() / heads.len() as u64
    };
    ParamAccounting::from_counts(
        backbone.param_count(),
        2,
        cfg.blocks as u64,
        cfg.prompt_len as u64,
        cfg.width as u64,
        head_params,
    )
}
