//! Two-tower prompt-based client model.

use serde::{Deserialize, Serialize};

use crate::config::ConfigError;
use crate::numerics::{DropoutMask, NumericsError, Tape, Var};

mod accounting;
mod backbone;
mod config;
mod encoder;
mod head;
mod prompt;

pub use accounting::{count_params, ParamAccounting, CLIP_VIT_B16_PARAMS, SCALAR_BYTES};
pub use backbone::{sinusoidal_table, Backbone, BlockVars, BlockWeights, TowerWeights};
pub use config::ModelConfig;
pub use encoder::{encode, pra_block, prefix_attention_heads, prefix_mha, BlockPrefix, EncoderInput, TowerPrompts};
pub use head::{answer_forward, AnswerHead, HeadVars};
pub use prompt::{split_prompt, PromptKind, PromptSet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Image,
    Text,
}

impl Modality {
    pub const ALL: [Modality; 2] = [Modality::Image, Modality::Text];

    pub fn as_str(self) -> &'static str {
        match self {
            Modality::Image => "image",
            Modality::Text => "text",
        }
    }
}

/// One value per tower.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ModalityPair<T> {
    pub image: T,
    pub text: T,
}

impl<T> ModalityPair<T> {
    pub fn from_fn(mut f: impl FnMut(Modality) -> T) -> Self {
        Self { image: f(Modality::Image), text: f(Modality::Text) }
    }

    pub fn get(&self, m: Modality) -> &T {
        match m {
            Modality::Image => &self.image,
            Modality::Text => &self.text,
        }
    }

    pub fn get_mut(&mut self, m: Modality) -> &mut T {
        match m {
            Modality::Image => &mut self.image,
            Modality::Text => &mut self.text,
        }
    }

    pub fn map<U>(&self, mut f: impl FnMut(Modality, &T) -> U) -> ModalityPair<U> {
        ModalityPair { image: f(Modality::Image, &self.image), text: f(Modality::Text, &self.text) }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ModelError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("{} token {id} at position {index} is outside the vocabulary of size {vocab}", tower.as_str())]
    OutOfVocabulary { tower: Modality, index: usize, id: usize, vocab: usize },
    #[error("sequence length {len} exceeds positional table length {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("block {block} out of range for {blocks} blocks")]
    BlockOutOfRange { block: usize, blocks: usize },
    #[error("prompt length {0} must be even")]
    OddPromptLength(usize),
    #[error("prompt shapes {left:?} and {right:?} differ")]
    PromptShape { left: [usize; 3], right: [usize; 3] },
    #[error("expected a {} prompt, found {}", expected.as_str(), found.as_str())]
    ModalityMismatch { expected: Modality, found: Modality },
    #[error("invalid input: {reason}")]
    Input { reason: &'static str },
}

/// Tape handles produced by one client forward pass.
#[derive(Debug, Clone)]
pub struct ForwardPass {
    pub logits: Var,
    /// Local prompt leaves of the active towers.
    pub local: ModalityPair<Option<Var>>,
    pub head: HeadVars,
}

/// A client's prompts as seen by the forward pass.
#[derive(Debug, Clone, Copy)]
pub struct ClientPrompts<'p> {
    pub local: &'p ModalityPair<PromptSet>,
    pub shared: &'p ModalityPair<PromptSet>,
    /// Towers whose prompts participate; inactive towers run without any
    /// prefix.
    pub active: ModalityPair<bool>,
}

/// Full client forward: both towers, joined features, answer head.
///
/// With `trainable` set, the active local prompts and the head are
/// registered as trainable leaves; the backbone and shared prompts are
/// always constants.
#[allow(clippy::too_many_arguments)]
pub fn client_forward<'a>(
    tape: &mut Tape<'a>,
    backbone: &'a Backbone,
    prompts: ClientPrompts<'a>,
    head: &AnswerHead,
    image: &EncoderInput,
    text: &EncoderInput,
    dropout: &DropoutMask,
    trainable: bool,
) -> Result<ForwardPass, ModelError> {
    let blocks = backbone.config().blocks;
    let mut features = [None, None];
    let mut local = ModalityPair::default();
    for (slot, (m, input)) in [(Modality::Image, image), (Modality::Text, text)].into_iter().enumerate() {
        let tower = if *prompts.active.get(m) {
            let (l, s) = (prompts.local.get(m), prompts.shared.get(m));
            if l.modality() != m {
                return Err(ModelError::ModalityMismatch { expected: m, found: l.modality() });
            }
            TowerPrompts::register(tape, l, s, trainable)?
        } else {
            TowerPrompts::none(blocks)
        };
        *local.get_mut(m) = tower.local;
        features[slot] = Some(encode(tape, backbone, m, input, &tower)?);
    }
    let head_vars = head.on_tape(tape, trainable);
    let [Some(img), Some(txt)] = features else { unreachable!() };
    let logits = answer_forward(tape, img, txt, &head_vars, dropout)?;
    Ok(ForwardPass { logits, local, head: head_vars })
}

#[cfg(test)]
mod tests;
