use alloc::vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Modality, ModelError};
use crate::numerics::{NumericsError, Tensor};
use crate::rng::normal_tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PromptKind {
    /// Trained on the owning client's data.
    Local,
    /// Aggregated from peers; never updated by gradient steps.
    Shared,
}

impl PromptKind {
    pub fn as_str(self) -> &'static str {
        match self {
            PromptKind::Local => "local",
            PromptKind::Shared => "shared",
        }
    }
}

/// Prompt tensor of shape `[blocks, prompt_len, width]` for one modality.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptSet {
    values: Tensor,
    modality: Modality,
    kind: PromptKind,
}

impl PromptSet {
    pub fn new(values: Tensor, modality: Modality, kind: PromptKind) -> Result<Self, ModelError> {
        let s = values.shape();
        if s.len() != 3 {
            return Err(ModelError::Numerics(NumericsError::InvalidShape {
                op: "prompt_set",
                shape: s.to_vec(),
                reason: "expected [blocks, prompt_len, width]",
            }));
        }
        if s[1] % 2 != 0 {
            return Err(ModelError::OddPromptLength(s[1]));
        }
        Ok(Self { values, modality, kind })
    }

    pub fn zeros(blocks: usize, len: usize, width: usize, modality: Modality, kind: PromptKind) -> Self {
        Self { values: Tensor::zeros(&[blocks, len, width]), modality, kind }
    }

    /// `N(0, std)` entries.
    pub fn random<R: Rng + ?Sized>(
        blocks: usize,
        len: usize,
        width: usize,
        std: f64,
        modality: Modality,
        kind: PromptKind,
        rng: &mut R,
    ) -> Self {
        Self { values: normal_tensor(&[blocks, len, width], std, rng), modality, kind }
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }

    /// Mutable access for optimizer updates. Shared prompts are only ever
    /// replaced wholesale during communication, never through this.
    pub(crate) fn values_mut(&mut self) -> &mut Tensor {
        debug_assert_eq!(self.kind, PromptKind::Local, "shared prompts are not trainable");
        &mut self.values
    }

    pub fn modality(&self) -> Modality {
        self.modality
    }

    pub fn kind(&self) -> PromptKind {
        self.kind
    }

    pub fn blocks(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn len(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn width(&self) -> usize {
        self.values.shape()[2]
    }

    pub fn shape(&self) -> [usize; 3] {
        [self.blocks(), self.len(), self.width()]
    }

    pub fn flat(&self) -> &[f64] {
        self.values.data()
    }

    /// Same values relabelled with another kind.
    pub fn with_kind(mut self, kind: PromptKind) -> Self {
        self.kind = kind;
        self
    }
}

/// Key and value halves of one block's prompt slice: the first `L/2` rows
/// are the key prefix, the last `L/2` rows the value prefix.
pub fn split_prompt(p: &PromptSet, block: usize) -> Result<(Tensor, Tensor), ModelError> {
    if block >= p.blocks() {
        return Err(ModelError::BlockOutOfRange { block, blocks: p.blocks() });
    }
    let (len, d) = (p.len(), p.width());
    let half = len / 2;
    let slice = &p.flat()[block * len * d..(block + 1) * len * d];
    let key = Tensor::new(vec![half, d], slice[..half * d].to_vec())?;
    let value = Tensor::new(vec![half, d], slice[half * d..].to_vec())?;
    Ok((key, value))
}
