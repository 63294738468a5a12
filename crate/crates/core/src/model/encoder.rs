//! Prefix-tuned residual attention blocks and the tower encoder.

use alloc::vec::Vec;

use super::{Backbone, BlockVars, Modality, ModelError, PromptSet};
use crate::numerics::{AttentionLayout, Tape, Var};

/// A batch of token sequences for one tower.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderInput {
    /// `batch × seq` ids, row by row.
    pub ids: Vec<u32>,
    pub batch: usize,
    pub seq: usize,
    /// `false` marks padding.
    pub mask: Vec<bool>,
}

impl EncoderInput {
    pub fn unpadded(ids: Vec<u32>, seq: usize) -> Self {
        let batch = if seq == 0 { 0 } else { ids.len() / seq };
        let mask = alloc::vec![true; ids.len()];
        Self { ids, batch, seq, mask }
    }
}

/// Key/value prefix rows (`[L/2, D]` each) feeding one block's attention.
#[derive(Debug, Clone, Copy, Default)]
pub struct BlockPrefix {
    pub local: Option<(Var, Var)>,
    pub shared: Option<(Var, Var)>,
}

impl BlockPrefix {
    pub const EMPTY: BlockPrefix = BlockPrefix { local: None, shared: None };
}

/// Tape handles for a tower's prompts, one [`BlockPrefix`] per block.
#[derive(Debug, Clone)]
pub struct TowerPrompts {
    /// Whole local prompt leaf, for reading its gradient.
    pub local: Option<Var>,
    pub blocks: Vec<BlockPrefix>,
}

impl TowerPrompts {
    pub fn none(blocks: usize) -> Self {
        Self { local: None, blocks: alloc::vec![BlockPrefix::EMPTY; blocks] }
    }

    /// Registers the local prompt (trainable iff `trainable`) and the shared
    /// prompt (always a constant) and slices them per block.
    pub fn register<'a>(
        tape: &mut Tape<'a>,
        local: &PromptSet,
        shared: &'a PromptSet,
        trainable: bool,
    ) -> Result<Self, ModelError> {
        if local.shape() != shared.shape() {
            return Err(ModelError::PromptShape { left: local.shape(), right: shared.shape() });
        }
        if local.modality() != shared.modality() {
            return Err(ModelError::ModalityMismatch { expected: local.modality(), found: shared.modality() });
        }
        let local_var = if trainable { tape.param(local.values().clone()) } else { tape.leaf(local.values().clone()) };
        let shared_var = tape.constant(shared.values());
        let mut blocks = Vec::with_capacity(local.blocks());
        for b in 0..local.blocks() {
            blocks.push(BlockPrefix {
                local: split_on_tape(tape, local_var, b, local.len(), local.width())?,
                shared: split_on_tape(tape, shared_var, b, local.len(), local.width())?,
            });
        }
        Ok(Self { local: Some(local_var), blocks })
    }
}

fn split_on_tape(tape: &mut Tape<'_>, prompt: Var, block: usize, len: usize, d: usize) -> Result<Option<(Var, Var)>, ModelError> {
    if len == 0 {
        return Ok(None);
    }
    let half = len / 2;
    let slice = tape.slice(prompt, 0, block, 1)?;
    let slice = tape.reshape(slice, &[len, d])?;
    let key = tape.slice(slice, 0, 0, half)?;
    let value = tape.slice(slice, 0, half, half)?;
    Ok(Some((key, value)))
}

/// Multi-head attention whose keys and values are extended by the block's
/// prompt prefix (local rows first, then shared rows). Prefix rows go
/// through the same key/value projections as the tokens but carry no
/// positional encoding and are never masked.
///
/// Returns the per-head outputs concatenated along the feature axis,
/// before the output projection.
pub fn prefix_attention_heads(
    tape: &mut Tape<'_>,
    h: Var,
    prefix: &BlockPrefix,
    layout: AttentionLayout,
    w: &BlockVars,
) -> Result<Var, ModelError> {
    let q = tape.matmul(h, w.w_q)?;
    let k = tape.matmul(h, w.w_k)?;
    let v = tape.matmul(h, w.w_v)?;
    let mut key_rows = Vec::new();
    let mut value_rows = Vec::new();
    for (pk, pv) in [prefix.local, prefix.shared].into_iter().flatten() {
        key_rows.push(pk);
        value_rows.push(pv);
    }
    let prefix_kv = if key_rows.is_empty() {
        None
    } else {
        let pk = tape.concat(&key_rows, 0)?;
        let pv = tape.concat(&value_rows, 0)?;
        Some((tape.matmul(pk, w.w_k)?, tape.matmul(pv, w.w_v)?))
    };
    Ok(tape.attention(q, k, v, prefix_kv, layout)?)
}

/// [`prefix_attention_heads`] followed by the output projection.
pub fn prefix_mha(
    tape: &mut Tape<'_>,
    h: Var,
    prefix: &BlockPrefix,
    layout: AttentionLayout,
    w: &BlockVars,
) -> Result<Var, ModelError> {
    let heads = prefix_attention_heads(tape, h, prefix, layout, w)?;
    Ok(tape.matmul(heads, w.w_o)?)
}

/// Pre-norm residual block: `x + MHA(LN(x))`, then `y + FFN(LN(y))` with
/// a GELU feed-forward.
pub fn pra_block(
    tape: &mut Tape<'_>,
    x: Var,
    prefix: &BlockPrefix,
    layout: AttentionLayout,
    w: &BlockVars,
    eps: f64,
) -> Result<Var, ModelError> {
    let h = tape.layer_norm(x, w.ln1_gamma, w.ln1_beta, eps)?;
    let attn = prefix_mha(tape, h, prefix, layout, w)?;
    let y = tape.add(x, attn)?;
    let h = tape.layer_norm(y, w.ln2_gamma, w.ln2_beta, eps)?;
    let f = tape.matmul(h, w.ffn_w1)?;
    let f = tape.add_bias(f, w.ffn_b1)?;
    let f = tape.gelu(f);
    let f = tape.matmul(f, w.ffn_w2)?;
    let f = tape.add_bias(f, w.ffn_b2)?;
    Ok(tape.add(y, f)?)
}

/// Runs one tower: embedding, every block (block `i` consumes prompt slice
/// `i`), a final layer norm, then mean pooling over non-pad positions.
/// Returns `[batch, D]` features.
pub fn encode<'a>(
    tape: &mut Tape<'a>,
    backbone: &'a Backbone,
    tower: Modality,
    input: &EncoderInput,
    prompts: &TowerPrompts,
) -> Result<Var, ModelError> {
    let cfg = backbone.config();
    if prompts.blocks.len() != cfg.blocks {
        return Err(ModelError::BlockOutOfRange { block: prompts.blocks.len(), blocks: cfg.blocks });
    }
    if input.mask.len() != input.ids.len() || input.batch * input.seq != input.ids.len() {
        return Err(ModelError::Input { reason: "mask, ids and batch layout disagree" });
    }
    let embedded = backbone.embed(&input.ids, input.seq, tower)?;
    let mut x = tape.leaf(embedded);
    let weights = backbone.tower(tower);
    let layout = AttentionLayout { batch: input.batch, seq: input.seq, heads: cfg.heads, key_mask: input.mask.clone() };
    for (block, prefix) in weights.blocks.iter().zip(&prompts.blocks) {
        let w = block.on_tape(tape);
        x = pra_block(tape, x, prefix, layout.clone(), &w, cfg.layer_norm_eps)?;
    }
    let g = tape.constant(&weights.final_gamma);
    let b = tape.constant(&weights.final_beta);
    let x = tape.layer_norm(x, g, b, cfg.layer_norm_eps)?;
    Ok(tape.masked_mean_pool(x, &input.mask, input.batch)?)
}
