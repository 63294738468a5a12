//! Cross-entropy, prompt distance, head regularizer and their weighted sum.

use alloc::vec::Vec;

use crate::config::LossWeights;
use crate::data::Batch;
use crate::model::{client_forward, AnswerHead, Backbone, ClientPrompts, ForwardPass, HeadVars, Modality, ModelError, PromptSet};
use crate::numerics::{cosine_similarity, DropoutMask, NumericsError, Tape, Tensor, Var};

/// `−log softmax(logits)[label]`, averaged over the batch rows.
pub fn cross_entropy(tape: &mut Tape<'_>, logits: Var, labels: &[usize]) -> Result<Var, NumericsError> {
    tape.cross_entropy(logits, labels)
}

/// `1 − cs(flat(local), flat(shared))` with the shared prompt held constant.
///
/// Before the first communication the shared prompt is all-zero; the loss is
/// then defined as 0 and carries no gradient.
pub fn distance_loss<'a>(tape: &mut Tape<'a>, local: Var, shared: &'a PromptSet) -> Result<Var, NumericsError> {
    let local_len = tape.value(local).len();
    if local_len != shared.flat().len() {
        return Err(NumericsError::ShapeMismatch {
            op: "distance_loss",
            left: tape.shape(local).to_vec(),
            right: shared.values().shape().to_vec(),
        });
    }
    if shared.values().is_all_zero() {
        return Ok(tape.leaf(Tensor::scalar(0.0)));
    }
    let s = tape.constant(shared.values());
    let cs = tape.cosine_similarity(local, s)?;
    let neg = tape.scale(cs, -1.0);
    Ok(tape.offset(neg, 1.0))
}

/// Off-tape value of [`distance_loss`].
pub fn distance_value(local: &PromptSet, shared: &PromptSet) -> Result<f64, ModelError> {
    if local.shape() != shared.shape() {
        return Err(ModelError::PromptShape { left: local.shape(), right: shared.shape() });
    }
    if local.modality() != shared.modality() {
        return Err(ModelError::ModalityMismatch { expected: local.modality(), found: shared.modality() });
    }
    if shared.values().is_all_zero() {
        return Ok(0.0);
    }
    Ok(1.0 - cosine_similarity(local.flat(), shared.flat()))
}

/// Squared L2 norm of both head weight matrices; biases are excluded.
pub fn regularizer(tape: &mut Tape<'_>, head: &HeadVars) -> Result<Var, NumericsError> {
    let a = tape.l2_norm_squared(head.w1);
    let b = tape.l2_norm_squared(head.w2);
    tape.add(a, b)
}

/// Off-tape value of [`regularizer`].
pub fn regularizer_value(head: &AnswerHead) -> f64 {
    crate::numerics::l2_norm_squared(head.w1.data()) + crate::numerics::l2_norm_squared(head.w2.data())
}

/// Loss components recorded on the tape.
#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub total: Var,
    pub ce: Var,
    pub distance: Var,
    pub reg: Var,
}

/// Scalar values of the loss components.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossValues {
    pub total: f64,
    pub ce: f64,
    pub distance: f64,
    pub reg: f64,
}

impl LossVars {
    pub fn values(&self, tape: &Tape<'_>) -> LossValues {
        let v = |x: Var| tape.value(x).data()[0];
        LossValues { total: v(self.total), ce: v(self.ce), distance: v(self.distance), reg: v(self.reg) }
    }
}

/// `CE + loss_alpha · L_d + beta · R` on one batch of the client's data.
///
/// `L_d` is the mean of the per-tower distance losses over the towers whose
/// prompts are active (0 when none are).
#[allow(clippy::too_many_arguments)]
pub fn client_loss<'a>(
    tape: &mut Tape<'a>,
    backbone: &'a Backbone,
    prompts: ClientPrompts<'a>,
    head: &AnswerHead,
    batch: &Batch,
    dropout: &DropoutMask,
    weights: &LossWeights,
    trainable: bool,
) -> Result<(ForwardPass, LossVars), ModelError> {
    let fwd = client_forward(tape, backbone, prompts, head, &batch.image, &batch.text, dropout, trainable)?;
    let ce = tape.cross_entropy(fwd.logits, &batch.labels)?;
    let mut terms = Vec::new();
    for m in Modality::ALL {
        if let Some(local) = *fwd.local.get(m) {
            terms.push(distance_loss(tape, local, prompts.shared.get(m))?);
        }
    }
    let distance = match terms.split_first() {
        None => tape.leaf(Tensor::scalar(0.0)),
        Some((&first, rest)) => {
            let mut acc = first;
            for &t in rest {
                acc = tape.add(acc, t)?;
            }
            tape.scale(acc, 1.0 / terms.len() as f64)
        }
    };
    let reg = regularizer(tape, &fwd.head)?;
    let weighted_d = tape.scale(distance, weights.loss_alpha);
    let weighted_r = tape.scale(reg, weights.beta);
    let total = tape.add(ce, weighted_d)?;
    let total = tape.add(total, weighted_r)?;
    Ok((fwd, LossVars { total, ce, distance, reg }))
}
