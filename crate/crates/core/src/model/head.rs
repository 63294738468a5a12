use rand::Rng;

use super::ModelError;
use crate::numerics::{DropoutMask, NumericsError, Tape, Tensor, Var};
use crate::rng::normal_tensor;

/// Personalized two-layer MLP mapping joined tower features to the owning
/// client's answer vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct AnswerHead {
    /// `[2D, hidden]`
    pub w1: Tensor,
    pub b1: Tensor,
    /// `[hidden, answers]`
    pub w2: Tensor,
    pub b2: Tensor,
    pub dropout: f64,
}

/// Tape handles for the head parameters.
#[derive(Debug, Clone, Copy)]
pub struct HeadVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

impl AnswerHead {
    /// Weights `N(0, 1/fan_in)`, zero biases.
    pub fn init<R: Rng + ?Sized>(feature_width: usize, hidden: usize, answers: usize, dropout: f64, rng: &mut R) -> Self {
        let input = 2 * feature_width;
        Self {
            w1: normal_tensor(&[input, hidden], 1.0 / libm::sqrt(input as f64), rng),
            b1: Tensor::zeros(&[hidden]),
            w2: normal_tensor(&[hidden, answers], 1.0 / libm::sqrt(hidden as f64), rng),
            b2: Tensor::zeros(&[answers]),
            dropout,
        }
    }

    pub fn zeros(feature_width: usize, hidden: usize, answers: usize, dropout: f64) -> Self {
        Self {
            w1: Tensor::zeros(&[2 * feature_width, hidden]),
            b1: Tensor::zeros(&[hidden]),
            w2: Tensor::zeros(&[hidden, answers]),
            b2: Tensor::zeros(&[answers]),
            dropout,
        }
    }

    pub fn answers(&self) -> usize {
        self.w2.shape()[1]
    }

    pub fn hidden(&self) -> usize {
        self.w1.shape()[1]
    }

    pub fn input_width(&self) -> usize {
        self.w1.shape()[0]
    }

    pub fn param_count(&self) -> u64 {
        (self.w1.len() + self.b1.len() + self.w2.len() + self.b2.len()) as u64
    }

    pub fn tensors(&self) -> [&Tensor; 4] {
        [&self.w1, &self.b1, &self.w2, &self.b2]
    }

    pub(crate) fn tensors_mut(&mut self) -> [&mut Tensor; 4] {
        [&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2]
    }

    pub fn on_tape(&self, tape: &mut Tape<'_>, trainable: bool) -> HeadVars {
        let mut reg = |t: &Tensor| if trainable { tape.param(t.clone()) } else { tape.leaf(t.clone()) };
        HeadVars { w1: reg(&self.w1), b1: reg(&self.b1), w2: reg(&self.w2), b2: reg(&self.b2) }
    }
}

/// `concat(image, text) → affine → GELU → dropout → affine`, returning raw
/// logits `[batch, answers]`. `dropout` must cover `[batch, hidden]`; pass
/// [`DropoutMask::identity`] outside training.
pub fn answer_forward(
    tape: &mut Tape<'_>,
    image_feat: Var,
    text_feat: Var,
    head: &HeadVars,
    dropout: &DropoutMask,
) -> Result<Var, ModelError> {
    let (si, st) = (tape.shape(image_feat).to_vec(), tape.shape(text_feat).to_vec());
    if si != st {
        return Err(NumericsError::ShapeMismatch { op: "answer_forward", left: si, right: st }.into());
    }
    let joined = tape.concat(&[image_feat, text_feat], 1)?;
    let h = tape.matmul(joined, head.w1)?;
    let h = tape.add_bias(h, head.b1)?;
    let h = tape.gelu(h);
    let h = tape.dropout(h, dropout)?;
    let out = tape.matmul(h, head.w2)?;
    Ok(tape.add_bias(out, head.b2)?)
}
