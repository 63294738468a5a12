//! Client datasets, the synthetic heterogeneous generator, and splitting.

use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::config::ConfigError;
use crate::model::EncoderInput;

mod synth;

pub use synth::{answer_oracle, gen_synthetic, ClientMap, ClientProfile, SynthSpec, SyntheticClient, QUESTION_TOKEN};

/// Text token reserved for padding.
pub const PAD_TOKEN: u32 = 0;

/// One (image tokens, question tokens, answer label) triple.
///
/// Question tokens equal to [`PAD_TOKEN`] are padding.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Sample {
    pub image_tokens: Vec<u32>,
    pub question_tokens: Vec<u32>,
    pub answer: u32,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum DataError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("sample {index}: {reason}")]
    Invalid { index: usize, reason: String },
    #[error("dataset is empty")]
    Empty,
}

/// Vocabulary and length limits a dataset must respect.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DataLimits {
    pub image_vocab: usize,
    pub text_vocab: usize,
    pub image_seq_len: usize,
    pub text_seq_len: usize,
}

/// All samples of one client plus the size of its answer vocabulary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientDataset {
    pub samples: Vec<Sample>,
    pub num_answers: usize,
}

impl ClientDataset {
    /// Infers the answer vocabulary as `max(answer) + 1`.
    pub fn from_samples(samples: Vec<Sample>) -> Result<Self, DataError> {
        let max = samples.iter().map(|s| s.answer).max().ok_or(DataError::Empty)?;
        Ok(Self { samples, num_answers: max as usize + 1 })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn validate(&self, limits: &DataLimits) -> Result<(), DataError> {
        if self.samples.is_empty() {
            return Err(DataError::Empty);
        }
        for (i, s) in self.samples.iter().enumerate() {
            validate_sample(s, limits, self.num_answers).map_err(|reason| DataError::Invalid { index: i, reason })?;
        }
        Ok(())
    }

    /// Empirical label distribution over `num_answers` labels.
    pub fn label_distribution(&self) -> Vec<f64> {
        let mut counts = alloc::vec![0.0; self.num_answers];
        for s in &self.samples {
            counts[s.answer as usize] += 1.0;
        }
        let n = self.samples.len().max(1) as f64;
        counts.iter_mut().for_each(|c| *c /= n);
        counts
    }
}

pub fn validate_sample(s: &Sample, limits: &DataLimits, num_answers: usize) -> Result<(), String> {
    use alloc::format;
    if s.image_tokens.len() != limits.image_seq_len {
        return Err(format!("expected {} image tokens, found {}", limits.image_seq_len, s.image_tokens.len()));
    }
    if let Some(&id) = s.image_tokens.iter().find(|&&id| id as usize >= limits.image_vocab) {
        return Err(format!("image token {id} outside vocabulary of size {}", limits.image_vocab));
    }
    if s.question_tokens.len() > limits.text_seq_len {
        return Err(format!("question longer than {} tokens", limits.text_seq_len));
    }
    if let Some(&id) = s.question_tokens.iter().find(|&&id| id as usize >= limits.text_vocab) {
        return Err(format!("question token {id} outside vocabulary of size {}", limits.text_vocab));
    }
    if !s.question_tokens.iter().any(|&t| t != PAD_TOKEN) {
        return Err(String::from("question has no non-pad token"));
    }
    if s.answer as usize >= num_answers {
        return Err(format!("answer {} outside answer vocabulary of size {num_answers}", s.answer));
    }
    Ok(())
}

/// Train/validation/test partition of one client's samples.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Splits {
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
    pub test: Vec<Sample>,
}

/// Seeded shuffle, then contiguous train/val/test cut. Train and val sizes
/// are rounded; test takes the remainder. An empty validation ratio yields
/// an empty validation split.
pub fn split(dataset: &ClientDataset, ratios: [f64; 3], seed: u64) -> Result<Splits, ConfigError> {
    if ratios.iter().any(|r| !(0.0..=1.0).contains(r)) || libm::fabs(ratios.iter().sum::<f64>() - 1.0) > 1e-9 {
        return Err(ConfigError::new("split", "ratios must lie in [0,1] and sum to 1"));
    }
    let n = dataset.samples.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut crate::rng::stream(seed, 0));
    let n_train = (libm::round(n as f64 * ratios[0]) as usize).min(n);
    let n_val = (libm::round(n as f64 * ratios[1]) as usize).min(n - n_train);
    let pick = |range: core::ops::Range<usize>| -> Vec<Sample> {
        order[range].iter().map(|&i| dataset.samples[i].clone()).collect()
    };
    let splits = Splits { train: pick(0..n_train), val: pick(n_train..n_train + n_val), test: pick(n_train + n_val..n) };
    if splits.train.is_empty() && ratios[0] > 0.0 {
        return Err(ConfigError::new("split", "train split is empty"));
    }
    if splits.test.is_empty() && ratios[2] > 0.0 {
        return Err(ConfigError::new("split", "test split is empty"));
    }
    if splits.val.is_empty() && ratios[1] > 0.0 {
        return Err(ConfigError::new("split", "validation split is empty"));
    }
    Ok(splits)
}

/// Model inputs for a mini-batch. Questions are padded to `text_seq_len`.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub image: EncoderInput,
    pub text: EncoderInput,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn new<'s>(samples: impl IntoIterator<Item = &'s Sample>, text_seq_len: usize) -> Self {
        let mut image_ids = Vec::new();
        let mut text_ids = Vec::new();
        let mut text_mask = Vec::new();
        let mut labels = Vec::new();
        let mut image_seq = 0;
        for s in samples {
            image_seq = s.image_tokens.len();
            image_ids.extend_from_slice(&s.image_tokens);
            for j in 0..text_seq_len {
                let t = s.question_tokens.get(j).copied().unwrap_or(PAD_TOKEN);
                text_ids.push(t);
                text_mask.push(t != PAD_TOKEN);
            }
            labels.push(s.answer as usize);
        }
        let batch = labels.len();
        Self {
            image: EncoderInput { mask: alloc::vec![true; image_ids.len()], ids: image_ids, batch, seq: image_seq },
            text: EncoderInput { ids: text_ids, batch, seq: text_seq_len, mask: text_mask },
            labels,
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

#[cfg(test)]
mod tests;
