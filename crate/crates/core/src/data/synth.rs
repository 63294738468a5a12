//! Synthetic multimodal clients sharing one latent answering rule.
//!
//! An "image" is a tuple of `slots` attribute values, rendered one token
//! per slot through a client-specific token map. A question names one slot;
//! its answer is the value in that slot. Clients differ in which slots they
//! ask about and which values they see (label skew) and in how symbols map
//! to tokens (feature drift). A client with overlap `f` renders the first
//! `round(f · slots · values)` symbols of a global order with shared token
//! ids and the rest with ids private to that client.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{ClientDataset, DataError, Sample, PAD_TOKEN};
use crate::config::ConfigError;
use crate::rng;

/// First token of every question.
pub const QUESTION_TOKEN: u32 = 1;
/// Slot words occupy `SLOT_WORD_BASE..SLOT_WORD_BASE + slots`.
const SLOT_WORD_BASE: u32 = 2;
const FILLERS_PER_CLIENT: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClientProfile {
    pub samples: usize,
    /// Fraction of symbols rendered with shared token ids, in `[0, 1]`.
    pub overlap: f64,
    /// Relative frequency with which each slot is asked about.
    pub slot_weights: Vec<f64>,
    /// Relative frequency of each attribute value in images.
    pub value_weights: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub seed: u64,
    /// Attribute slots per image; also the image sequence length.
    pub slots: usize,
    pub values_per_slot: usize,
    pub image_vocab: usize,
    pub text_vocab: usize,
    /// Maximum question length including padding.
    pub question_len: usize,
    /// Train/val/test ratios.
    pub split: [f64; 3],
    pub clients: Vec<ClientProfile>,
}

impl Default for SynthSpec {
    fn default() -> Self {
        let profile = |samples, slot_weights: [f64; 6], value_weights: [f64; 4]| ClientProfile {
            samples,
            overlap: 0.5,
            slot_weights: slot_weights.to_vec(),
            value_weights: value_weights.to_vec(),
        };
        Self {
            seed: 0,
            slots: 6,
            values_per_slot: 4,
            image_vocab: 64,
            text_vocab: 32,
            question_len: 3,
            split: [0.7, 0.15, 0.15],
            clients: vec![
                profile(734, [0.35, 0.25, 0.15, 0.1, 0.1, 0.05], [0.4, 0.3, 0.2, 0.1]),
                profile(829, [0.05, 0.1, 0.35, 0.25, 0.15, 0.1], [0.1, 0.2, 0.3, 0.4]),
                profile(461, [0.1, 0.05, 0.1, 0.15, 0.25, 0.35], [0.25, 0.25, 0.25, 0.25]),
                profile(335, [0.25, 0.1, 0.05, 0.35, 0.1, 0.15], [0.4, 0.1, 0.4, 0.1]),
            ],
        }
    }
}

impl SynthSpec {
    pub fn symbols(&self) -> usize {
        self.slots * self.values_per_slot
    }

    fn shared_count(&self, overlap: f64) -> usize {
        libm::round(overlap * self.symbols() as f64) as usize
    }

    /// Image ids needed to give every client its private tokens.
    pub fn required_image_vocab(&self) -> usize {
        let max_shared = self.clients.iter().map(|c| self.shared_count(c.overlap)).max().unwrap_or(0);
        max_shared + self.clients.iter().map(|c| self.symbols() - self.shared_count(c.overlap)).sum::<usize>()
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.clients.is_empty() {
            return Err(ConfigError::new("data.synth.clients", "at least one client profile is required"));
        }
        if self.slots == 0 || self.values_per_slot == 0 {
            return Err(ConfigError::new("data.synth.slots", "slots and values_per_slot must be >= 1"));
        }
        if self.question_len < 2 {
            return Err(ConfigError::new("data.synth.question_len", "must be >= 2"));
        }
        let needed_text = SLOT_WORD_BASE as usize + self.slots + 1;
        if self.text_vocab < needed_text {
            return Err(ConfigError::new("data.synth.text_vocab", format!("needs at least {needed_text} ids")));
        }
        let s = self.split;
        if s.iter().any(|r| !(0.0..=1.0).contains(r)) || libm::fabs(s.iter().sum::<f64>() - 1.0) > 1e-9 {
            return Err(ConfigError::new("data.synth.split", "ratios must lie in [0,1] and sum to 1"));
        }
        for (i, c) in self.clients.iter().enumerate() {
            if !(0.0..=1.0).contains(&c.overlap) {
                return Err(ConfigError::new(format!("data.synth.clients[{i}].overlap"), "must lie in [0, 1]"));
            }
            if c.samples == 0 {
                return Err(ConfigError::new(format!("data.synth.clients[{i}].samples"), "must be >= 1"));
            }
            for (key, w, n) in [("slot_weights", &c.slot_weights, self.slots), ("value_weights", &c.value_weights, self.values_per_slot)] {
                if w.len() != n || w.iter().any(|x| !x.is_finite() || *x < 0.0) || w.iter().sum::<f64>() <= 0.0 {
                    return Err(ConfigError::new(
                        format!("data.synth.clients[{i}].{key}"),
                        format!("needs {n} nonnegative weights with a positive sum"),
                    ));
                }
            }
        }
        let needed = self.required_image_vocab();
        if needed > self.image_vocab {
            return Err(ConfigError::new(
                "data.synth.image_vocab",
                format!("token remaps need {needed} image ids, vocabulary has {}", self.image_vocab),
            ));
        }
        Ok(())
    }
}

/// A client's rendering of the shared rule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientMap {
    pub slots: usize,
    pub values_per_slot: usize,
    /// Image token for symbol `slot * values_per_slot + value`.
    pub symbol_token: Vec<u32>,
    /// Global symbol answered by each local label.
    pub answer_symbols: Vec<usize>,
}

impl ClientMap {
    pub fn symbol_of_token(&self, token: u32) -> Option<usize> {
        self.symbol_token.iter().position(|&t| t == token)
    }

    pub fn label_of_symbol(&self, symbol: usize) -> Option<usize> {
        self.answer_symbols.binary_search(&symbol).ok()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticClient {
    pub dataset: ClientDataset,
    pub map: ClientMap,
}

fn weighted_index<R: Rng + ?Sized>(weights: &[f64], rng: &mut R) -> usize {
    let total: f64 = weights.iter().sum();
    let mut u = rng.gen::<f64>() * total;
    for (i, w) in weights.iter().enumerate() {
        if u < *w {
            return i;
        }
        u -= w;
    }
    weights.iter().rposition(|w| *w > 0.0).unwrap_or(0)
}

/// Generates one dataset per client profile. Deterministic in `spec`.
pub fn gen_synthetic(spec: &SynthSpec) -> Result<Vec<SyntheticClient>, DataError> {
    spec.validate()?;
    let n_sym = spec.symbols();
    let mut global = rng::stream(spec.seed, u64::MAX - 1);
    let mut order: Vec<usize> = (0..n_sym).collect();
    order.shuffle(&mut global);
    let max_shared = spec.clients.iter().map(|c| spec.shared_count(c.overlap)).max().unwrap_or(0);
    let mut next_private = max_shared as u32;
    let filler_pool = spec.text_vocab - SLOT_WORD_BASE as usize - spec.slots;

    let mut out = Vec::with_capacity(spec.clients.len());
    for (c, profile) in spec.clients.iter().enumerate() {
        let mut rng = rng::stream(spec.seed, c as u64);
        let shared = spec.shared_count(profile.overlap);
        let mut symbol_token = vec![0u32; n_sym];
        for (rank, &sym) in order.iter().enumerate().take(shared) {
            symbol_token[sym] = rank as u32;
        }
        let mut private: Vec<u32> = (next_private..next_private + (n_sym - shared) as u32).collect();
        next_private += (n_sym - shared) as u32;
        private.shuffle(&mut rng);
        for (&sym, tok) in order[shared..].iter().zip(private) {
            symbol_token[sym] = tok;
        }
        let fillers: Vec<u32> = (0..FILLERS_PER_CLIENT)
            .map(|j| SLOT_WORD_BASE + spec.slots as u32 + ((c * FILLERS_PER_CLIENT + j) % filler_pool) as u32)
            .collect();

        let mut raw = Vec::with_capacity(profile.samples);
        for _ in 0..profile.samples {
            let values: Vec<usize> = (0..spec.slots).map(|_| weighted_index(&profile.value_weights, &mut rng)).collect();
            let slot = weighted_index(&profile.slot_weights, &mut rng);
            let image_tokens = values.iter().enumerate().map(|(k, &v)| symbol_token[k * spec.values_per_slot + v]).collect();
            let mut question_tokens = vec![QUESTION_TOKEN, SLOT_WORD_BASE + slot as u32];
            if spec.question_len > 2 && rng.gen::<bool>() {
                question_tokens.push(fillers[rng.gen_range(0..fillers.len())]);
            }
            raw.push((image_tokens, question_tokens, slot * spec.values_per_slot + values[slot]));
        }
        let mut answer_symbols: Vec<usize> = raw.iter().map(|r| r.2).collect();
        answer_symbols.sort_unstable();
        answer_symbols.dedup();
        let label: BTreeMap<usize, u32> = answer_symbols.iter().enumerate().map(|(i, &s)| (s, i as u32)).collect();
        let samples = raw
            .into_iter()
            .map(|(image_tokens, question_tokens, sym)| Sample { image_tokens, question_tokens, answer: label[&sym] })
            .collect();
        let num_answers = answer_symbols.len();
        out.push(SyntheticClient {
            dataset: ClientDataset { samples, num_answers },
            map: ClientMap { slots: spec.slots, values_per_slot: spec.values_per_slot, symbol_token, answer_symbols },
        });
    }
    Ok(out)
}

/// Recomputes a sample's label from its tokens and the client map, or
/// `None` if the sample cannot be decoded under this map.
pub fn answer_oracle(sample: &Sample, map: &ClientMap) -> Option<u32> {
    let slot = sample
        .question_tokens
        .iter()
        .filter(|&&t| t != PAD_TOKEN)
        .find_map(|&t| t.checked_sub(SLOT_WORD_BASE).map(|k| k as usize).filter(|&k| k < map.slots))?;
    let token = *sample.image_tokens.get(slot)?;
    let symbol = map.symbol_of_token(token)?;
    if symbol / map.values_per_slot != slot {
        return None;
    }
    map.label_of_symbol(symbol).map(|l| l as u32)
}
