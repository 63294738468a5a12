//! Reliability-weighted prompt exchange between clients.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::FederationError;
use crate::model::{Modality, ModalityPair, PromptKind, PromptSet, SCALAR_BYTES};
use crate::numerics::{cosine_similarity, Tensor};

/// Everything one client publishes in a communication round: a snapshot of
/// its local prompts for the active towers and its current accuracy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptMessage {
    pub from: usize,
    pub image: Option<PromptSet>,
    pub text: Option<PromptSet>,
    pub acc: f64,
}

impl PromptMessage {
    pub fn prompt(&self, m: Modality) -> Option<&PromptSet> {
        match m {
            Modality::Image => self.image.as_ref(),
            Modality::Text => self.text.as_ref(),
        }
    }

    /// Local prompts of all present towers, image first, flattened.
    pub fn flat_prompts(&self) -> Vec<f64> {
        Modality::ALL.into_iter().filter_map(|m| self.prompt(m)).flat_map(|p| p.flat().iter().copied()).collect()
    }

    /// Wire size: every prompt scalar plus the accuracy scalar.
    pub fn payload_bytes(&self) -> u64 {
        let scalars: usize = Modality::ALL.into_iter().filter_map(|m| self.prompt(m)).map(|p| p.flat().len()).sum();
        scalars as u64 * SCALAR_BYTES + SCALAR_BYTES
    }
}

/// Aggregation weights of every peer of `target`, peers in ascending id order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReliabilityVector {
    pub target: usize,
    /// Peer client ids, ascending, excluding `target`.
    pub peers: Vec<usize>,
    pub weights: Vec<f64>,
    /// Set when every raw weight vanished and the uniform fallback was used.
    pub degenerate_uniform: bool,
}

impl ReliabilityVector {
    pub fn weight_of(&self, peer: usize) -> Option<f64> {
        self.peers.iter().position(|&p| p == peer).map(|i| self.weights[i])
    }
}

/// Weights `acc_i · max(0, cs(p_i, p_t)) / Σ_j acc_j · max(0, cs(p_j, p_t))`
/// over peers `i ≠ t`, with cosine similarity taken on the concatenation of
/// both towers' local prompts. Falls back to uniform weights when the
/// denominator is zero.
pub fn reliability(target: usize, messages: &[PromptMessage]) -> Result<ReliabilityVector, FederationError> {
    if messages.len() < 2 {
        return Err(FederationError::TooFewClients(messages.len()));
    }
    let own = messages.iter().find(|m| m.from == target).ok_or(FederationError::UnknownClient(target))?;
    let own_flat = own.flat_prompts();
    let mut peers = Vec::with_capacity(messages.len() - 1);
    let mut raw = Vec::with_capacity(messages.len() - 1);
    let mut others: Vec<&PromptMessage> = messages.iter().filter(|m| m.from != target).collect();
    others.sort_by_key(|m| m.from);
    for m in others {
        let flat = m.flat_prompts();
        if flat.len() != own_flat.len() {
            return Err(FederationError::PromptShapeMismatch { client: m.from });
        }
        if !(0.0..=1.0).contains(&m.acc) {
            return Err(FederationError::InvalidAccuracy { client: m.from, acc: m.acc });
        }
        peers.push(m.from);
        raw.push(m.acc * f64::max(0.0, cosine_similarity(&flat, &own_flat)));
    }
    let total: f64 = raw.iter().sum();
    let (weights, degenerate_uniform) = if total > 0.0 {
        (raw.iter().map(|r| r / total).collect(), false)
    } else {
        (vec![1.0 / peers.len() as f64; peers.len()], true)
    };
    Ok(ReliabilityVector { target, peers, weights, degenerate_uniform })
}

/// `p_t^s = Σ_{i≠t} η_i · p_i^p` per tower, from the peers' snapshots.
pub fn aggregate_shared(
    target: usize,
    messages: &[PromptMessage],
    eta: &ReliabilityVector,
) -> Result<ModalityPair<Option<PromptSet>>, FederationError> {
    let weight_sum: f64 = eta.weights.iter().sum();
    if eta.target != target || eta.weights.iter().any(|w| *w < 0.0) || libm::fabs(weight_sum - 1.0) > 1e-9 {
        return Err(FederationError::InvalidReliability(target));
    }
    let own = messages.iter().find(|m| m.from == target).ok_or(FederationError::UnknownClient(target))?;
    let mut out = ModalityPair { image: None, text: None };
    for m in Modality::ALL {
        let Some(template) = own.prompt(m) else { continue };
        let mut acc = Tensor::zeros(template.values().shape());
        for (&peer, &w) in eta.peers.iter().zip(&eta.weights) {
            let msg = messages.iter().find(|x| x.from == peer).ok_or(FederationError::UnknownClient(peer))?;
            let p = msg.prompt(m).ok_or(FederationError::PromptShapeMismatch { client: peer })?;
            if p.shape() != template.shape() {
                return Err(FederationError::PromptShapeMismatch { client: peer });
            }
            acc.data_mut().iter_mut().zip(p.flat()).for_each(|(a, x)| *a += w * x);
        }
        *out.get_mut(m) = Some(PromptSet::new(acc, m, PromptKind::Shared)?);
    }
    Ok(out)
}

/// One synchronous round: every client's shared prompts from the same
/// snapshot. Returns `(reliability, shared prompts)` per message, in
/// message order.
#[allow(clippy::type_complexity)]
pub fn communication_round(
    messages: &[PromptMessage],
) -> Result<Vec<(ReliabilityVector, ModalityPair<Option<PromptSet>>)>, FederationError> {
    messages
        .iter()
        .map(|m| {
            let eta = reliability(m.from, messages)?;
            let shared = aggregate_shared(m.from, messages, &eta)?;
            Ok((eta, shared))
        })
        .collect()
}
