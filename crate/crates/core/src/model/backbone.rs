use alloc::vec::Vec;

use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use super::{Modality, ModalityPair, ModelConfig, ModelError};
use crate::numerics::{Tape, Tensor, Var};
use crate::rng::normal_tensor;

/// Frozen weights of one residual attention block.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockWeights {
    pub ln1_gamma: Tensor,
    pub ln1_beta: Tensor,
    /// Query/key/value projections, all heads side by side (`D×D`).
    pub w_q: Tensor,
    pub w_k: Tensor,
    pub w_v: Tensor,
    pub w_o: Tensor,
    pub ln2_gamma: Tensor,
    pub ln2_beta: Tensor,
    pub ffn_w1: Tensor,
    pub ffn_b1: Tensor,
    pub ffn_w2: Tensor,
    pub ffn_b2: Tensor,
}

impl BlockWeights {
    fn init(config: &ModelConfig, rng: &mut ChaCha8Rng) -> Self {
        let (d, f, std) = (config.width, config.ffn_hidden, config.init_std);
        Self {
            ln1_gamma: Tensor::full(&[d], 1.0),
            ln1_beta: Tensor::zeros(&[d]),
            w_q: normal_tensor(&[d, d], std, rng),
            w_k: normal_tensor(&[d, d], std, rng),
            w_v: normal_tensor(&[d, d], std, rng),
            w_o: normal_tensor(&[d, d], std, rng),
            ln2_gamma: Tensor::full(&[d], 1.0),
            ln2_beta: Tensor::zeros(&[d]),
            ffn_w1: normal_tensor(&[d, f], std, rng),
            ffn_b1: Tensor::zeros(&[f]),
            ffn_w2: normal_tensor(&[f, d], std, rng),
            ffn_b2: Tensor::zeros(&[d]),
        }
    }

    fn tensors(&self) -> [&Tensor; 12] {
        [
            &self.ln1_gamma,
            &self.ln1_beta,
            &self.w_q,
            &self.w_k,
            &self.w_v,
            &self.w_o,
            &self.ln2_gamma,
            &self.ln2_beta,
            &self.ffn_w1,
            &self.ffn_b1,
            &self.ffn_w2,
            &self.ffn_b2,
        ]
    }

    /// Registers every weight as a borrowed constant.
    pub fn on_tape<'a>(&'a self, tape: &mut Tape<'a>) -> BlockVars {
        BlockVars {
            ln1_gamma: tape.constant(&self.ln1_gamma),
            ln1_beta: tape.constant(&self.ln1_beta),
            w_q: tape.constant(&self.w_q),
            w_k: tape.constant(&self.w_k),
            w_v: tape.constant(&self.w_v),
            w_o: tape.constant(&self.w_o),
            ln2_gamma: tape.constant(&self.ln2_gamma),
            ln2_beta: tape.constant(&self.ln2_beta),
            ffn_w1: tape.constant(&self.ffn_w1),
            ffn_b1: tape.constant(&self.ffn_b1),
            ffn_w2: tape.constant(&self.ffn_w2),
            ffn_b2: tape.constant(&self.ffn_b2),
        }
    }
}

/// Tape handles for one block's weights.
#[derive(Debug, Clone, Copy)]
pub struct BlockVars {
    pub ln1_gamma: Var,
    pub ln1_beta: Var,
    pub w_q: Var,
    pub w_k: Var,
    pub w_v: Var,
    pub w_o: Var,
    pub ln2_gamma: Var,
    pub ln2_beta: Var,
    pub ffn_w1: Var,
    pub ffn_b1: Var,
    pub ffn_w2: Var,
    pub ffn_b2: Var,
}

/// One encoder tower: token embeddings, blocks and a final layer norm.
#[derive(Debug, Clone, PartialEq)]
pub struct TowerWeights {
    pub token_embedding: Tensor,
    pub blocks: Vec<BlockWeights>,
    pub final_gamma: Tensor,
    pub final_beta: Tensor,
}

/// Frozen transformer parameters shared bitwise by every client.
///
/// The image and text towers have the same architecture and separate
/// weights. Nothing in this crate ever writes to a `Backbone` after
/// construction.
#[derive(Debug, Clone, PartialEq)]
pub struct Backbone {
    config: ModelConfig,
    towers: ModalityPair<TowerWeights>,
    positional: Tensor,
}

impl Backbone {
    /// Random initialization: `N(0, init_std)` weights, zero biases, unit
    /// layer-norm gains.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = crate::rng::stream(seed, crate::rng::BACKBONE_STREAM);
        let tower = |vocab: usize, rng: &mut ChaCha8Rng| TowerWeights {
            token_embedding: normal_tensor(&[vocab, config.width], config.embed_std, rng),
            blocks: (0..config.blocks).map(|_| BlockWeights::init(config, rng)).collect(),
            final_gamma: Tensor::full(&[config.width], 1.0),
            final_beta: Tensor::zeros(&[config.width]),
        };
        let image = tower(config.image_vocab, &mut rng);
        let text = tower(config.text_vocab, &mut rng);
        Ok(Self {
            config: config.clone(),
            towers: ModalityPair { image, text },
            positional: sinusoidal_table(config.max_seq_len(), config.width),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn tower(&self, m: Modality) -> &TowerWeights {
        self.towers.get(m)
    }

    pub fn positional(&self) -> &Tensor {
        &self.positional
    }

    fn all_tensors(&self) -> impl Iterator<Item = &Tensor> {
        Modality::ALL.into_iter().flat_map(move |m| {
            let t = self.towers.get(m);
            core::iter::once(&t.token_embedding)
                .chain(t.blocks.iter().flat_map(|b| b.tensors()))
                .chain([&t.final_gamma, &t.final_beta])
        })
    }

    pub fn param_count(&self) -> u64 {
        self.all_tensors().map(|t| t.len() as u64).sum()
    }

    /// SHA-256 over the shapes and bit patterns of every weight, in a fixed
    /// order.
    pub fn content_hash(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        for t in self.all_tensors().chain(core::iter::once(&self.positional)) {
            h.update((t.shape().len() as u64).to_le_bytes());
            for &s in t.shape() {
                h.update((s as u64).to_le_bytes());
            }
            for &x in t.data() {
                h.update(x.to_bits().to_le_bytes());
            }
        }
        h.finalize().into()
    }

    /// Token embedding plus positional encoding for `batch` sequences of
    /// `seq` ids laid out row by row.
    pub fn embed(&self, ids: &[u32], seq: usize, tower: Modality) -> Result<Tensor, ModelError> {
        let table = &self.towers.get(tower).token_embedding;
        let (vocab, d) = (table.shape()[0], table.shape()[1]);
        if seq == 0 || ids.len() % seq != 0 {
            return Err(ModelError::Input { reason: "token count is not a multiple of the sequence length" });
        }
        if seq > self.positional.shape()[0] {
            return Err(ModelError::SequenceTooLong { len: seq, max: self.positional.shape()[0] });
        }
        let mut out = Vec::with_capacity(ids.len() * d);
        for (i, &id) in ids.iter().enumerate() {
            let id = id as usize;
            if id >= vocab {
                return Err(ModelError::OutOfVocabulary { tower, index: i, id, vocab });
            }
            let pos = i % seq;
            let e = &table.data()[id * d..(id + 1) * d];
            let p = &self.positional.data()[pos * d..(pos + 1) * d];
            out.extend(e.iter().zip(p).map(|(a, b)| a + b));
        }
        Ok(Tensor::new(alloc::vec![ids.len(), d], out)?)
    }
}

/// Standard sinusoidal table: `sin` on even features, `cos` on odd ones.
pub fn sinusoidal_table(len: usize, d: usize) -> Tensor {
    Tensor::from_fn(&[len, d], |flat| {
        let (pos, j) = (flat / d, flat % d);
        let pair = (j / 2) as f64 * 2.0;
        let angle = pos as f64 / libm::pow(10_000.0, pair / d as f64);
        if j % 2 == 0 {
            libm::sin(angle)
        } else {
            libm::cos(angle)
        }
    })
}
