use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::config::LossWeights;
use crate::data::{Batch, Sample};
use crate::losses::client_loss;
use crate::numerics::{AttentionLayout, DropoutMask, Tape, Tensor};

// ---- plain-loop reference transformer ----------------------------------

fn mat_row(x: &[f64], w: &Tensor) -> Vec<f64> {
    let (k, n) = (w.shape()[0], w.shape()[1]);
    assert_eq!(x.len(), k);
    let mut out = vec![0.0; n];
    for j in 0..n {
        let mut s = 0.0;
        for i in 0..k {
            s += x[i] * w.data()[i * n + j];
        }
        out[j] = s;
    }
    out
}

fn ln_row(x: &[f64], g: &Tensor, b: &Tensor, eps: f64) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let sd = libm::sqrt(var + eps);
    x.iter().enumerate().map(|(i, v)| (v - mean) / sd * g.data()[i] + b.data()[i]).collect()
}

fn gelu_ref(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / core::f64::consts::SQRT_2))
}

/// One sequence through one block. `prefix` holds raw (unprojected) key
/// and value rows.
fn block_ref(x: &[Vec<f64>], mask: &[bool], w: &BlockWeights, heads: usize, eps: f64, prefix: &[(Vec<f64>, Vec<f64>)]) -> Vec<Vec<f64>> {
    let (d, s) = (x[0].len(), x.len());
    let hd = d / heads;
    let h: Vec<Vec<f64>> = x.iter().map(|r| ln_row(r, &w.ln1_gamma, &w.ln1_beta, eps)).collect();
    let q: Vec<Vec<f64>> = h.iter().map(|r| mat_row(r, &w.w_q)).collect();
    let mut keys: Vec<Vec<f64>> = prefix.iter().map(|(k, _)| mat_row(k, &w.w_k)).collect();
    let mut vals: Vec<Vec<f64>> = prefix.iter().map(|(_, v)| mat_row(v, &w.w_v)).collect();
    let mut ok = vec![true; prefix.len()];
    for (i, r) in h.iter().enumerate() {
        keys.push(mat_row(r, &w.w_k));
        vals.push(mat_row(r, &w.w_v));
        ok.push(mask[i]);
    }
    let mut out = Vec::with_capacity(s);
    for i in 0..s {
        let mut concat = vec![0.0; d];
        for hh in 0..heads {
            let cols = hh * hd..(hh + 1) * hd;
            let scores: Vec<Option<f64>> = (0..keys.len())
                .map(|j| {
                    ok[j].then(|| cols.clone().map(|c| q[i][c] * keys[j][c]).sum::<f64>() / libm::sqrt(hd as f64))
                })
                .collect();
            let m = scores.iter().flatten().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let e: Vec<f64> = scores.iter().map(|s| s.map_or(0.0, |v| libm::exp(v - m))).collect();
            let z: f64 = e.iter().sum();
            for c in cols.clone() {
                concat[c] = (0..keys.len()).map(|j| e[j] / z * vals[j][c]).sum();
            }
        }
        let attn = mat_row(&concat, &w.w_o);
        let y: Vec<f64> = x[i].iter().zip(&attn).map(|(a, b)| a + b).collect();
        let h2 = ln_row(&y, &w.ln2_gamma, &w.ln2_beta, eps);
        let mut f = mat_row(&h2, &w.ffn_w1);
        for (j, v) in f.iter_mut().enumerate() {
            *v = gelu_ref(*v + w.ffn_b1.data()[j]);
        }
        let f = mat_row(&f, &w.ffn_w2);
        out.push(y.iter().zip(&f).enumerate().map(|(j, (a, b))| a + b + w.ffn_b2.data()[j]).collect());
    }
    out
}

/// Pooled features of one tower for one sequence.
fn encode_ref(bb: &Backbone, tower: Modality, ids: &[u32], mask: &[bool], prompt: Option<&PromptSet>) -> Vec<f64> {
    let cfg = bb.config();
    let t = bb.tower(tower);
    let d = cfg.width;
    let mut x: Vec<Vec<f64>> = ids
        .iter()
        .enumerate()
        .map(|(p, &id)| (0..d).map(|j| t.token_embedding.at(&[id as usize, j]) + bb.positional().at(&[p, j])).collect())
        .collect();
    for (b, w) in t.blocks.iter().enumerate() {
        let prefix: Vec<(Vec<f64>, Vec<f64>)> = match prompt {
            None => Vec::new(),
            Some(p) => {
                let half = p.len() / 2;
                (0..half)
                    .map(|i| {
                        let row = |r: usize| (0..d).map(|j| p.values().at(&[b, r, j])).collect::<Vec<f64>>();
                        (row(i), row(half + i))
                    })
                    .collect()
            }
        };
        x = block_ref(&x, mask, w, cfg.heads, cfg.layer_norm_eps, &prefix);
    }
    let rows: Vec<Vec<f64>> = x.iter().map(|r| ln_row(r, &t.final_gamma, &t.final_beta, cfg.layer_norm_eps)).collect();
    let n = mask.iter().filter(|m| **m).count() as f64;
    (0..d).map(|j| rows.iter().zip(mask).filter(|(_, m)| **m).map(|(r, _)| r[j]).sum::<f64>() / n).collect()
}

// ---- fixtures ----------------------------------------------------------

fn small_config(prompt_len: usize) -> ModelConfig {
    ModelConfig {
        blocks: 2,
        prompt_len,
        width: 16,
        heads: 4,
        ffn_hidden: 24,
        head_hidden: 12,
        image_vocab: 20,
        text_vocab: 12,
        image_seq_len: 5,
        text_seq_len: 4,
        init_std: 0.3,
        ..ModelConfig::default()
    }
}

fn random_ids(rng: &mut ChaCha8Rng, n: usize, vocab: usize) -> Vec<u32> {
    (0..n).map(|_| rng.gen_range(0..vocab as u32)).collect()
}

fn encode_on_tape(bb: &Backbone, tower: Modality, input: &EncoderInput, prompt: Option<(&PromptSet, &PromptSet)>) -> Tensor {
    let mut tape = Tape::new();
    let prompts = match prompt {
        None => TowerPrompts::none(bb.config().blocks),
        Some((l, s)) => TowerPrompts::register(&mut tape, l, s, false).unwrap(),
    };
    let out = encode(&mut tape, bb, tower, input, &prompts).unwrap();
    tape.value(out).clone()
}

// ---- tests -------------------------------------------------------------

#[test]
fn vanilla_encoder_matches_reference() {
    let cfg = small_config(0);
    let bb = Backbone::init(&cfg, 5).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for trial in 0..20 {
        let (tower, seq, vocab) = if trial % 2 == 0 {
            (Modality::Image, cfg.image_seq_len, cfg.image_vocab)
        } else {
            (Modality::Text, cfg.text_seq_len, cfg.text_vocab)
        };
        let batch = 3;
        let ids = random_ids(&mut rng, batch * seq, vocab);
        let input = EncoderInput::unpadded(ids.clone(), seq);
        let got = encode_on_tape(&bb, tower, &input, None);
        for b in 0..batch {
            let want = encode_ref(&bb, tower, &ids[b * seq..(b + 1) * seq], &vec![true; seq], None);
            for j in 0..cfg.width {
                assert!((got.at(&[b, j]) - want[j]).abs() < 1e-12, "trial {trial} row {b} col {j}");
            }
        }
    }
}

#[test]
fn prompted_encoder_matches_reference_with_padding() {
    let cfg = small_config(4);
    let bb = Backbone::init(&cfg, 8).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let local = PromptSet::random(2, 4, 16, 0.5, Modality::Text, PromptKind::Local, &mut rng);
    let shared = PromptSet::random(2, 4, 16, 0.5, Modality::Text, PromptKind::Shared, &mut rng);
    let seq = cfg.text_seq_len;
    let ids = random_ids(&mut rng, 2 * seq, cfg.text_vocab);
    let mask = vec![true, true, false, false, true, true, true, false];
    let input = EncoderInput { ids: ids.clone(), batch: 2, seq, mask: mask.clone() };
    let got = encode_on_tape(&bb, Modality::Text, &input, Some((&local, &shared)));

    // Local rows come before shared rows within each key/value half.
    let mut merged = Tensor::zeros(&[2, 8, 16]);
    for b in 0..2 {
        for half in 0..2 {
            for i in 0..2 {
                for j in 0..16 {
                    let src = half * 2 + i;
                    merged.data_mut()[(b * 8 + half * 4 + i) * 16 + j] = local.values().at(&[b, src, j]);
                    merged.data_mut()[(b * 8 + half * 4 + 2 + i) * 16 + j] = shared.values().at(&[b, src, j]);
                }
            }
        }
    }
    let merged = PromptSet::new(merged, Modality::Text, PromptKind::Local).unwrap();
    for b in 0..2 {
        let want = encode_ref(&bb, Modality::Text, &ids[b * seq..(b + 1) * seq], &mask[b * seq..(b + 1) * seq], Some(&merged));
        for j in 0..16 {
            assert!((got.at(&[b, j]) - want[j]).abs() < 1e-12);
        }
    }
}

#[test]
fn padded_positions_do_not_affect_features() {
    let cfg = small_config(4);
    let bb = Backbone::init(&cfg, 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let local = PromptSet::random(2, 4, 16, 0.5, Modality::Image, PromptKind::Local, &mut rng);
    let shared = PromptSet::zeros(2, 4, 16, Modality::Image, PromptKind::Shared);
    let mut ids = random_ids(&mut rng, 5, cfg.image_vocab);
    let mask = vec![true, true, true, false, false];
    let a = encode_on_tape(&bb, Modality::Image, &EncoderInput { ids: ids.clone(), batch: 1, seq: 5, mask: mask.clone() }, Some((&local, &shared)));
    ids[3] = (ids[3] + 1) % cfg.image_vocab as u32;
    ids[4] = (ids[4] + 7) % cfg.image_vocab as u32;
    let b = encode_on_tape(&bb, Modality::Image, &EncoderInput { ids, batch: 1, seq: 5, mask }, Some((&local, &shared)));
    assert_eq!(a, b);
}

#[test]
fn zero_value_prefix_scales_vanilla_heads() {
    let cfg = small_config(4);
    let bb = Backbone::init(&cfg, 11).unwrap();
    let w = &bb.tower(Modality::Image).blocks[0];
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let (seq, d, heads) = (cfg.image_seq_len, cfg.width, cfg.heads);
    let hd = d / heads;
    for _ in 0..20 {
        let batch = 2;
        let h = Tensor::from_fn(&[batch * seq, d], |_| rng.gen_range(-1.0..1.0));
        let pk = Tensor::from_fn(&[2, d], |_| rng.gen_range(-2.0..2.0));
        let pv = Tensor::zeros(&[2, d]);
        let run = |prefix: bool| {
            let mut tape = Tape::new();
            let x = tape.leaf(h.clone());
            let vars = w.on_tape(&mut tape);
            let p = if prefix {
                let k = tape.leaf(pk.clone());
                let v = tape.leaf(pv.clone());
                BlockPrefix { local: Some((k, v)), shared: None }
            } else {
                BlockPrefix::EMPTY
            };
            let out = prefix_attention_heads(&mut tape, x, &p, AttentionLayout::unmasked(batch, seq, heads), &vars).unwrap();
            tape.value(out).clone()
        };
        let (vanilla, prefixed) = (run(false), run(true));
        for row in 0..batch * seq {
            for hh in 0..heads {
                let a: Vec<f64> = (hh * hd..(hh + 1) * hd).map(|c| vanilla.at(&[row, c])).collect();
                let b: Vec<f64> = (hh * hd..(hh + 1) * hd).map(|c| prefixed.at(&[row, c])).collect();
                let cs = crate::numerics::cosine_similarity(&a, &b);
                assert!(cs > 1.0 - 1e-10, "cos {cs}");
                let scale = crate::numerics::l2_norm_squared(&b).sqrt() / crate::numerics::l2_norm_squared(&a).sqrt();
                assert!(scale > 0.0 && scale <= 1.0 + 1e-12, "scale {scale}");
            }
        }
    }
}

#[test]
fn split_prompt_halves() {
    let p = PromptSet::new(Tensor::from_fn(&[2, 4, 3], |i| i as f64), Modality::Image, PromptKind::Local).unwrap();
    let (k, v) = split_prompt(&p, 1).unwrap();
    assert_eq!(k.shape(), &[2, 3]);
    assert_eq!(k.data(), &[12.0, 13.0, 14.0, 15.0, 16.0, 17.0]);
    assert_eq!(v.data(), &[18.0, 19.0, 20.0, 21.0, 22.0, 23.0]);
    assert!(matches!(split_prompt(&p, 2), Err(ModelError::BlockOutOfRange { .. })));
    assert!(matches!(
        PromptSet::new(Tensor::zeros(&[1, 3, 2]), Modality::Image, PromptKind::Local),
        Err(ModelError::OddPromptLength(3))
    ));
}

#[test]
fn embed_is_table_row_plus_position() {
    let cfg = small_config(2);
    let bb = Backbone::init(&cfg, 0).unwrap();
    let e = bb.embed(&[0, 3], 2, Modality::Text).unwrap();
    let t = &bb.tower(Modality::Text).token_embedding;
    for j in 0..cfg.width {
        assert_eq!(e.at(&[0, j]), t.at(&[0, j]) + bb.positional().at(&[0, j]));
        assert_eq!(e.at(&[1, j]), t.at(&[3, j]) + bb.positional().at(&[1, j]));
    }
    assert!(matches!(bb.embed(&[12], 1, Modality::Text), Err(ModelError::OutOfVocabulary { id: 12, .. })));
    assert!(matches!(bb.embed(&[0; 6], 6, Modality::Text), Err(ModelError::SequenceTooLong { .. })));
}

#[test]
fn backbone_is_deterministic_and_hash_tracks_content() {
    let cfg = small_config(2);
    let a = Backbone::init(&cfg, 42).unwrap();
    let b = Backbone::init(&cfg, 42).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.content_hash(), b.content_hash());
    assert_ne!(a.content_hash(), Backbone::init(&cfg, 43).unwrap().content_hash());
}

#[test]
fn prompt_parameter_count_at_clip_scale() {
    let acc = ParamAccounting::clip_profile(2);
    assert_eq!(acc.prompt_params_per_client, 49_152);
    let pct = acc.payload_ratio * 100.0;
    assert!((0.01..=0.1).contains(&pct), "{pct}");
}

#[test]
fn toy_round_bytes_formula() {
    let cfg = ModelConfig::default();
    let bb = Backbone::init(&cfg, 0).unwrap();
    let acc = count_params(&bb, &[]);
    let (r, l, d) = (cfg.blocks as u64, cfg.prompt_len as u64, cfg.width as u64);
    assert_eq!(acc.round_bytes(4), 4 * (2 * r * l * d * 8 + 8));
}

fn tiny_loss_fixture() -> (Backbone, ModalityPair<PromptSet>, ModalityPair<PromptSet>, AnswerHead, Batch) {
    let cfg = ModelConfig {
        blocks: 2,
        prompt_len: 4,
        width: 8,
        heads: 2,
        ffn_hidden: 12,
        head_hidden: 6,
        head_dropout: 0.2,
        image_vocab: 10,
        text_vocab: 8,
        image_seq_len: 3,
        text_seq_len: 3,
        init_std: 0.4,
        ..ModelConfig::default()
    };
    let bb = Backbone::init(&cfg, 9).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let local = ModalityPair::from_fn(|m| PromptSet::random(2, 4, 8, 0.5, m, PromptKind::Local, &mut rng));
    let shared = ModalityPair::from_fn(|m| PromptSet::random(2, 4, 8, 0.5, m, PromptKind::Shared, &mut rng));
    let head = AnswerHead::init(8, 6, 3, 0.2, &mut rng);
    let samples = [
        Sample { image_tokens: vec![1, 4, 9], question_tokens: vec![1, 2], answer: 2 },
        Sample { image_tokens: vec![3, 0, 5], question_tokens: vec![1, 7, 3], answer: 0 },
    ];
    (bb, local, shared, head, Batch::new(samples.iter(), 3))
}

#[test]
fn full_client_loss_gradient_check() {
    let (bb, local, shared, head, batch) = tiny_loss_fixture();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mask = DropoutMask::sample(2 * 6, 0.2, &mut rng);
    let weights = LossWeights::default();
    let base = [
        local.image.values().clone(),
        local.text.values().clone(),
        head.w1.clone(),
        head.b1.clone(),
        head.w2.clone(),
        head.b2.clone(),
    ];
    let analytic = {
        let mut tape = Tape::new();
        let prompts = ClientPrompts { local: &local, shared: &shared, active: ModalityPair { image: true, text: true } };
        let (fwd, loss) = client_loss(&mut tape, &bb, prompts, &head, &batch, &mask, &weights, true).unwrap();
        let g = tape.backward(loss.total).unwrap();
        let mut out = vec![g.wrt(fwd.local.image.unwrap()).unwrap().to_vec(), g.wrt(fwd.local.text.unwrap()).unwrap().to_vec()];
        for v in [fwd.head.w1, fwd.head.b1, fwd.head.w2, fwd.head.b2] {
            out.push(g.wrt(v).unwrap().to_vec());
        }
        out
    };
    let eval = |p: &[Tensor]| {
        let mut l = local.clone();
        let mut h = head.clone();
        *l.image.values_mut() = p[0].clone();
        *l.text.values_mut() = p[1].clone();
        for (t, v) in h.tensors_mut().into_iter().zip(&p[2..]) {
            *t = v.clone();
        }
        let prompts = ClientPrompts { local: &l, shared: &shared, active: ModalityPair { image: true, text: true } };
        let mut tape = Tape::new();
        let (_, loss) = client_loss(&mut tape, &bb, prompts, &h, &batch, &mask, &weights, false).unwrap();
        tape.value(loss.total).data()[0]
    };
    let mut worst = 0.0f64;
    for (pi, g) in analytic.iter().enumerate() {
        for i in 0..g.len() {
            let mut plus = base.to_vec();
            plus[pi].data_mut()[i] += 1e-5;
            let mut minus = base.to_vec();
            minus[pi].data_mut()[i] -= 1e-5;
            let fd = (eval(&plus) - eval(&minus)) / 2e-5;
            let rel = (fd - g[i]).abs() / fd.abs().max(g[i].abs()).max(crate::numerics::REL_ERR_FLOOR);
            worst = worst.max(rel);
        }
    }
    assert!(worst < 1e-4, "max rel err {worst}");
}

#[test]
fn inactive_tower_gets_no_prompt_gradient() {
    let (bb, local, shared, head, batch) = tiny_loss_fixture();
    let mask = DropoutMask::identity(2 * 6);
    let prompts = ClientPrompts { local: &local, shared: &shared, active: ModalityPair { image: true, text: false } };
    let mut tape = Tape::new();
    let (fwd, loss) = client_loss(&mut tape, &bb, prompts, &head, &batch, &mask, &LossWeights::default(), true).unwrap();
    assert!(fwd.local.text.is_none());
    let g = tape.backward(loss.total).unwrap();
    assert!(g.wrt(fwd.local.image.unwrap()).is_some());
}
