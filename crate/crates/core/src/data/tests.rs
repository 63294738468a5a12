use alloc::collections::BTreeMap;
use alloc::vec;
use alloc::vec::Vec;

use super::*;

fn default_clients() -> Vec<SyntheticClient> {
    gen_synthetic(&SynthSpec::default()).unwrap()
}

fn global_marginal(c: &SyntheticClient, symbols: usize) -> Vec<f64> {
    let mut p = vec![0.0; symbols];
    for s in &c.dataset.samples {
        p[c.map.answer_symbols[s.answer as usize]] += 1.0;
    }
    let n = c.dataset.len() as f64;
    p.iter().map(|x| x / n).collect()
}

#[test]
fn default_sizes_and_limits() {
    let spec = SynthSpec::default();
    let clients = default_clients();
    let sizes: Vec<usize> = clients.iter().map(|c| c.dataset.len()).collect();
    assert_eq!(sizes, [734, 829, 461, 335]);
    let limits = DataLimits { image_vocab: 64, text_vocab: 32, image_seq_len: spec.slots, text_seq_len: spec.question_len };
    for c in &clients {
        c.dataset.validate(&limits).unwrap();
        assert_eq!(c.dataset.num_answers, c.map.answer_symbols.len());
    }
    assert_eq!(spec.required_image_vocab(), 60);
}

#[test]
fn generator_is_deterministic() {
    assert_eq!(default_clients(), default_clients());
    let other = gen_synthetic(&SynthSpec { seed: 1, ..SynthSpec::default() }).unwrap();
    assert_ne!(default_clients()[0].dataset, other[0].dataset);
}

#[test]
fn oracle_agrees_with_every_label() {
    for seed in 0..3 {
        for c in gen_synthetic(&SynthSpec { seed, ..SynthSpec::default() }).unwrap() {
            for s in &c.dataset.samples {
                assert_eq!(answer_oracle(s, &c.map), Some(s.answer));
            }
        }
    }
}

#[test]
fn changing_the_queried_slot_changes_the_answer() {
    let clients = default_clients();
    let c = &clients[0];
    let mut checked = 0;
    for s in c.dataset.samples.iter().take(200) {
        let slot = (s.question_tokens[1] - 2) as usize;
        let sym = c.map.symbol_of_token(s.image_tokens[slot]).unwrap();
        let other = (0..c.map.values_per_slot)
            .map(|v| slot * c.map.values_per_slot + v)
            .find(|&o| o != sym && c.map.label_of_symbol(o).is_some());
        let Some(other) = other else { continue };
        let mut t = s.clone();
        t.image_tokens[slot] = c.map.symbol_token[other];
        let new = answer_oracle(&t, &c.map).unwrap();
        assert_ne!(new, s.answer);
        assert_eq!(c.map.answer_symbols[new as usize], other);
        // Tokens outside the queried slot do not matter.
        let mut u = s.clone();
        let far = (slot + 1) % c.map.slots;
        u.image_tokens[far] = c.map.symbol_token[far * c.map.values_per_slot + (sym + 1) % c.map.values_per_slot];
        assert_eq!(answer_oracle(&u, &c.map), Some(s.answer));
        checked += 1;
    }
    assert!(checked > 100);
}

#[test]
fn label_marginals_differ_between_clients() {
    let spec = SynthSpec::default();
    let clients = default_clients();
    let m: Vec<Vec<f64>> = clients.iter().map(|c| global_marginal(c, spec.symbols())).collect();
    for i in 0..m.len() {
        for j in i + 1..m.len() {
            let tv: f64 = m[i].iter().zip(&m[j]).map(|(a, b)| (a - b).abs()).sum::<f64>() / 2.0;
            assert!(tv > 0.1, "clients {i},{j}: tv {tv}");
        }
    }
}

#[test]
fn overlap_controls_shared_tokens() {
    let spec = SynthSpec::default();
    let clients = default_clients();
    let shared = spec.symbols() / 2;
    for a in &clients {
        for b in &clients {
            let common = a.map.symbol_token.iter().zip(&b.map.symbol_token).filter(|(x, y)| x == y).count();
            if core::ptr::eq(a, b) {
                assert_eq!(common, spec.symbols());
            } else {
                assert_eq!(common, shared);
            }
        }
    }

    let mut disjoint = SynthSpec::default();
    disjoint.clients.truncate(2);
    for c in &mut disjoint.clients {
        c.overlap = 0.0;
    }
    let two = gen_synthetic(&disjoint).unwrap();
    let a: Vec<u32> = two[0].map.symbol_token.clone();
    assert!(two[1].map.symbol_token.iter().all(|t| !a.contains(t)));

    let mut infeasible = SynthSpec::default();
    for c in &mut infeasible.clients {
        c.overlap = 0.0;
    }
    let err = gen_synthetic(&infeasible).unwrap_err();
    assert!(matches!(err, DataError::Config(ref e) if e.key == "data.synth.image_vocab"), "{err}");
}

/// A lookup classifier keyed on (slot word, token in that slot), fit on the
/// other clients' pooled samples and mapped into each client's label space,
/// beats that client's majority-class baseline: shared tokens carry
/// transferable signal.
#[test]
fn pooled_lookup_beats_majority_on_every_client() {
    let clients = default_clients();
    for (t, target) in clients.iter().enumerate() {
        let mut table: BTreeMap<(u32, u32), BTreeMap<usize, usize>> = BTreeMap::new();
        for (i, c) in clients.iter().enumerate() {
            if i == t {
                continue;
            }
            for s in &c.dataset.samples {
                let slot_word = s.question_tokens[1];
                let tok = s.image_tokens[(slot_word - 2) as usize];
                *table.entry((slot_word, tok)).or_default().entry(c.map.answer_symbols[s.answer as usize]).or_default() += 1;
            }
        }
        let dist = target.dataset.label_distribution();
        let majority = dist.iter().cloned().fold(0.0, f64::max);
        let mut correct = 0usize;
        for s in &target.dataset.samples {
            let slot_word = s.question_tokens[1];
            let tok = s.image_tokens[(slot_word - 2) as usize];
            let guess = table
                .get(&(slot_word, tok))
                .and_then(|h| h.iter().max_by_key(|(_, n)| **n).map(|(sym, _)| *sym))
                .and_then(|sym| target.map.label_of_symbol(sym));
            if guess == Some(s.answer as usize) {
                correct += 1;
            }
        }
        let acc = correct as f64 / target.dataset.len() as f64;
        assert!(acc > majority + 0.1, "client {t}: lookup {acc} vs majority {majority}");
    }
}

#[test]
fn split_sizes_and_partition() {
    let samples: Vec<Sample> =
        (0..100).map(|i| Sample { image_tokens: vec![i], question_tokens: vec![1], answer: i % 3 }).collect();
    let ds = ClientDataset::from_samples(samples).unwrap();
    let s = split(&ds, [0.7, 0.15, 0.15], 9).unwrap();
    assert_eq!((s.train.len(), s.val.len(), s.test.len()), (70, 15, 15));
    assert_eq!(s, split(&ds, [0.7, 0.15, 0.15], 9).unwrap());
    let mut all: Vec<u32> = s.train.iter().chain(&s.val).chain(&s.test).map(|x| x.image_tokens[0]).collect();
    all.sort_unstable();
    assert_eq!(all, (0..100).collect::<Vec<u32>>());
    assert_ne!(s.train, split(&ds, [0.7, 0.15, 0.15], 10).unwrap().train);

    let tiny = ClientDataset::from_samples(vec![ds.samples[0].clone(), ds.samples[1].clone()]).unwrap();
    assert!(split(&tiny, [0.7, 0.15, 0.15], 0).is_err());
    assert!(split(&ds, [0.7, 0.2, 0.2], 0).is_err());
}

#[test]
fn batch_pads_questions() {
    let s = [
        Sample { image_tokens: vec![5, 6], question_tokens: vec![1, 3], answer: 1 },
        Sample { image_tokens: vec![7, 8], question_tokens: vec![1, 4, 9], answer: 0 },
    ];
    let b = Batch::new(s.iter(), 3);
    assert_eq!(b.text.ids, [1, 3, 0, 1, 4, 9]);
    assert_eq!(b.text.mask, [true, true, false, true, true, true]);
    assert_eq!(b.image.ids, [5, 6, 7, 8]);
    assert_eq!(b.labels, [1, 0]);
}

#[test]
fn invalid_samples_are_reported_by_index() {
    let limits = DataLimits { image_vocab: 10, text_vocab: 5, image_seq_len: 2, text_seq_len: 3 };
    let ds = ClientDataset {
        samples: vec![
            Sample { image_tokens: vec![1, 2], question_tokens: vec![1], answer: 0 },
            Sample { image_tokens: vec![1, 12], question_tokens: vec![1], answer: 0 },
        ],
        num_answers: 1,
    };
    assert!(matches!(ds.validate(&limits), Err(DataError::Invalid { index: 1, .. })));
    assert!(matches!(ClientDataset::from_samples(Vec::new()), Err(DataError::Empty)));
}
