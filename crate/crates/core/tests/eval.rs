use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use proptest::prelude::*;
use thm_core::data::{EOS, NUM_SPECIALS};
use thm_core::eval::{beam_search, corpus_bleu, greedy_decode, greedy_decode_batch, ModelScorer, StepScorer};
use thm_core::model::{Arch, Model, ModelConfig};
use thm_core::Rng;

mod common;
use common::brute_bleu;

/// Random but fixed next-token distributions over a tiny vocabulary.
struct TableScorer {
    seed: u64,
    vocab: usize,
}

impl TableScorer {
    fn dist(&self, prefix: &[usize]) -> Vec<f64> {
        let mut h = DefaultHasher::new();
        (self.seed, prefix).hash(&mut h);
        let mut rng = Rng::new(h.finish());
        let logits: Vec<f64> = (0..self.vocab).map(|_| rng.normal(0.0, 2.0)).collect();
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z = logits.iter().map(|l| (l - m).exp()).sum::<f64>().ln() + m;
        logits.iter().map(|l| l - z).collect()
    }
}

impl StepScorer for TableScorer {
    fn next_log_probs(&self, prefixes: &[Vec<usize>]) -> thm_core::Result<Vec<Vec<f64>>> {
        Ok(prefixes.iter().map(|p| self.dist(p)).collect())
    }
}

/// Every complete output: EOS-terminated within `max_len` tokens, or
/// exactly `max_len` tokens without EOS.
fn enumerate(s: &TableScorer, max_len: usize, alpha: f64) -> (Vec<usize>, f64) {
    let mut best = (Vec::new(), f64::NEG_INFINITY);
    let mut stack: Vec<(Vec<usize>, f64)> = vec![(vec![], 0.0)];
    while let Some((toks, lp)) = stack.pop() {
        let done = toks.last() == Some(&EOS) || toks.len() == max_len;
        if done {
            let score = lp / (toks.len() as f64).powf(alpha);
            if score > best.1 {
                best = (toks, score);
            }
            continue;
        }
        let mut prefix = vec![thm_core::data::BOS];
        prefix.extend(&toks);
        for (t, l) in s.dist(&prefix).into_iter().enumerate() {
            let mut next = toks.clone();
            next.push(t);
            stack.push((next, lp + l));
        }
    }
    best
}

#[test]
fn exhaustive_beam_finds_the_best_sequence() {
    for seed in 0..20 {
        let s = TableScorer { seed, vocab: 5 };
        for alpha in [0.0, 0.6, 1.0] {
            let max_len = 4;
            let hyp = beam_search(&s, 5usize.pow(max_len as u32), max_len, alpha).unwrap();
            let (toks, score) = enumerate(&s, max_len, alpha);
            assert_eq!(hyp.tokens, toks, "seed {seed} alpha {alpha}");
            let got = hyp.log_prob / (hyp.tokens.len() as f64).powf(alpha);
            assert!((got - score).abs() < 1e-12);
        }
    }
}

#[test]
fn exhaustive_beam_never_loses_to_greedy() {
    for seed in 0..20 {
        let s = TableScorer { seed, vocab: 4 };
        let g = greedy_decode(&s, 5).unwrap();
        let b = beam_search(&s, 4usize.pow(5), 5, 0.0).unwrap();
        assert!(b.log_prob >= g.log_prob - 1e-12);
    }
}

#[test]
fn beam_of_one_is_greedy() {
    for seed in 0..30 {
        let s = TableScorer { seed, vocab: 6 };
        assert_eq!(beam_search(&s, 1, 7, 0.0).unwrap(), greedy_decode(&s, 7).unwrap());
    }
}

#[test]
fn beam_rejects_zero_width() {
    assert!(beam_search(&TableScorer { seed: 0, vocab: 4 }, 0, 3, 0.0).is_err());
}

#[test]
fn batched_greedy_matches_single_sentence_decoding() {
    for arch in [Arch::Thm, Arch::Transformer] {
        let cfg = ModelConfig { d_model: 16, n_heads: 2, n_blocks: 1, d_ff: 32, vocab_size: 12, ..ModelConfig::tiny(arch) };
        let model = Model::new(cfg, 3).unwrap();
        let mut rng = Rng::new(9);
        let srcs: Vec<Vec<usize>> = (0..6)
            .map(|_| {
                let n = 1 + rng.below(6);
                (0..n).map(|_| NUM_SPECIALS + rng.below(8)).collect()
            })
            .collect();
        let batch = greedy_decode_batch(&model, &srcs, 8).unwrap();
        for (s, out) in srcs.iter().zip(&batch) {
            let single = greedy_decode(&ModelScorer::new(&model, s).unwrap(), 8).unwrap();
            assert_eq!(single.output(), out.as_slice());
        }
    }
}

fn sentence() -> impl Strategy<Value = Vec<String>> {
    prop::collection::vec(prop::sample::select(vec!["a", "b", "c", "d"]), 0..9)
        .prop_map(|v| v.into_iter().map(String::from).collect())
}

proptest! {
    #[test]
    fn bleu_matches_brute_force(pairs in prop::collection::vec((sentence(), sentence()), 1..6)) {
        let (h, r): (Vec<_>, Vec<_>) = pairs.into_iter().unzip();
        let join = |v: &[Vec<String>]| v.iter().map(|s| s.join(" ")).collect::<Vec<_>>();
        let got = corpus_bleu(&join(&h), &join(&r)).unwrap();
        prop_assert!((got - brute_bleu(&h, &r)).abs() < 1e-9);
        prop_assert!((0.0..=100.0).contains(&got));
    }

    #[test]
    fn bleu_of_identity_is_100(h in prop::collection::vec(sentence(), 1..6)) {
        prop_assume!(h.iter().any(|s| !s.is_empty()));
        let lines: Vec<String> = h.iter().map(|s| s.join(" ")).collect();
        prop_assert_eq!(corpus_bleu(&lines, &lines).unwrap(), 100.0);
    }
}
