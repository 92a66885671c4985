//! Decoding, BLEU and teacher-forced metrics.

pub mod bleu;
pub mod decode;

pub use bleu::{corpus_bleu, corpus_bleu_tokens, BleuStats};
pub use decode::{
    argmax, beam_search, greedy_decode, greedy_decode_batch, translate, Hypothesis, ModelScorer, StepScorer,
};

use crate::data::{sequential_batches, BpeModel, EncodedPair, PAD};
use crate::error::Result;
use crate::graph::Graph;
use crate::model::Model;
use crate::rng::Rng;

/// Teacher-forced loss and next-token accuracy over a set of pairs, with
/// clean sources and no dropout.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TeacherForced {
    /// Token-weighted mean of the label-smoothed cross-entropy.
    pub loss: f64,
    pub accuracy: f64,
    pub tokens: usize,
}

pub fn teacher_forced(model: &Model, pairs: &[EncodedPair], token_budget: usize) -> Result<TeacherForced> {
    let mut loss_sum = 0.0;
    let mut correct = 0;
    let mut tokens = 0;
    let mut rng = Rng::new(0);
    for batch in sequential_batches(pairs, token_budget)? {
        let mut g = Graph::new();
        let logits = model.batch_logits(&mut g, &batch, &mut rng, false)?;
        let n = batch.tgt_out.non_pad();
        let loss = g.cross_entropy(logits, &batch.tgt_out.ids, model.config.label_smoothing, PAD)?;
        loss_sum += g.value(loss).data()[0] * n as f64;
        let lv = g.value(logits);
        for (r, &t) in batch.tgt_out.ids.iter().enumerate() {
            if t != PAD && argmax(lv.row(r)) == t {
                correct += 1;
            }
        }
        tokens += n;
    }
    Ok(TeacherForced {
        loss: if tokens == 0 { 0.0 } else { loss_sum / tokens as f64 },
        accuracy: if tokens == 0 { 0.0 } else { correct as f64 / tokens as f64 },
        tokens,
    })
}

/// Greedy-decodes every source and scores the de-segmented output against
/// the de-segmented targets.
pub fn bleu_on(model: &Model, bpe: &BpeModel, pairs: &[EncodedPair], max_len: usize) -> Result<f64> {
    let srcs: Vec<Vec<usize>> = pairs.iter().map(|p| p.src.clone()).collect();
    let outs = translate(model, &srcs, 1, 0.0, max_len, 64)?;
    let hyps: Vec<String> = outs.iter().map(|o| bpe.decode(o)).collect();
    let refs: Vec<String> = pairs.iter().map(|p| bpe.decode(&p.tgt)).collect();
    corpus_bleu(&hyps, &refs)
}
