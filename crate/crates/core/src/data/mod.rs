//! Corpus handling: BPE, length filtering, corruption, batching and
//! synthetic tasks.

pub mod batch;
pub mod bpe;
pub mod corpus;
pub mod corrupt;

pub use batch::{make_batches, sequential_batches, Batch, EncodedPair, IdMatrix};
pub use bpe::{desegment, BpeModel, BOS, EOS, NUM_SPECIALS, PAD, UNK};
pub use corpus::{gen_synthetic, length_filter, ParallelCorpus, Task};
pub use corrupt::token_swap_corrupt;

use crate::error::Result;

pub fn learn_bpe(corpus: &ParallelCorpus, target_vocab_size: usize) -> Result<BpeModel> {
    BpeModel::learn(corpus.all_sentences(), target_vocab_size)
}

pub fn apply_bpe(model: &BpeModel, sentence: &str) -> Vec<usize> {
    model.encode(sentence)
}

pub fn encode_corpus(model: &BpeModel, corpus: &ParallelCorpus) -> Vec<EncodedPair> {
    corpus
        .pairs
        .iter()
        .map(|(s, t)| EncodedPair {
            src: model.encode(s),
            tgt: model.encode(t),
        })
        .collect()
}
