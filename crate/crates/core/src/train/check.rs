//! Finite-difference verification of a whole model's gradients.

use super::run::accumulate_gradients;
use crate::data::{Batch, EncodedPair, NUM_SPECIALS};
use crate::error::Result;
use crate::gradcheck::{finite_diff_check, Coverage, GradCheckReport};
use crate::graph::Graph;
use crate::model::{Model, ModelConfig};
use crate::params::ParamStore;
use crate::rng::Rng;

/// `n` random sentence pairs of 1 to `max_len` ordinary tokens.
pub fn random_pairs(vocab: usize, n: usize, max_len: usize, rng: &mut Rng) -> Vec<EncodedPair> {
    let seq = |rng: &mut Rng| -> Vec<usize> {
        let len = 1 + rng.below(max_len);
        (0..len).map(|_| NUM_SPECIALS + rng.below(vocab - NUM_SPECIALS)).collect()
    };
    (0..n)
        .map(|_| EncodedPair {
            src: seq(rng),
            tgt: seq(rng),
        })
        .collect()
}

/// Checks the training loss of a freshly initialized model (dropout off,
/// corrupted encoder inputs on) on two random sentence pairs of length at
/// most 5 against central differences with step `h`.
pub fn model_gradcheck(mut config: ModelConfig, seed: u64, h: f64, coverage: Coverage) -> Result<GradCheckReport> {
    config.dropout_p = 0.0;
    let mut model = Model::new(config, seed)?;
    let mut rng = Rng::derive(seed, 1);
    let pairs = random_pairs(model.config.vocab_size, 2, 5, &mut rng);
    let batch = Batch::from_pairs(&pairs, &[0, 1], model.config.swap_prob, &mut rng)?;

    model.params.zero_grads();
    accumulate_gradients(&mut model, &batch, &mut Rng::new(0), 1.0)?;
    let base = model.clone();
    let loss = |store: &ParamStore| -> Result<f64> {
        let mut m = base.clone();
        m.params = store.clone();
        let mut g = Graph::new();
        let l = m.batch_loss(&mut g, &batch, &mut Rng::new(0), true)?;
        Ok(g.value(l).data()[0])
    };
    finite_diff_check(loss, &mut model.params, h, coverage)
}
