//! Token-swap corruption of encoder inputs.

use crate::data::bpe::{BOS, EOS, PAD};
use crate::rng::Rng;

fn eligible(id: usize) -> bool {
    !matches!(id, PAD | BOS | EOS)
}

/// With probability `p`, picks two distinct eligible positions uniformly and
/// returns them. A Bernoulli draw is always made; positions are drawn only
/// if it fires and at least two eligible positions exist.
pub fn choose_swap(ids: &[usize], p: f64, rng: &mut Rng) -> Option<(usize, usize)> {
    if !rng.bernoulli(p) {
        return None;
    }
    let positions: Vec<usize> = (0..ids.len()).filter(|&i| eligible(ids[i])).collect();
    if positions.len() < 2 {
        return None;
    }
    let a = rng.below(positions.len());
    let mut b = rng.below(positions.len() - 1);
    if b >= a {
        b += 1;
    }
    Some((positions[a], positions[b]))
}

pub fn apply_swap(ids: &[usize], swap: Option<(usize, usize)>) -> Vec<usize> {
    let mut out = ids.to_vec();
    if let Some((i, j)) = swap {
        out.swap(i, j);
    }
    out
}

/// Exchanges two randomly chosen non-special tokens with probability `p`;
/// at most one swap per call.
pub fn token_swap_corrupt(ids: &[usize], p: f64, rng: &mut Rng) -> Vec<usize> {
    apply_swap(ids, choose_swap(ids, p, rng))
}
