//! Padded id matrices and token-budget batching.

use crate::data::bpe::{BOS, EOS, PAD};
use crate::data::corrupt::token_swap_corrupt;
use crate::error::{Error, Result};
use crate::rng::Rng;

/// `rows x cols` token ids, row-major, right-padded with [`PAD`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdMatrix {
    pub rows: usize,
    pub cols: usize,
    pub ids: Vec<usize>,
}

impl IdMatrix {
    pub fn from_rows(seqs: &[Vec<usize>]) -> Result<Self> {
        let cols = seqs.iter().map(Vec::len).max().unwrap_or(0);
        if seqs.is_empty() || cols == 0 {
            return Err(Error::data("cannot build an id matrix from empty sequences"));
        }
        let mut ids = Vec::with_capacity(seqs.len() * cols);
        for s in seqs {
            ids.extend_from_slice(s);
            ids.extend(std::iter::repeat_n(PAD, cols - s.len()));
        }
        Ok(Self {
            rows: seqs.len(),
            cols,
            ids,
        })
    }

    pub fn row(&self, i: usize) -> &[usize] {
        &self.ids[i * self.cols..(i + 1) * self.cols]
    }

    /// Row `i` without trailing padding.
    pub fn unpadded(&self, i: usize) -> &[usize] {
        let r = self.row(i);
        let n = r.iter().rposition(|&t| t != PAD).map_or(0, |p| p + 1);
        &r[..n]
    }

    pub fn pad_flags(&self, i: usize) -> Vec<bool> {
        self.row(i).iter().map(|&t| t == PAD).collect()
    }

    pub fn non_pad(&self) -> usize {
        self.ids.iter().filter(|&&t| t != PAD).count()
    }
}

/// A source/target pair already mapped to ids (no BOS/EOS yet).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodedPair {
    pub src: Vec<usize>,
    pub tgt: Vec<usize>,
}

impl EncodedPair {
    /// Non-pad tokens this pair contributes to a batch: the source with EOS
    /// plus the decoder targets with EOS.
    pub fn tokens(&self) -> usize {
        self.src.len() + 1 + self.tgt.len() + 1
    }
}

#[derive(Debug, Clone)]
pub struct Batch {
    /// Clean source, EOS-terminated.
    pub src: IdMatrix,
    /// Independently corrupted copies for the two encoder branches.
    pub src_corrupt_left: IdMatrix,
    pub src_corrupt_right: IdMatrix,
    /// `BOS + target`.
    pub tgt_in: IdMatrix,
    /// `target + EOS`.
    pub tgt_out: IdMatrix,
    /// Indices of the pairs in the input slice.
    pub indices: Vec<usize>,
}

impl Batch {
    pub fn from_pairs(
        pairs: &[EncodedPair],
        indices: &[usize],
        swap_prob: f64,
        rng: &mut Rng,
    ) -> Result<Self> {
        let srcs: Vec<Vec<usize>> = indices
            .iter()
            .map(|&i| {
                let mut s = pairs[i].src.clone();
                s.push(EOS);
                s
            })
            .collect();
        // Left and right corruption draw from the same generator in a fixed
        // interleaved order; the draws are disjoint, hence independent.
        let mut left = Vec::with_capacity(srcs.len());
        let mut right = Vec::with_capacity(srcs.len());
        for s in &srcs {
            left.push(token_swap_corrupt(s, swap_prob, rng));
            right.push(token_swap_corrupt(s, swap_prob, rng));
        }
        let tgt_in: Vec<Vec<usize>> = indices
            .iter()
            .map(|&i| std::iter::once(BOS).chain(pairs[i].tgt.iter().copied()).collect())
            .collect();
        let tgt_out: Vec<Vec<usize>> = indices
            .iter()
            .map(|&i| pairs[i].tgt.iter().copied().chain(std::iter::once(EOS)).collect())
            .collect();
        Ok(Self {
            src: IdMatrix::from_rows(&srcs)?,
            src_corrupt_left: IdMatrix::from_rows(&left)?,
            src_corrupt_right: IdMatrix::from_rows(&right)?,
            tgt_in: IdMatrix::from_rows(&tgt_in)?,
            tgt_out: IdMatrix::from_rows(&tgt_out)?,
            indices: indices.to_vec(),
        })
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    /// Non-pad tokens in the clean source plus the decoder targets.
    pub fn tokens(&self) -> usize {
        self.src.non_pad() + self.tgt_out.non_pad()
    }
}

/// Groups pairs into batches of at most `token_budget` non-pad tokens.
///
/// Pairs are shuffled, stably sorted by length so that batches hold similar
/// lengths, packed greedily, and the batch order is shuffled again. Every
/// pair appears in exactly one batch. All randomness comes from `rng`.
pub fn make_batches(
    pairs: &[EncodedPair],
    token_budget: usize,
    swap_prob: f64,
    rng: &mut Rng,
) -> Result<Vec<Batch>> {
    if let Some((i, p)) = pairs.iter().enumerate().find(|(_, p)| p.tokens() > token_budget) {
        return Err(Error::data(format!(
            "pair {i} needs {} tokens, more than the budget of {token_budget}",
            p.tokens()
        )));
    }
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    rng.shuffle(&mut order);
    order.sort_by_key(|&i| (pairs[i].src.len(), pairs[i].tgt.len()));

    let mut groups: Vec<Vec<usize>> = Vec::new();
    let mut current = Vec::new();
    let mut used = 0;
    for i in order {
        let t = pairs[i].tokens();
        if used + t > token_budget && !current.is_empty() {
            groups.push(std::mem::take(&mut current));
            used = 0;
        }
        current.push(i);
        used += t;
    }
    if !current.is_empty() {
        groups.push(current);
    }
    rng.shuffle(&mut groups);
    groups
        .iter()
        .map(|g| Batch::from_pairs(pairs, g, swap_prob, rng))
        .collect()
}

/// Batches in corpus order without shuffling or corruption, for evaluation.
pub fn sequential_batches(pairs: &[EncodedPair], token_budget: usize) -> Result<Vec<Batch>> {
    let mut rng = Rng::new(0);
    let mut out = Vec::new();
    let mut current = Vec::new();
    let mut used = 0;
    for (i, p) in pairs.iter().enumerate() {
        let t = p.tokens();
        if used + t > token_budget && !current.is_empty() {
            out.push(Batch::from_pairs(pairs, &current, 0.0, &mut rng)?);
            current.clear();
            used = 0;
        }
        current.push(i);
        used += t;
    }
    if !current.is_empty() {
        out.push(Batch::from_pairs(pairs, &current, 0.0, &mut rng)?);
    }
    Ok(out)
}
