//! Greedy and beam-search decoding.

use crate::data::{IdMatrix, BOS, EOS};
use crate::error::{Error, Result};
use crate::model::{MemoryTensors, Model};

/// Anything that yields next-token log-probabilities for a set of
/// BOS-initial prefixes of equal length.
pub trait StepScorer {
    fn next_log_probs(&self, prefixes: &[Vec<usize>]) -> Result<Vec<Vec<f64>>>;
}

/// A model paired with the encoded form of one source sentence.
pub struct ModelScorer<'a> {
    model: &'a Model,
    memory: MemoryTensors,
}

impl<'a> ModelScorer<'a> {
    /// `src` is the source without EOS; it is appended here.
    pub fn new(model: &'a Model, src: &[usize]) -> Result<Self> {
        if src.is_empty() {
            return Err(Error::data("cannot decode an empty source"));
        }
        let mut s = src.to_vec();
        s.push(EOS);
        let memory = model.memory(&IdMatrix::from_rows(&[s])?)?;
        Ok(Self { model, memory })
    }
}

impl StepScorer for ModelScorer<'_> {
    fn next_log_probs(&self, prefixes: &[Vec<usize>]) -> Result<Vec<Vec<f64>>> {
        let mem = self.memory.select(&vec![0; prefixes.len()]);
        let lp = self.model.next_token_log_probs(&mem, &IdMatrix::from_rows(prefixes)?)?;
        Ok((0..lp.rows()).map(|r| lp.row(r).to_vec()).collect())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    /// Generated tokens after BOS; ends with EOS when finished.
    pub tokens: Vec<usize>,
    pub log_prob: f64,
}

impl Hypothesis {
    pub fn finished(&self) -> bool {
        self.tokens.last() == Some(&EOS)
    }

    /// Tokens without the trailing EOS.
    pub fn output(&self) -> &[usize] {
        match self.tokens.split_last() {
            Some((&EOS, rest)) => rest,
            _ => &self.tokens,
        }
    }

    fn prefix(&self) -> Vec<usize> {
        std::iter::once(BOS).chain(self.tokens.iter().copied()).collect()
    }
}

/// Index of the largest value; the lowest index wins ties.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Appends the most likely token until EOS or until `max_len` tokens (EOS
/// excluded) have been produced.
pub fn greedy_decode(scorer: &impl StepScorer, max_len: usize) -> Result<Hypothesis> {
    let mut hyp = Hypothesis {
        tokens: Vec::new(),
        log_prob: 0.0,
    };
    while hyp.output().len() < max_len && !hyp.finished() {
        let lp = scorer.next_log_probs(&[hyp.prefix()])?.remove(0);
        let t = argmax(&lp);
        hyp.tokens.push(t);
        hyp.log_prob += lp[t];
    }
    Ok(hyp)
}

/// Beam search. Every step expands all live hypotheses by every token and
/// keeps the `beam` highest log-probabilities; candidates ending in EOS
/// leave the beam as finished. Live hypotheses reaching `max_len` tokens
/// are finished as they are. The result maximizes
/// `log_prob / len^alpha`, with `len` counting generated tokens.
pub fn beam_search(scorer: &impl StepScorer, beam: usize, max_len: usize, alpha: f64) -> Result<Hypothesis> {
    if beam == 0 {
        return Err(Error::param("beam must be at least 1"));
    }
    let mut live = vec![Hypothesis {
        tokens: Vec::new(),
        log_prob: 0.0,
    }];
    let mut finished: Vec<Hypothesis> = Vec::new();
    while !live.is_empty() {
        if live[0].tokens.len() >= max_len {
            finished.append(&mut live);
            break;
        }
        let prefixes: Vec<Vec<usize>> = live.iter().map(Hypothesis::prefix).collect();
        let scores = scorer.next_log_probs(&prefixes)?;
        let mut cands: Vec<(f64, usize, usize)> = Vec::new();
        for (h, lp) in scores.iter().enumerate() {
            for (t, &s) in lp.iter().enumerate() {
                cands.push((live[h].log_prob + s, h, t));
            }
        }
        cands.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        cands.truncate(beam);
        let mut next = Vec::new();
        for (lp, h, t) in cands {
            let mut tokens = live[h].tokens.clone();
            tokens.push(t);
            let hyp = Hypothesis { tokens, log_prob: lp };
            if t == EOS {
                finished.push(hyp);
            } else {
                next.push(hyp);
            }
        }
        live = next;
    }
    let score = |h: &Hypothesis| {
        let len = h.tokens.len().max(1) as f64;
        h.log_prob / len.powf(alpha)
    };
    finished
        .into_iter()
        .reduce(|best, h| if score(&h) > score(&best) { h } else { best })
        .ok_or_else(|| Error::data("beam search produced no hypothesis"))
}

/// Greedy decoding of many sources at once; identical to running
/// [`greedy_decode`] on each source separately.
pub fn greedy_decode_batch(model: &Model, srcs: &[Vec<usize>], max_len: usize) -> Result<Vec<Vec<usize>>> {
    if srcs.is_empty() {
        return Ok(Vec::new());
    }
    if let Some(i) = srcs.iter().position(Vec::is_empty) {
        return Err(Error::data(format!("source {i} is empty")));
    }
    let rows: Vec<Vec<usize>> = srcs
        .iter()
        .map(|s| s.iter().copied().chain(std::iter::once(EOS)).collect())
        .collect();
    let memory = model.memory(&IdMatrix::from_rows(&rows)?)?;
    let mut outs: Vec<Vec<usize>> = vec![Vec::new(); srcs.len()];
    let mut live: Vec<usize> = (0..srcs.len()).collect();
    for _ in 0..max_len {
        if live.is_empty() {
            break;
        }
        let prefixes: Vec<Vec<usize>> = live
            .iter()
            .map(|&i| std::iter::once(BOS).chain(outs[i].iter().copied()).collect())
            .collect();
        let lp = model.next_token_log_probs(&memory.select(&live), &IdMatrix::from_rows(&prefixes)?)?;
        let mut still = Vec::new();
        for (r, &i) in live.iter().enumerate() {
            let t = argmax(lp.row(r));
            if t != EOS {
                outs[i].push(t);
                still.push(i);
            }
        }
        live = still;
    }
    Ok(outs)
}

/// Decodes every source, in chunks of `chunk` sentences.
pub fn translate(model: &Model, srcs: &[Vec<usize>], beam: usize, alpha: f64, max_len: usize, chunk: usize) -> Result<Vec<Vec<usize>>> {
    if beam <= 1 && alpha == 0.0 {
        let mut out = Vec::with_capacity(srcs.len());
        for part in srcs.chunks(chunk.max(1)) {
            out.extend(greedy_decode_batch(model, part, max_len)?);
        }
        return Ok(out);
    }
    srcs.iter()
        .map(|s| {
            let scorer = ModelScorer::new(model, s)?;
            Ok(beam_search(&scorer, beam, max_len, alpha)?.output().to_vec())
        })
        .collect()
}
