//! Corpus-level BLEU-4 without smoothing.

use std::collections::HashMap;

use crate::data::desegment;
use crate::error::{Error, Result};

pub const MAX_ORDER: usize = 4;

/// Clipped match and candidate n-gram counts plus lengths, summed over a corpus.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct BleuStats {
    pub matches: [usize; MAX_ORDER],
    pub candidates: [usize; MAX_ORDER],
    pub ref_ngrams: [usize; MAX_ORDER],
    pub hyp_len: usize,
    pub ref_len: usize,
}

fn ngram_counts<'a, 'b>(toks: &'b [&'a str], n: usize) -> HashMap<&'b [&'a str], usize> {
    let mut m = HashMap::new();
    if toks.len() >= n {
        for w in toks.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

impl BleuStats {
    pub fn add_sentence(&mut self, hyp: &[&str], reference: &[&str]) {
        self.hyp_len += hyp.len();
        self.ref_len += reference.len();
        for n in 1..=MAX_ORDER {
            let h = ngram_counts(hyp, n);
            let r = ngram_counts(reference, n);
            self.candidates[n - 1] += hyp.len().saturating_sub(n - 1);
            self.ref_ngrams[n - 1] += reference.len().saturating_sub(n - 1);
            self.matches[n - 1] += h
                .iter()
                .map(|(g, &c)| c.min(r.get(g).copied().unwrap_or(0)))
                .sum::<usize>();
        }
    }

    /// BLEU in `[0, 100]`. An order with no hypothesis n-grams counts as
    /// perfect only when the references have none either; otherwise any
    /// order without a match gives 0.
    pub fn score(&self) -> f64 {
        let mut log_sum = 0.0;
        for n in 0..MAX_ORDER {
            if self.candidates[n] == 0 {
                if self.ref_ngrams[n] == 0 {
                    continue;
                }
                return 0.0;
            }
            if self.matches[n] == 0 {
                return 0.0;
            }
            log_sum += (self.matches[n] as f64 / self.candidates[n] as f64).ln();
        }
        let bp = if self.hyp_len >= self.ref_len {
            1.0
        } else if self.hyp_len == 0 {
            0.0
        } else {
            (1.0 - self.ref_len as f64 / self.hyp_len as f64).exp()
        };
        100.0 * bp * (log_sum / MAX_ORDER as f64).exp()
    }
}

pub fn corpus_bleu_tokens(hyps: &[Vec<&str>], refs: &[Vec<&str>]) -> Result<f64> {
    if hyps.is_empty() {
        return Err(Error::data("BLEU needs at least one hypothesis"));
    }
    if hyps.len() != refs.len() {
        return Err(Error::data(format!(
            "{} hypotheses but {} references",
            hyps.len(),
            refs.len()
        )));
    }
    let mut stats = BleuStats::default();
    for (h, r) in hyps.iter().zip(refs) {
        stats.add_sentence(h, r);
    }
    Ok(stats.score())
}

fn split_all(v: &[String]) -> Vec<Vec<&str>> {
    v.iter().map(|s| s.split_whitespace().collect()).collect()
}

/// BLEU over sentences, de-segmented and split on whitespace.
pub fn corpus_bleu<S: AsRef<str>, T: AsRef<str>>(hyps: &[S], refs: &[T]) -> Result<f64> {
    let hyp_text: Vec<String> = hyps.iter().map(|s| desegment(s.as_ref())).collect();
    let ref_text: Vec<String> = refs.iter().map(|s| desegment(s.as_ref())).collect();
    corpus_bleu_tokens(&split_all(&hyp_text), &split_all(&ref_text))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_is_100() {
        let h = ["the cat sat on the mat", "a b"];
        assert_eq!(corpus_bleu(&h, &h).unwrap(), 100.0);
        assert_eq!(corpus_bleu(&["x"], &["x"]).unwrap(), 100.0);
    }

    #[test]
    fn disjoint_is_zero() {
        assert_eq!(corpus_bleu(&["a b c d"], &["e f g h"]).unwrap(), 0.0);
    }

    #[test]
    fn repeated_the_has_clipped_unigrams() {
        let mut s = BleuStats::default();
        let h: Vec<&str> = "the the the the the the the".split(' ').collect();
        let r: Vec<&str> = "the cat is on the mat".split(' ').collect();
        s.add_sentence(&h, &r);
        assert_eq!((s.matches[0], s.candidates[0]), (2, 7));
        // No bigram of the hypothesis occurs in the reference.
        assert_eq!(s.matches[1], 0);
        assert_eq!(s.score(), 0.0);
    }

    #[test]
    fn hand_computed_value() {
        // hyp: a b c d e, ref: a b c d f g
        // p1 = 4/5, p2 = 3/4, p3 = 2/3, p4 = 1/2, BP = exp(1 - 6/5)
        let got = corpus_bleu(&["a b c d e"], &["a b c d f g"]).unwrap();
        let want = 100.0 * (1.0f64 - 1.2).exp() * (0.8f64 * 0.75 * (2.0 / 3.0) * 0.5).powf(0.25);
        assert!((got - want).abs() < 1e-12);
    }

    #[test]
    fn errors() {
        let empty: [&str; 0] = [];
        assert!(matches!(corpus_bleu(&empty, &empty), Err(Error::Data(_))));
        assert!(corpus_bleu(&["a"], &["a", "b"]).is_err());
    }

    #[test]
    fn desegments_before_scoring() {
        assert_eq!(corpus_bleu(&["lo@@ w er"], &["low er"]).unwrap(), 100.0);
    }
}
