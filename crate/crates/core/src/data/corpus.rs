use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::rng::Rng;

pub const DEFAULT_MAX_LEN: usize = 250;
pub const DEFAULT_RATIO_LIMIT: f64 = 1.5;

/// Aligned source/target sentences, whitespace tokenized.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParallelCorpus {
    pub pairs: Vec<(String, String)>,
}

impl ParallelCorpus {
    pub fn from_lines(src: &str, tgt: &str) -> Result<Self> {
        let s: Vec<&str> = src.lines().collect();
        let t: Vec<&str> = tgt.lines().collect();
        if s.len() != t.len() {
            return Err(Error::data(format!(
                "source has {} lines but target has {}",
                s.len(),
                t.len()
            )));
        }
        Ok(Self {
            pairs: s
                .into_iter()
                .zip(t)
                .map(|(a, b)| (a.trim().to_string(), b.trim().to_string()))
                .collect(),
        })
    }

    pub fn read(src: &Path, tgt: &Path) -> Result<Self> {
        Self::from_lines(&fs::read_to_string(src)?, &fs::read_to_string(tgt)?)
    }

    pub fn write(&self, src: &Path, tgt: &Path) -> Result<()> {
        let (s, t) = self.to_lines();
        fs::write(src, s)?;
        fs::write(tgt, t)?;
        Ok(())
    }

    pub fn to_lines(&self) -> (String, String) {
        let mut s = String::new();
        let mut t = String::new();
        for (a, b) in &self.pairs {
            s.push_str(a);
            s.push('\n');
            t.push_str(b);
            t.push('\n');
        }
        (s, t)
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Every sentence on both sides, for learning a shared vocabulary.
    pub fn all_sentences(&self) -> impl Iterator<Item = &str> {
        self.pairs
            .iter()
            .flat_map(|(a, b)| [a.as_str(), b.as_str()])
    }

    pub fn sources(&self) -> impl Iterator<Item = &str> {
        self.pairs.iter().map(|(a, _)| a.as_str())
    }

    pub fn targets(&self) -> impl Iterator<Item = &str> {
        self.pairs.iter().map(|(_, b)| b.as_str())
    }
}

fn len_words(s: &str) -> usize {
    s.split_whitespace().count()
}

/// Drops pairs where either side is longer than `max_len` tokens or the
/// longer side exceeds `ratio_limit` times the shorter one.
pub fn length_filter(corpus: &ParallelCorpus, max_len: usize, ratio_limit: f64) -> Result<ParallelCorpus> {
    if max_len == 0 {
        return Err(Error::param("max_len must be at least 1"));
    }
    let keep = |(a, b): &&(String, String)| {
        let (la, lb) = (len_words(a), len_words(b));
        if la > max_len || lb > max_len {
            return false;
        }
        let (lo, hi) = (la.min(lb), la.max(lb));
        lo > 0 && hi as f64 <= ratio_limit * lo as f64
    };
    Ok(ParallelCorpus {
        pairs: corpus.pairs.iter().filter(keep).cloned().collect(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Task {
    Copy,
    Reverse,
    Sort,
}

impl std::str::FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "copy" => Ok(Task::Copy),
            "reverse" => Ok(Task::Reverse),
            "sort" => Ok(Task::Sort),
            _ => Err(Error::param(format!("unknown task {s:?}; expected copy, reverse or sort"))),
        }
    }
}

/// The `i`-th synthetic symbol: `a`..`z`, `A`..`Z`, `0`..`9`, then Latin
/// Extended characters. Symbol order defines the `sort` task's order.
pub fn synthetic_symbol(i: usize) -> char {
    const ALPHABET: &str = "abcdefghijklmnopqrstuvwxyzABCDEFGHIJKLMNOPQRSTUVWXYZ0123456789";
    ALPHABET
        .chars()
        .nth(i)
        .unwrap_or_else(|| char::from_u32(0x100 + (i - ALPHABET.len()) as u32).expect("valid char"))
}

pub fn apply_task(task: Task, src: &[usize]) -> Vec<usize> {
    let mut t = src.to_vec();
    match task {
        Task::Copy => {}
        Task::Reverse => t.reverse(),
        Task::Sort => t.sort_unstable(),
    }
    t
}

/// Random symbol strings with lengths drawn uniformly from `len_range`
/// (inclusive) and targets given by `task`.
pub fn gen_synthetic(
    task: Task,
    vocab_size: usize,
    n_pairs: usize,
    len_range: (usize, usize),
    rng: &mut Rng,
) -> Result<ParallelCorpus> {
    if vocab_size < 5 {
        return Err(Error::param(format!("synthetic vocabulary {vocab_size} is below 5")));
    }
    let (lo, hi) = len_range;
    if lo == 0 || lo > hi {
        return Err(Error::param(format!("invalid length range {lo}..={hi}")));
    }
    let render = |ids: &[usize]| {
        ids.iter()
            .map(|&i| synthetic_symbol(i).to_string())
            .collect::<Vec<_>>()
            .join(" ")
    };
    let pairs = (0..n_pairs)
        .map(|_| {
            let n = lo + rng.below(hi - lo + 1);
            let src: Vec<usize> = (0..n).map(|_| rng.below(vocab_size)).collect();
            (render(&src), render(&apply_task(task, &src)))
        })
        .collect();
    Ok(ParallelCorpus { pairs })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn task_examples() {
        let (c, f, b) = (2, 5, 1);
        assert_eq!(apply_task(Task::Copy, &[c, f, b]), vec![c, f, b]);
        assert_eq!(apply_task(Task::Reverse, &[c, f, b]), vec![b, f, c]);
        assert_eq!(apply_task(Task::Sort, &[c, f, b]), vec![b, c, f]);
        assert_eq!(synthetic_symbol(2), 'c');
    }

    #[test]
    fn synthetic_corpus_shape() {
        let c = gen_synthetic(Task::Reverse, 20, 50, (3, 12), &mut Rng::new(1)).unwrap();
        assert_eq!(c.len(), 50);
        for (s, t) in &c.pairs {
            let n = len_words(s);
            assert!((3..=12).contains(&n));
            let rev: Vec<&str> = s.split(' ').rev().collect();
            assert_eq!(t, &rev.join(" "));
        }
        assert!(gen_synthetic(Task::Copy, 4, 1, (1, 2), &mut Rng::new(1)).is_err());
    }

    #[test]
    fn filter_examples() {
        let c = ParallelCorpus {
            pairs: vec![("a b".into(), "c d".into()), ("a b c".into(), "d".into())],
        };
        let mut within = c.clone();
        within.pairs.truncate(1);
        assert_eq!(length_filter(&within, 5, 1.5).unwrap(), within);
        assert_eq!(length_filter(&c, 2, 10.0).unwrap().len(), 1);

        let ten = ["x"; 10].join(" ");
        let sixteen = vec!["y"; 16].join(" ");
        let c = ParallelCorpus {
            pairs: vec![(ten, sixteen)],
        };
        assert!(length_filter(&c, 250, 1.5).unwrap().is_empty());
    }

    #[test]
    fn mismatched_sides_rejected() {
        assert!(ParallelCorpus::from_lines("a\nb\n", "c\n").is_err());
    }
}
