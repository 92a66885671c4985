//! Byte-pair encoding over characters with a shared source/target vocabulary.
//!
//! Words are split on whitespace into characters. Every symbol that is not
//! the last of its word carries the continuation marker `@@`, so `"abc"`
//! starts as `["a@@", "b@@", "c"]` and a merge of `("b@@", "c")` yields `"bc"`.
//! Joining tokens with spaces and deleting `"@@ "` restores the text.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;
pub const NUM_SPECIALS: usize = 4;
pub const SPECIAL_TOKENS: [&str; NUM_SPECIALS] = ["<pad>", "<s>", "</s>", "<unk>"];

pub const CONTINUATION: &str = "@@";
const MERGES_SENTINEL: &str = "#merges";

#[derive(Debug, Clone, PartialEq)]
pub struct BpeModel {
    base: Vec<String>,
    merges: Vec<(String, String)>,
    vocab: Vec<String>,
    index: HashMap<String, usize>,
    ranks: HashMap<(String, String), usize>,
}

fn word_symbols(word: &str) -> Vec<String> {
    let chars: Vec<char> = word.chars().collect();
    let last = chars.len().saturating_sub(1);
    chars
        .iter()
        .enumerate()
        .map(|(i, c)| {
            if i < last {
                format!("{c}{CONTINUATION}")
            } else {
                c.to_string()
            }
        })
        .collect()
}

fn merged(left: &str, right: &str) -> String {
    let stem = left.strip_suffix(CONTINUATION).unwrap_or(left);
    format!("{stem}{right}")
}

/// Replaces every occurrence of the adjacent pair `(l, r)`, left to right.
fn merge_word(symbols: &mut Vec<String>, l: &str, r: &str) {
    let mut i = 0;
    while i + 1 < symbols.len() {
        if symbols[i] == l && symbols[i + 1] == r {
            symbols[i] = merged(l, r);
            symbols.remove(i + 1);
        }
        i += 1;
    }
}

impl BpeModel {
    fn assemble(base: Vec<String>, merges: Vec<(String, String)>) -> Result<Self> {
        let mut vocab: Vec<String> = SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect();
        let mut index: HashMap<String, usize> =
            vocab.iter().enumerate().map(|(i, s)| (s.clone(), i)).collect();
        let mut push = |tok: String, vocab: &mut Vec<String>| {
            if !index.contains_key(&tok) {
                index.insert(tok.clone(), vocab.len());
                vocab.push(tok);
            }
        };
        for b in &base {
            if b.is_empty() || b.chars().any(char::is_whitespace) {
                return Err(Error::format(format!("invalid base symbol {b:?}")));
            }
            push(b.clone(), &mut vocab);
        }
        let mut ranks = HashMap::new();
        for (r, (a, b)) in merges.iter().enumerate() {
            push(merged(a, b), &mut vocab);
            ranks.entry((a.clone(), b.clone())).or_insert(r);
        }
        Ok(Self {
            base,
            merges,
            vocab,
            index,
            ranks,
        })
    }

    /// Learns merges from whitespace-tokenized lines until the vocabulary
    /// (special tokens + base symbols + merged tokens) reaches
    /// `target_vocab`, or no adjacent pair remains. The most frequent pair
    /// wins; ties go to the lexicographically smallest pair.
    pub fn learn<'a>(lines: impl IntoIterator<Item = &'a str>, target_vocab: usize) -> Result<Self> {
        let mut freqs: BTreeMap<&str, usize> = BTreeMap::new();
        for line in lines {
            for w in line.split_whitespace() {
                *freqs.entry(w).or_default() += 1;
            }
        }
        if freqs.is_empty() {
            return Err(Error::data("cannot learn BPE from an empty corpus"));
        }
        let mut words: Vec<(Vec<String>, usize)> =
            freqs.iter().map(|(w, &f)| (word_symbols(w), f)).collect();
        let base: Vec<String> = words
            .iter()
            .flat_map(|(s, _)| s.iter().cloned())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        let base_size = NUM_SPECIALS + base.len();
        if target_vocab < base_size {
            return Err(Error::param(format!(
                "target vocabulary {target_vocab} is smaller than the base vocabulary {base_size}"
            )));
        }

        let mut merges = Vec::new();
        let mut known: BTreeSet<String> = base.iter().cloned().collect();
        let mut size = base_size;
        while size < target_vocab {
            let mut counts: HashMap<(&str, &str), usize> = HashMap::new();
            for (syms, f) in &words {
                for w in syms.windows(2) {
                    *counts.entry((&w[0], &w[1])).or_default() += f;
                }
            }
            let Some((best, _)) = counts
                .into_iter()
                .max_by(|(pa, ca), (pb, cb)| ca.cmp(cb).then_with(|| pb.cmp(pa)))
            else {
                break;
            };
            let (l, r) = (best.0.to_string(), best.1.to_string());
            for (syms, _) in &mut words {
                merge_word(syms, &l, &r);
            }
            if known.insert(merged(&l, &r)) {
                size += 1;
            }
            merges.push((l, r));
        }
        Self::assemble(base, merges)
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    pub fn merges(&self) -> &[(String, String)] {
        &self.merges
    }

    pub fn base(&self) -> &[String] {
        &self.base
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.vocab.get(id).map(String::as_str)
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    /// Splits one word by repeatedly merging the lowest-ranked adjacent pair.
    fn segment_word(&self, word: &str) -> Vec<String> {
        let mut syms = word_symbols(word);
        loop {
            let best = syms
                .windows(2)
                .filter_map(|w| self.ranks.get(&(w[0].clone(), w[1].clone())).map(|&r| (r, w)))
                .min_by_key(|(r, _)| *r)
                .map(|(_, w)| (w[0].clone(), w[1].clone()));
            match best {
                Some((l, r)) => merge_word(&mut syms, &l, &r),
                None => return syms,
            }
        }
    }

    pub fn segment(&self, sentence: &str) -> Vec<String> {
        sentence
            .split_whitespace()
            .flat_map(|w| self.segment_word(w))
            .collect()
    }

    /// Token ids for `sentence`; symbols outside the vocabulary map to UNK.
    pub fn encode(&self, sentence: &str) -> Vec<usize> {
        self.segment(sentence)
            .iter()
            .map(|t| self.id(t).unwrap_or(UNK))
            .collect()
    }

    /// Token strings for `ids` (special tokens dropped), de-segmented.
    pub fn decode(&self, ids: &[usize]) -> String {
        let toks: Vec<&str> = ids
            .iter()
            .filter(|&&i| i >= NUM_SPECIALS || i == UNK)
            .map(|&i| self.token(i).unwrap_or(SPECIAL_TOKENS[UNK]))
            .collect();
        desegment(&toks.join(" "))
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for t in SPECIAL_TOKENS.iter().copied().chain(self.base.iter().map(String::as_str)) {
            s.push_str(t);
            s.push('\n');
        }
        s.push_str(MERGES_SENTINEL);
        s.push('\n');
        for (a, b) in &self.merges {
            s.push_str(&format!("{a} {b}\n"));
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let mut base = Vec::new();
        let mut seen_sentinel = false;
        for (n, line) in lines.by_ref().enumerate() {
            if line == MERGES_SENTINEL {
                seen_sentinel = true;
                break;
            }
            if n < NUM_SPECIALS {
                if line != SPECIAL_TOKENS[n] {
                    return Err(Error::format(format!(
                        "BPE line {}: expected special token {:?}, got {line:?}",
                        n + 1,
                        SPECIAL_TOKENS[n]
                    )));
                }
            } else {
                base.push(line.to_string());
            }
        }
        if !seen_sentinel {
            return Err(Error::format(format!("BPE file lacks the {MERGES_SENTINEL:?} line")));
        }
        let mut merges = Vec::new();
        for line in lines {
            if line.is_empty() {
                continue;
            }
            let mut parts = line.split(' ');
            match (parts.next(), parts.next(), parts.next()) {
                (Some(a), Some(b), None) if !a.is_empty() && !b.is_empty() => {
                    merges.push((a.to_string(), b.to_string()))
                }
                _ => return Err(Error::format(format!("bad merge line {line:?}"))),
            }
        }
        Self::assemble(base, merges)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_text(&fs::read_to_string(path)?)
    }
}

/// Joins continuation-marked subwords: `"lo@@ w"` becomes `"low"`.
pub fn desegment(text: &str) -> String {
    let joined = text.replace(&format!("{CONTINUATION} "), "");
    joined
        .strip_suffix(CONTINUATION)
        .map(str::to_string)
        .unwrap_or(joined)
}
