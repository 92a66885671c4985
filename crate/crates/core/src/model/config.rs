use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::kv;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Arch {
    /// Two crossed encoder branches and a dual-branch decoder.
    Thm,
    /// Single-branch encoder-decoder baseline.
    Transformer,
}

impl fmt::Display for Arch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Arch::Thm => "thm",
            Arch::Transformer => "transformer",
        })
    }
}

impl FromStr for Arch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "thm" => Ok(Arch::Thm),
            "transformer" => Ok(Arch::Transformer),
            _ => Err(Error::format(format!("unknown architecture {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub arch: Arch,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_blocks: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub dropout_p: f64,
    /// Probability of one token swap per encoder branch input (training only).
    pub swap_prob: f64,
    pub max_len: usize,
    pub label_smoothing: f64,
}

pub const PRESETS: &[&str] = &[
    "thm-base",
    "thm-big",
    "transformer-base",
    "transformer-big",
    "tiny",
    "thm-tiny",
    "transformer-tiny",
];

impl ModelConfig {
    pub const KEYS: &'static [&'static str] = &[
        "arch",
        "d_model",
        "n_heads",
        "n_blocks",
        "d_ff",
        "vocab_size",
        "dropout_p",
        "swap_prob",
        "max_len",
        "label_smoothing",
    ];

    fn sized(arch: Arch, d_model: usize, n_heads: usize, n_blocks: usize, vocab: usize, dropout: f64) -> Self {
        Self {
            arch,
            d_model,
            n_heads,
            n_blocks,
            d_ff: 4 * d_model,
            vocab_size: vocab,
            dropout_p: dropout,
            swap_prob: 0.5,
            max_len: 1024,
            label_smoothing: 0.1,
        }
    }

    pub fn base(arch: Arch) -> Self {
        Self::sized(arch, 512, 8, 6, 33_712, 0.1)
    }

    pub fn big(arch: Arch) -> Self {
        Self::sized(arch, 1024, 16, 6, 33_712, 0.3)
    }

    /// Desk-scale configuration: width 64, two blocks, four heads.
    pub fn tiny(arch: Arch) -> Self {
        Self {
            max_len: 256,
            ..Self::sized(arch, 64, 4, 2, 256, 0.1)
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        Ok(match name {
            "thm-base" => Self::base(Arch::Thm),
            "thm-big" => Self::big(Arch::Thm),
            "transformer-base" => Self::base(Arch::Transformer),
            "transformer-big" => Self::big(Arch::Transformer),
            "tiny" | "thm-tiny" => Self::tiny(Arch::Thm),
            "transformer-tiny" => Self::tiny(Arch::Transformer),
            _ => {
                return Err(Error::param(format!(
                    "unknown preset {name:?}; expected one of {}",
                    PRESETS.join(", ")
                )))
            }
        })
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
            ("vocab_size", self.vocab_size),
            ("max_len", self.max_len),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::param(format!("{name} must be positive")));
            }
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::param(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(Error::param(format!("dropout_p {} outside [0, 1)", self.dropout_p)));
        }
        if !(0.0..=1.0).contains(&self.swap_prob) {
            return Err(Error::param(format!("swap_prob {} outside [0, 1]", self.swap_prob)));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::param(format!(
                "label_smoothing {} outside [0, 1)",
                self.label_smoothing
            )));
        }
        if self.vocab_size <= crate::data::bpe::NUM_SPECIALS {
            return Err(Error::param(format!(
                "vocab_size {} leaves no room beyond the special tokens",
                self.vocab_size
            )));
        }
        Ok(())
    }

    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        vec![
            ("arch", self.arch.to_string()),
            ("d_model", self.d_model.to_string()),
            ("n_heads", self.n_heads.to_string()),
            ("n_blocks", self.n_blocks.to_string()),
            ("d_ff", self.d_ff.to_string()),
            ("vocab_size", self.vocab_size.to_string()),
            ("dropout_p", self.dropout_p.to_string()),
            ("swap_prob", self.swap_prob.to_string()),
            ("max_len", self.max_len.to_string()),
            ("label_smoothing", self.label_smoothing.to_string()),
        ]
    }

    /// Overrides fields from any model keys present in `map`, removing them.
    pub fn apply_overrides(&mut self, map: &mut BTreeMap<String, String>) -> Result<()> {
        if let Some(v) = kv::take(map, "arch")? {
            self.arch = v;
        }
        macro_rules! field {
            ($($name:ident),*) => {$(
                if let Some(v) = kv::take(map, stringify!($name))? {
                    self.$name = v;
                }
            )*};
        }
        field!(d_model, n_heads, n_blocks, d_ff, vocab_size, dropout_p, swap_prob, max_len, label_smoothing);
        Ok(())
    }

    /// Reads a complete configuration; every field is required.
    pub fn from_map(map: &mut BTreeMap<String, String>) -> Result<Self> {
        let cfg = Self {
            arch: kv::require(map, "arch")?,
            d_model: kv::require(map, "d_model")?,
            n_heads: kv::require(map, "n_heads")?,
            n_blocks: kv::require(map, "n_blocks")?,
            d_ff: kv::require(map, "d_ff")?,
            vocab_size: kv::require(map, "vocab_size")?,
            dropout_p: kv::require(map, "dropout_p")?,
            swap_prob: kv::require(map, "swap_prob")?,
            max_len: kv::require(map, "max_len")?,
            label_smoothing: kv::require(map, "label_smoothing")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}
