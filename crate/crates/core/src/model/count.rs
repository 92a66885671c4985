//! Closed-form parameter counts, computed from the configuration alone.

use super::config::{Arch, ModelConfig};

pub fn linear_params(d_in: usize, d_out: usize) -> usize {
    d_in * d_out + d_out
}

pub fn norm_params(d: usize) -> usize {
    2 * d
}

pub fn attention_params(d: usize) -> usize {
    4 * linear_params(d, d)
}

pub fn ffn_params(d: usize, d_ff: usize) -> usize {
    linear_params(d, d_ff) + linear_params(d_ff, d)
}

/// The embedding table, shared with the output projection.
pub fn embedding_params(vocab: usize, d: usize) -> usize {
    vocab * d
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamCount {
    pub embedding: usize,
    pub encoder: usize,
    pub decoder: usize,
}

impl ParamCount {
    pub fn total(&self) -> usize {
        self.embedding + self.encoder + self.decoder
    }
}

pub fn count_parameters(cfg: &ModelConfig) -> ParamCount {
    let (d, f, n) = (cfg.d_model, cfg.d_ff, cfg.n_blocks);
    let branch = attention_params(d) + ffn_params(d, f) + 2 * norm_params(d);
    let self_attn = attention_params(d) + norm_params(d);
    let (encoder, decoder) = match cfg.arch {
        Arch::Transformer => (branch, self_attn + branch),
        Arch::Thm => (
            2 * branch,
            self_attn + 2 * branch + linear_params(2 * d, d) + norm_params(d) + ffn_params(d, f) + norm_params(d),
        ),
    };
    ParamCount {
        embedding: embedding_params(cfg.vocab_size, d),
        encoder: n * encoder,
        decoder: n * decoder,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn helper_examples() {
        assert_eq!(linear_params(512, 512), 262_656);
        assert_eq!(embedding_params(33_712, 512), 17_260_544);
    }

    #[test]
    fn transformer_base_closed_form() {
        let cfg = ModelConfig::preset("transformer-base").unwrap();
        let d = 512;
        let want = 168 * d * d + 192 * d + 33_712 * d;
        assert_eq!(count_parameters(&cfg).total(), want);
    }

    #[test]
    fn matches_constructed_models() {
        for arch in [Arch::Thm, Arch::Transformer] {
            for (d, blocks) in [(8, 1), (16, 2), (12, 0)] {
                let cfg = ModelConfig {
                    d_model: d,
                    n_heads: 2,
                    n_blocks: blocks,
                    d_ff: 3 * d,
                    vocab_size: 19,
                    ..ModelConfig::tiny(arch)
                };
                let model = crate::model::Model::new(cfg.clone(), 0).unwrap();
                assert_eq!(count_parameters(&cfg).total(), model.params.num_elements());
            }
        }
    }

    #[test]
    fn preset_ratios() {
        for size in ["base", "big"] {
            let thm = count_parameters(&ModelConfig::preset(&format!("thm-{size}")).unwrap()).total();
            let tf = count_parameters(&ModelConfig::preset(&format!("transformer-{size}")).unwrap()).total();
            let r = thm as f64 / tf as f64;
            assert!((1.80..=2.05).contains(&r), "{size}: {r}");
        }
    }
}
