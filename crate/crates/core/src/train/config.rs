use std::collections::BTreeMap;

use super::adam::AdamConfig;
use crate::error::{Error, Result};
use crate::kv;

/// Optimization and evaluation settings for one run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub seed: u64,
    pub epochs: usize,
    pub warmup: u64,
    /// Multiplier on the inverse-square-root schedule.
    pub lr_scale: f64,
    /// Non-pad source plus target tokens per batch.
    pub token_budget: usize,
    /// Batches whose gradients are averaged into one update.
    pub accum_steps: usize,
    pub adam: AdamConfig,
    /// Longest output produced when decoding dev/test for BLEU.
    pub decode_max_len: usize,
    /// Stop after the first epoch whose dev BLEU reaches this value.
    pub stop_dev_bleu: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            epochs: 10,
            warmup: 4000,
            lr_scale: 1.0,
            token_budget: 4096,
            accum_steps: 1,
            adam: AdamConfig::default(),
            decode_max_len: 128,
            stop_dev_bleu: None,
        }
    }
}

impl TrainConfig {
    pub const KEYS: &'static [&'static str] = &[
        "seed",
        "epochs",
        "warmup",
        "lr_scale",
        "token_budget",
        "accum_steps",
        "beta1",
        "beta2",
        "adam_eps",
        "decode_max_len",
        "stop_dev_bleu",
    ];

    pub fn validate(&self) -> Result<()> {
        if self.warmup == 0 || self.token_budget == 0 || self.accum_steps == 0 || self.decode_max_len == 0 {
            return Err(Error::param(
                "warmup, token_budget, accum_steps and decode_max_len must be positive",
            ));
        }
        if !(self.lr_scale > 0.0 && self.lr_scale.is_finite()) {
            return Err(Error::param(format!("lr_scale {} must be positive", self.lr_scale)));
        }
        let AdamConfig { beta1, beta2, eps } = self.adam;
        if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) || eps <= 0.0 {
            return Err(Error::param("Adam betas must lie in [0, 1) and eps must be positive"));
        }
        Ok(())
    }

    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        let mut v = vec![
            ("seed", self.seed.to_string()),
            ("epochs", self.epochs.to_string()),
            ("warmup", self.warmup.to_string()),
            ("lr_scale", self.lr_scale.to_string()),
            ("token_budget", self.token_budget.to_string()),
            ("accum_steps", self.accum_steps.to_string()),
            ("beta1", self.adam.beta1.to_string()),
            ("beta2", self.adam.beta2.to_string()),
            ("adam_eps", self.adam.eps.to_string()),
            ("decode_max_len", self.decode_max_len.to_string()),
        ];
        if let Some(b) = self.stop_dev_bleu {
            v.push(("stop_dev_bleu", b.to_string()));
        }
        v
    }

    /// Overrides fields from any training keys present in `map`, removing them.
    pub fn apply_overrides(&mut self, map: &mut BTreeMap<String, String>) -> Result<()> {
        macro_rules! field {
            ($($key:literal => $($path:ident).+),* $(,)?) => {$(
                if let Some(v) = kv::take(map, $key)? {
                    self.$($path).+ = v;
                }
            )*};
        }
        field!(
            "seed" => seed,
            "epochs" => epochs,
            "warmup" => warmup,
            "lr_scale" => lr_scale,
            "token_budget" => token_budget,
            "accum_steps" => accum_steps,
            "beta1" => adam.beta1,
            "beta2" => adam.beta2,
            "adam_eps" => adam.eps,
            "decode_max_len" => decode_max_len,
        );
        if let Some(v) = kv::take::<f64>(map, "stop_dev_bleu")? {
            self.stop_dev_bleu = Some(v);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pairs_round_trip() {
        let cfg = TrainConfig {
            stop_dev_bleu: Some(95.0),
            lr_scale: 2.5,
            ..TrainConfig::default()
        };
        let mut map: BTreeMap<String, String> =
            cfg.to_pairs().into_iter().map(|(k, v)| (k.to_string(), v)).collect();
        let mut back = TrainConfig::default();
        back.apply_overrides(&mut map).unwrap();
        assert!(map.is_empty());
        assert_eq!(back, cfg);
    }

    #[test]
    fn bad_values_rejected() {
        let cfg = TrainConfig {
            warmup: 0,
            ..TrainConfig::default()
        };
        assert!(cfg.validate().is_err());
        let mut map = BTreeMap::from([("epochs".to_string(), "x".to_string())]);
        assert!(TrainConfig::default().apply_overrides(&mut map).is_err());
    }
}
