//! The training loop, per-epoch evaluation, checkpoints and resumption.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use super::adam::Adam;
use super::config::TrainConfig;
use super::records::{EpochRow, RunRecord};
use super::schedule::lr_at;
use crate::data::{make_batches, Batch, BpeModel, EncodedPair};
use crate::error::{Error, Result};
use crate::eval::{bleu_on, teacher_forced};
use crate::graph::Graph;
use crate::kv;
use crate::model::{Checkpoint, Model, ModelConfig};
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const LOSS_LOG: &str = "loss.log";
pub const BPE_FILE: &str = "bpe.model";

/// Encoded splits sharing one BPE model.
#[derive(Debug, Clone)]
pub struct ExperimentData {
    pub bpe: BpeModel,
    pub train: Vec<EncodedPair>,
    pub dev: Vec<EncodedPair>,
    pub test: Vec<EncodedPair>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub step: u64,
    /// Completed epochs.
    pub epoch: usize,
    pub best_dev_bleu: f64,
}

impl Default for TrainState {
    fn default() -> Self {
        Self {
            step: 0,
            epoch: 0,
            best_dev_bleu: f64::NEG_INFINITY,
        }
    }
}

pub fn checkpoint_path(out_dir: &Path, epoch: usize) -> PathBuf {
    out_dir.join(format!("epoch-{epoch:03}.ckpt"))
}

/// Loss and gradient of one batch; gradients are added into the model's
/// parameter store after scaling by `weight`.
pub fn accumulate_gradients(model: &mut Model, batch: &Batch, rng: &mut Rng, weight: f64) -> Result<f64> {
    let mut g = Graph::new();
    let loss = model.batch_loss(&mut g, batch, rng, true)?;
    let value = g.value(loss).data()[0];
    let scaled = g.scale(loss, weight);
    let grads = g.backward(scaled)?;
    model.params.accumulate(&g, &grads)?;
    Ok(value)
}

#[derive(Debug, Clone)]
pub struct Trainer {
    pub model: Model,
    pub adam: Adam,
    pub state: TrainState,
    pub config: TrainConfig,
    pub record: RunRecord,
}

impl Trainer {
    pub fn new(model_config: ModelConfig, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let model = Model::new(model_config, config.seed)?;
        let adam = Adam::new(config.adam, &model.params);
        Ok(Self {
            model,
            adam,
            state: TrainState::default(),
            config,
            record: RunRecord::default(),
        })
    }

    /// One optimizer update over `batches`, whose gradients are averaged.
    /// Returns the mean batch loss.
    pub fn train_step(&mut self, batches: &[Batch], rng: &mut Rng) -> Result<f64> {
        if batches.is_empty() {
            return Err(Error::EmptyBatch);
        }
        self.model.params.zero_grads();
        let w = 1.0 / batches.len() as f64;
        let mut loss = 0.0;
        for b in batches {
            loss += w * accumulate_gradients(&mut self.model, b, rng, w)?;
        }
        let step = self.state.step + 1;
        if !loss.is_finite() {
            return Err(Error::Divergence { step, loss });
        }
        let lr = lr_at(step, self.model.config.d_model, self.config.warmup)? * self.config.lr_scale;
        self.adam.update(&mut self.model.params, lr, step)?;
        self.state.step = step;
        Ok(loss)
    }

    /// Trains for one epoch and returns the token-weighted mean loss.
    pub fn train_epoch(&mut self, data: &ExperimentData) -> Result<f64> {
        let epoch = self.state.epoch + 1;
        let mut rng = Rng::derive(self.config.seed, epoch as u64);
        let batches = make_batches(&data.train, self.config.token_budget, self.model.config.swap_prob, &mut rng)?;
        if batches.is_empty() {
            return Err(Error::data("training set is empty"));
        }
        let mut total = 0.0;
        let mut tokens = 0usize;
        for group in batches.chunks(self.config.accum_steps) {
            let loss = self.train_step(group, &mut rng)?;
            let n: usize = group.iter().map(|b| b.tgt_out.non_pad()).sum();
            total += loss * n as f64;
            tokens += n;
        }
        self.state.epoch = epoch;
        Ok(total / tokens as f64)
    }

    /// Trains one epoch, evaluates, and records the result. With an output
    /// directory, also writes the epoch checkpoint and the loss log.
    pub fn run_epoch(&mut self, data: &ExperimentData, out_dir: Option<&Path>) -> Result<EpochRow> {
        let train_loss = self.train_epoch(data)?;
        let budget = self.config.token_budget;
        let valid_loss = if data.dev.is_empty() {
            f64::NAN
        } else {
            teacher_forced(&self.model, &data.dev, budget)?.loss
        };
        let bleu = |pairs: &[EncodedPair]| -> Result<f64> {
            if pairs.is_empty() {
                Ok(0.0)
            } else {
                bleu_on(&self.model, &data.bpe, pairs, self.config.decode_max_len)
            }
        };
        let row = EpochRow {
            epoch: self.state.epoch,
            train_loss,
            valid_loss,
            dev_bleu: bleu(&data.dev)?,
            test_bleu: bleu(&data.test)?,
        };
        self.state.best_dev_bleu = self.state.best_dev_bleu.max(row.dev_bleu);
        self.record.rows.push(row);
        if let Some(dir) = out_dir {
            self.checkpoint().save(&checkpoint_path(dir, row.epoch))?;
            fs::write(dir.join(LOSS_LOG), self.record.to_loss_log())?;
        }
        Ok(row)
    }

    /// Runs epochs until `config.epochs` are complete or the dev BLEU target
    /// is reached.
    pub fn run(&mut self, data: &ExperimentData, out_dir: Option<&Path>) -> Result<RunRecord> {
        while self.state.epoch < self.config.epochs {
            let row = self.run_epoch(data, out_dir)?;
            if self.config.stop_dev_bleu.is_some_and(|t| row.dev_bleu >= t) {
                break;
            }
        }
        Ok(self.record.clone())
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::from_model(&self.model, self.state.step);
        for (k, v) in self.config.to_pairs() {
            ck.meta.insert(format!("train.{k}"), v);
        }
        ck.meta.insert("train.epoch".into(), self.state.epoch.to_string());
        ck.meta.insert("train.best_dev_bleu".into(), self.state.best_dev_bleu.to_string());
        ck.meta.insert("train.records".into(), self.record.to_compact());
        for (p, (m, v)) in self.model.params.iter().zip(self.adam.m.iter().zip(&self.adam.v)) {
            ck.tensors.push((format!("opt.m/{}", p.name), m.clone()));
            ck.tensors.push((format!("opt.v/{}", p.name), v.clone()));
        }
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let mut train_keys: BTreeMap<String, String> = BTreeMap::new();
        let mut meta = ck.meta.clone();
        for k in TrainConfig::KEYS {
            if let Some(v) = meta.remove(&format!("train.{k}")) {
                train_keys.insert(k.to_string(), v);
            }
        }
        let mut config = TrainConfig::default();
        config.apply_overrides(&mut train_keys)?;
        config.validate()?;
        let epoch: usize = kv::require(&mut meta, "train.epoch")?;
        let best_dev_bleu: f64 = kv::require(&mut meta, "train.best_dev_bleu")?;
        let record = RunRecord::from_compact(&meta.remove("train.records").unwrap_or_default())?;
        if record.len() != epoch {
            return Err(Error::format(format!(
                "checkpoint at epoch {epoch} carries {} record rows",
                record.len()
            )));
        }
        let model = ck.to_model()?;
        let mut adam = Adam::new(config.adam, &model.params);
        let find = |name: &str| -> Result<&Tensor> {
            ck.tensor(name)
                .ok_or_else(|| Error::format(format!("checkpoint lacks optimizer tensor {name}")))
        };
        for (i, p) in model.params.iter().enumerate() {
            adam.m[i] = find(&format!("opt.m/{}", p.name))?.clone();
            adam.v[i] = find(&format!("opt.v/{}", p.name))?.clone();
            if adam.m[i].shape() != p.value.shape() || adam.v[i].shape() != p.value.shape() {
                return Err(Error::format(format!("optimizer moments for {} have the wrong shape", p.name)));
            }
        }
        Ok(Self {
            model,
            adam,
            state: TrainState {
                step: ck.step,
                epoch,
                best_dev_bleu,
            },
            config,
            record,
        })
    }
}

/// Trains a fresh model, writing `bpe.model`, one checkpoint per epoch and
/// `loss.log` into `out_dir`.
pub fn run_experiment(
    model_config: ModelConfig,
    config: TrainConfig,
    data: &ExperimentData,
    out_dir: &Path,
) -> Result<RunRecord> {
    fs::create_dir_all(out_dir)?;
    data.bpe.save(&out_dir.join(BPE_FILE))?;
    let mut trainer = Trainer::new(model_config, config)?;
    trainer.run(data, Some(out_dir))
}

/// Continues a run from a checkpoint up to `epochs` total epochs.
pub fn resume(checkpoint: &Path, data: &ExperimentData, epochs: usize, out_dir: &Path) -> Result<RunRecord> {
    let mut trainer = Trainer::from_checkpoint(&Checkpoint::load(checkpoint)?)?;
    trainer.config.epochs = epochs;
    fs::create_dir_all(out_dir)?;
    data.bpe.save(&out_dir.join(BPE_FILE))?;
    fs::write(out_dir.join(LOSS_LOG), trainer.record.to_loss_log())?;
    trainer.run(data, Some(out_dir))
}
