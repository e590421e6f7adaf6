//! Teacher-forced training with AdamW, clipping, validation and checkpoints.

mod checkpoint;
mod optim;

pub use checkpoint::{
    load_checkpoint, read_manifest, save_checkpoint, Checkpoint, Manifest, Progress, TensorEntry,
    BLOB_FILE, FORMAT, FORMAT_VERSION, MANIFEST_FILE, VOCAB_FILE,
};
pub use optim::{clip_grad_norm, global_norm, AdamW, AdamWConfig, Grads};

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{make_batches, Batch, Sample, Vocab};
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::tensor::{Dtype, Real, Tape};

pub const LAST_DIR: &str = "last";
pub const BEST_DIR: &str = "best";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// Global gradient norm bound; zero or negative disables clipping.
    pub grad_clip_norm: f64,
    /// Linear learning-rate ramp length in steps; zero disables it.
    pub warmup_steps: usize,
    /// Stop after this many optimizer steps in total.
    pub max_steps: Option<usize>,
    pub seed: u64,
    /// Dev evaluation period in epochs.
    pub validate_every: usize,
    pub checkpoint_dir: Option<PathBuf>,
    pub precision: Dtype,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            batch_size: 32,
            lr: 1e-3,
            weight_decay: 0.01,
            grad_clip_norm: 1.0,
            warmup_steps: 0,
            max_steps: None,
            seed: 0,
            validate_every: 1,
            checkpoint_dir: None,
            precision: Dtype::F64,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.validate_every == 0 {
            return Err(Error::Config(
                "epochs, batch_size and validate_every must be positive".into(),
            ));
        }
        let valid = |x: f64| x.is_finite() && x >= 0.0;
        if !valid(self.lr) || !valid(self.weight_decay) {
            return Err(Error::Config(format!(
                "lr {} and weight_decay {} must be finite and non-negative",
                self.lr, self.weight_decay
            )));
        }
        Ok(())
    }

    pub fn optimizer(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            ..Default::default()
        }
    }

    /// Learning rate for the update that completes `step + 1` steps.
    pub fn lr_at(&self, step: usize) -> f64 {
        if self.warmup_steps == 0 {
            self.lr
        } else {
            self.lr * ((step + 1) as f64 / self.warmup_steps as f64).min(1.0)
        }
    }
}

const SHUFFLE_STREAM: u64 = 1;
const DROPOUT_STREAM: u64 = 2;

/// Independent 64-bit seed for `(seed, stream, index)`.
pub fn derive_seed(seed: u64, stream: u64, index: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng.set_word_pos(u128::from(index) * 2);
    rng.next_u64()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepStats {
    pub loss: f64,
    pub tokens: usize,
    pub grad_norm: f64,
    pub clip_scale: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    /// Global step count after the epoch.
    pub step: usize,
    pub steps: usize,
    /// Token-weighted mean training NLL.
    pub train_nll: f64,
    pub dev_nll: Option<f64>,
    pub tokens: usize,
    pub tokens_per_sec: f64,
}

impl EpochStats {
    /// `key=value` log record.
    pub fn log_line(&self) -> String {
        let dev = self.dev_nll.map_or("na".to_string(), |d| format!("{d:.6}"));
        format!(
            "event=epoch epoch={} step={} train_nll={:.6} dev_nll={dev} tokens={} tokens_per_sec={:.1}",
            self.epoch, self.step, self.train_nll, self.tokens, self.tokens_per_sec
        )
    }
}

/// Token-weighted mean NLL of `model` over `batches`, without dropout.
pub fn evaluate_nll<T: Real>(model: &Model<T>, batches: &[Batch]) -> Result<f64> {
    let mut total = 0.0;
    let mut tokens = 0;
    let mut tape = Tape::new();
    for batch in batches {
        tape.reset();
        let bm = model.bind(&tape, false, None)?;
        let loss = bm.loss(batch)?.item().to_f64().unwrap_or(f64::NAN);
        let n = batch.target_tokens();
        total += loss * n as f64;
        tokens += n;
    }
    if tokens == 0 {
        return Err(Error::Contract("no target tokens to evaluate".into()));
    }
    Ok(total / tokens as f64)
}

/// Model, optimizer and progress of one training run.
#[derive(Clone, Debug)]
pub struct Trainer<T: Real = f64> {
    pub model: Model<T>,
    pub optimizer: AdamW<T>,
    pub vocab: Vocab,
    pub config: TrainConfig,
    /// Completed optimizer steps.
    pub step: usize,
    pub best_dev_nll: Option<f64>,
}

impl<T: Real> Trainer<T> {
    pub fn new(model: Model<T>, vocab: Vocab, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        if vocab.len() != model.config.vocab_size {
            return Err(Error::Config(format!(
                "vocabulary has {} entries but the model expects {}",
                vocab.len(),
                model.config.vocab_size
            )));
        }
        let optimizer = AdamW::new(config.optimizer(), &model.params)?;
        Ok(Trainer {
            model,
            optimizer,
            vocab,
            config,
            step: 0,
            best_dev_nll: None,
        })
    }

    /// Fresh model from `model_config` seeded by the training seed.
    pub fn init(model_config: ModelConfig, vocab: Vocab, config: TrainConfig) -> Result<Self> {
        let model = Model::new(model_config, config.seed)?;
        Trainer::new(model, vocab, config)
    }

    /// Continues from a checkpoint; `config` replaces the stored training settings.
    pub fn resume(ckpt: Checkpoint<T>, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let mut optimizer = ckpt.optimizer;
        optimizer.config = config.optimizer();
        Ok(Trainer {
            model: ckpt.model,
            optimizer,
            vocab: ckpt.vocab,
            best_dev_nll: ckpt.manifest.metrics.get("best_dev_nll").copied(),
            step: ckpt.manifest.step,
            config,
        })
    }

    /// Forward, backward, clip and update on one batch.
    pub fn train_step(&mut self, batch: &Batch) -> Result<StepStats> {
        let tape = Tape::new();
        let dropout_seed = derive_seed(self.config.seed, DROPOUT_STREAM, self.step as u64);
        let bm = self.model.bind(&tape, true, Some(dropout_seed))?;
        let loss_var = bm.loss(batch)?;
        let loss = loss_var.item().to_f64().unwrap_or(f64::NAN);
        if !loss.is_finite() {
            return Err(Error::Numeric(format!("loss is {loss} at step {}", self.step)));
        }
        loss_var.backward()?;
        let mut grads = bm.params.grads();
        let grad_norm = global_norm(&grads);
        let clip_scale = if self.config.grad_clip_norm > 0.0 {
            clip_grad_norm(&mut grads, self.config.grad_clip_norm)
        } else {
            1.0
        };
        let lr = self.config.lr_at(self.step);
        self.optimizer
            .step_with_lr(&mut self.model.params, &grads, lr)
            .map_err(|e| match e {
                Error::Numeric(m) => Error::Numeric(format!("{m} at step {}", self.step)),
                other => other,
            })?;
        self.step += 1;
        Ok(StepStats {
            loss,
            tokens: batch.target_tokens(),
            grad_norm,
            clip_scale,
        })
    }

    /// Shuffled batches for `epoch`; the order depends only on the seed and epoch.
    pub fn epoch_batches(&self, samples: &[Sample], epoch: usize) -> Result<Vec<Batch>> {
        let seed = derive_seed(self.config.seed, SHUFFLE_STREAM, epoch as u64);
        make_batches(
            samples,
            self.config.batch_size,
            self.model.config.max_turns,
            self.model.config.max_sentence_len,
            Some(seed),
        )
    }

    /// Trains on each batch in order (stopping early at `max_steps`).
    pub fn train_epoch(&mut self, epoch: usize, batches: &[Batch]) -> Result<EpochStats> {
        let start = Instant::now();
        let (mut total, mut tokens, mut steps) = (0.0, 0usize, 0usize);
        for (i, batch) in batches.iter().enumerate() {
            if self.config.max_steps.is_some_and(|m| self.step >= m) {
                break;
            }
            let s = self.train_step(batch).map_err(|e| match e {
                Error::Numeric(m) => Error::Numeric(format!("{m} (epoch {epoch}, batch {i})")),
                other => other,
            })?;
            total += s.loss * s.tokens as f64;
            tokens += s.tokens;
            steps += 1;
        }
        let secs = start.elapsed().as_secs_f64();
        Ok(EpochStats {
            epoch,
            step: self.step,
            steps,
            train_nll: if tokens > 0 { total / tokens as f64 } else { f64::NAN },
            dev_nll: None,
            tokens,
            tokens_per_sec: if secs > 0.0 { tokens as f64 / secs } else { 0.0 },
        })
    }

    fn finished(&self, per_epoch: usize) -> bool {
        self.step >= per_epoch * self.config.epochs
            || self.config.max_steps.is_some_and(|m| self.step >= m)
    }

    /// Runs the remaining epochs, resuming mid-epoch from `self.step`.
    pub fn fit(
        &mut self,
        train: &[Sample],
        dev: &[Sample],
        log: &mut dyn FnMut(&EpochStats),
    ) -> Result<Vec<EpochStats>> {
        let per_epoch = train.len().div_ceil(self.config.batch_size);
        if per_epoch == 0 {
            return Err(Error::Contract("no training samples".into()));
        }
        let dev_batches = if dev.is_empty() {
            Vec::new()
        } else {
            make_batches(
                dev,
                self.config.batch_size,
                self.model.config.max_turns,
                self.model.config.max_sentence_len,
                None,
            )?
        };
        let mut history = Vec::new();
        while !self.finished(per_epoch) {
            let epoch = self.step / per_epoch;
            let offset = self.step % per_epoch;
            let batches = self.epoch_batches(train, epoch)?;
            let mut stats = self.train_epoch(epoch, &batches[offset..])?;
            let epoch_done = self.step.is_multiple_of(per_epoch);
            let validate = !dev_batches.is_empty()
                && (self.finished(per_epoch) || (epoch + 1).is_multiple_of(self.config.validate_every));
            if validate {
                let dev_nll = evaluate_nll(&self.model, &dev_batches)?;
                stats.dev_nll = Some(dev_nll);
                if self.best_dev_nll.is_none_or(|b| dev_nll < b) {
                    self.best_dev_nll = Some(dev_nll);
                    if let Some(dir) = &self.config.checkpoint_dir {
                        self.save(dir.join(BEST_DIR), &stats)?;
                    }
                }
            }
            if let Some(dir) = &self.config.checkpoint_dir {
                self.save(dir.join(LAST_DIR), &stats)?;
            }
            log(&stats);
            history.push(stats);
            if !epoch_done && !self.finished(per_epoch) {
                return Err(Error::Contract("epoch ended before its batches were consumed".into()));
            }
        }
        Ok(history)
    }

    pub fn save(&self, dir: impl AsRef<Path>, stats: &EpochStats) -> Result<Manifest> {
        let mut metrics = BTreeMap::new();
        if stats.train_nll.is_finite() {
            metrics.insert("train_nll".to_string(), stats.train_nll);
        }
        if let Some(d) = stats.dev_nll {
            metrics.insert("dev_nll".to_string(), d);
        }
        if let Some(b) = self.best_dev_nll {
            metrics.insert("best_dev_nll".to_string(), b);
        }
        let progress = Progress {
            step: self.step,
            epoch: stats.epoch,
            metrics,
        };
        save_checkpoint(dir, &self.model, &self.optimizer, &self.vocab, &self.config, &progress)
    }
}

#[cfg(test)]
mod tests;
