//! Teacher-forced training with Adam under the Noam schedule, plus
//! checkpointing and the metrics log.

pub mod checkpoint;
pub mod gradcheck;
pub mod loss;
pub mod optim;
#[cfg(test)]
mod tests;

use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, Counters};
pub use loss::{batch_gradients, example_loss, turn_loss, BatchGradients, DropoutSeed, LossWeights, TokenCounts};
pub use optim::{clip_global_norm, noam_lr, AdamConfig, AdamState};

use crate::data::{make_batches, Corpus, Example, Vocab};
use crate::dialogue::db::{DbRecord, Ontology};
use crate::dialogue::DialogueModel;
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalOptions, EvalReport};
use crate::exec::ExecMode;
use crate::model::{grid, Model};
use crate::numerics::rng::streams;
use crate::numerics::Rng;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LrSchedule {
    #[default]
    Noam,
    Constant,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: u64,
    pub warmup_steps: u64,
    pub schedule: LrSchedule,
    /// Multiplier on the Noam rate.
    pub lr_scale: f64,
    /// Rate used by the constant schedule.
    pub constant_lr: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    /// Global gradient-norm bound; 0 disables clipping.
    pub grad_clip: f64,
    pub bspan_weight: f64,
    pub response_weight: f64,
    /// Evaluate on the dev set every this many epochs; 0 never.
    pub eval_every: u64,
    /// Accept a warmup outside the published grid.
    pub allow_off_grid: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            epochs: 54,
            warmup_steps: 4000,
            schedule: LrSchedule::Noam,
            lr_scale: 1.0,
            constant_lr: 1e-3,
            adam_beta1: 0.9,
            adam_beta2: 0.98,
            adam_eps: 1e-9,
            seed: 0,
            grad_clip: 5.0,
            bspan_weight: 1.0,
            response_weight: 1.0,
            eval_every: 1,
            allow_off_grid: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if self.warmup_steps == 0 {
            return bad("warmup_steps must be at least 1".into());
        }
        if !self.allow_off_grid && !grid::WARMUP.contains(&self.warmup_steps) {
            return bad(format!(
                "warmup_steps {} is not one of {:?} (set allow_off_grid to override)",
                self.warmup_steps,
                grid::WARMUP
            ));
        }
        for (name, b) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&b) {
                return bad(format!("{name} must be in [0, 1), got {b}"));
            }
        }
        let positive = [
            ("adam_eps", self.adam_eps),
            ("lr_scale", self.lr_scale),
            ("constant_lr", self.constant_lr),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("{name} must be positive, got {v}"));
            }
        }
        let non_negative = [
            ("grad_clip", self.grad_clip),
            ("bspan_weight", self.bspan_weight),
            ("response_weight", self.response_weight),
        ];
        for (name, v) in non_negative {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be non-negative, got {v}"));
            }
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: self.adam_eps,
        }
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights {
            bspan: self.bspan_weight,
            response: self.response_weight,
        }
    }

    pub fn learning_rate(&self, step: u64, d_model: usize) -> Result<f64> {
        match self.schedule {
            LrSchedule::Noam => Ok(self.lr_scale * noam_lr(step, d_model, self.warmup_steps)?),
            LrSchedule::Constant => Ok(self.constant_lr),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: u64,
    pub step: u64,
    /// Mean batch loss over the epoch.
    pub loss: f64,
}

/// Model, optimizer state and progress counters for one training run.
pub struct Trainer {
    model: Model,
    vocab: Vocab,
    config: TrainConfig,
    adam: AdamState,
    counters: Counters,
    best_dev_f1: Option<f64>,
    examples: Vec<Example>,
    exec: ExecMode,
}

impl Trainer {
    pub fn new(model: Model, vocab: Vocab, config: TrainConfig, examples: Vec<Example>, exec: ExecMode) -> Result<Self> {
        config.validate()?;
        if examples.is_empty() {
            return Err(Error::InvalidArgument("no training examples".into()));
        }
        if model.config().vocab_size != vocab.len() {
            return Err(Error::Config("model and vocabulary sizes differ".into()));
        }
        let adam = AdamState::new(model.params());
        Ok(Self {
            model,
            vocab,
            config,
            adam,
            counters: Counters::default(),
            best_dev_f1: None,
            examples,
            exec,
        })
    }

    /// Continues a run from `ckpt`; `examples` must be the ones it started with.
    pub fn resume(ckpt: Checkpoint, examples: Vec<Example>, exec: ExecMode) -> Result<Self> {
        let model = ckpt.model()?;
        let mut t = Self::new(model, ckpt.vocab, ckpt.train_config, examples, exec)?;
        t.adam = ckpt.adam;
        t.counters = ckpt.counters;
        t.best_dev_f1 = ckpt.best_dev_f1;
        Ok(t)
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn counters(&self) -> Counters {
        self.counters
    }

    pub fn examples(&self) -> &[Example] {
        &self.examples
    }

    pub fn is_done(&self) -> bool {
        self.counters.epoch >= self.config.epochs
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            model_config: self.model.config().clone(),
            train_config: self.config.clone(),
            vocab: self.vocab.clone(),
            params: self.model.params().clone(),
            adam: self.adam.clone(),
            counters: self.counters,
            best_dev_f1: self.best_dev_f1,
        }
    }

    pub fn dialogue_model(&self) -> Result<DialogueModel> {
        DialogueModel::new(self.model.clone(), self.vocab.clone())
    }

    /// Example indices of each batch of `epoch`, in order.
    pub fn epoch_batches(&self, epoch: u64) -> Result<Vec<Vec<usize>>> {
        let mut rng = Rng::derive(self.config.seed, streams::SHUFFLE, epoch);
        let batches = make_batches(&self.examples, self.vocab.pad(), self.config.batch_size, &mut rng)?;
        Ok(batches.into_iter().map(|b| b.example_indices).collect())
    }

    /// One optimizer step on the given examples; returns the batch loss.
    pub fn step(&mut self, indices: &[usize]) -> Result<f64> {
        let step = self.counters.step + 1;
        let batch: Vec<&Example> = indices.iter().map(|&i| &self.examples[i]).collect();
        let dropout = Some(DropoutSeed {
            seed: self.config.seed,
            step,
        });
        let mut out = batch_gradients(&self.model, &self.vocab, &batch, self.config.weights(), dropout, self.exec)
            .map_err(|e| match e {
                Error::NonFinite { .. } => Error::Diverged { step },
                other => other,
            })?;
        if !out.loss.is_finite() || !out.grads.is_finite() {
            return Err(Error::Diverged { step });
        }
        clip_global_norm(&mut out.grads, self.config.grad_clip);
        let lr = self.config.learning_rate(step, self.model.config().d_model)?;
        self.adam
            .step(self.model.params_mut(), &out.grads, lr, self.config.adam())?;
        self.counters.step = step;
        Ok(out.loss)
    }

    /// Trains until the current epoch ends or the step counter reaches
    /// `stop_at_step`. Returns the epoch's stats if it completed.
    pub fn run_epoch(&mut self, stop_at_step: Option<u64>) -> Result<Option<EpochStats>> {
        if self.is_done() {
            return Ok(None);
        }
        let batches = self.epoch_batches(self.counters.epoch)?;
        while (self.counters.batch_in_epoch as usize) < batches.len() {
            if stop_at_step.is_some_and(|s| self.counters.step >= s) {
                return Ok(None);
            }
            let loss = self.step(&batches[self.counters.batch_in_epoch as usize])?;
            self.counters.epoch_loss += loss;
            self.counters.batch_in_epoch += 1;
        }
        let stats = EpochStats {
            epoch: self.counters.epoch + 1,
            step: self.counters.step,
            loss: self.counters.epoch_loss / batches.len() as f64,
        };
        self.counters.epoch += 1;
        self.counters.batch_in_epoch = 0;
        self.counters.epoch_loss = 0.0;
        Ok(Some(stats))
    }
}

/// Held-out data for model selection.
pub struct DevSet<'a> {
    pub corpus: &'a Corpus,
    pub db: &'a [DbRecord],
    pub ontology: &'a Ontology,
    pub options: EvalOptions,
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsLine {
    pub epoch: u64,
    pub step: u64,
    pub loss: f64,
    pub dev_bleu: Option<f64>,
    pub dev_success_f1: Option<f64>,
}

#[derive(Default)]
pub struct FitOptions<'a> {
    pub dev: Option<DevSet<'a>>,
    /// Receives `metrics.jsonl`, `last.ckpt` and `best.ckpt`.
    pub out_dir: Option<PathBuf>,
    /// Stop once this many optimizer steps have run (for interrupted runs).
    pub stop_at_step: Option<u64>,
}

pub struct FitSummary {
    pub history: Vec<MetricsLine>,
    pub last_dev: Option<EvalReport>,
}

fn append_line(path: &Path, line: &MetricsLine) -> Result<()> {
    let mut f = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    writeln!(f, "{}", serde_json::to_string(line)?).map_err(|e| Error::io(path, e))
}

/// Runs the remaining epochs, evaluating and checkpointing as configured.
pub fn fit(trainer: &mut Trainer, options: &FitOptions<'_>) -> Result<FitSummary> {
    if let Some(dir) = &options.out_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut history = Vec::new();
    let mut last_dev = None;
    while !trainer.is_done() {
        let Some(stats) = trainer.run_epoch(options.stop_at_step)? else {
            break;
        };
        let mut line = MetricsLine {
            epoch: stats.epoch,
            step: stats.step,
            loss: stats.loss,
            dev_bleu: None,
            dev_success_f1: None,
        };
        let every = trainer.config.eval_every;
        let mut improved = false;
        if let Some(dev) = options.dev.as_ref().filter(|_| every > 0 && stats.epoch % every == 0) {
            let report = evaluate(&trainer.dialogue_model()?, dev.corpus, dev.db, dev.ontology, &dev.options)?;
            line.dev_bleu = Some(report.bleu);
            line.dev_success_f1 = Some(report.success_f1);
            if trainer.best_dev_f1.is_none_or(|b| report.success_f1 > b) {
                trainer.best_dev_f1 = Some(report.success_f1);
                improved = true;
            }
            last_dev = Some(report);
        }
        log::info!(
            "epoch {} step {} loss {:.5} dev bleu {:?} dev f1 {:?}",
            line.epoch,
            line.step,
            line.loss,
            line.dev_bleu,
            line.dev_success_f1
        );
        if let Some(dir) = &options.out_dir {
            append_line(&dir.join("metrics.jsonl"), &line)?;
            let ckpt = trainer.checkpoint();
            save_checkpoint(&dir.join("last.ckpt"), &ckpt)?;
            if improved {
                save_checkpoint(&dir.join("best.ckpt"), &ckpt)?;
            }
        }
        history.push(line);
    }
    if let (Some(dir), Some(stop)) = (&options.out_dir, options.stop_at_step) {
        if trainer.counters.step >= stop && !trainer.is_done() {
            save_checkpoint(&dir.join("last.ckpt"), &trainer.checkpoint())?;
        }
    }
    Ok(FitSummary { history, last_dev })
}
