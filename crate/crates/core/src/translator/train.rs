use std::collections::VecDeque;
use std::path::Path;

use prmt_neural::optim::{inverse_sqrt_lr, Adam, AdamConfig};
use prmt_neural::{ParamStore, RngState, Tape};
use serde::{Deserialize, Serialize};

use super::{Example, ForwardOpts, Translator, TranslatorConfig};
use crate::data::Vocab;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NmtTrainConfig {
    /// Sentences per batch.
    pub batch_size: usize,
    pub epochs: usize,
    /// Peak learning rate of the inverse square-root schedule.
    pub learning_rate: f64,
    pub warmup_steps: u64,
    pub label_smoothing: f64,
    pub seed: u64,
    pub clip_grad_norm: Option<f64>,
    /// Number of final epoch snapshots averaged into the returned model.
    pub average_last: usize,
    pub text_only: bool,
}

impl Default for NmtTrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            epochs: 12,
            learning_rate: 2e-3,
            warmup_steps: 300,
            label_smoothing: 0.1,
            seed: 0,
            clip_grad_norm: None,
            average_last: 5,
            text_only: false,
        }
    }
}

impl NmtTrainConfig {
    pub fn paper() -> Self {
        Self { warmup_steps: 2000, learning_rate: 5e-4, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.epochs == 0 || self.average_last == 0 {
            return Err(Error::Config("batch size, epochs and average_last must be positive".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config(format!("learning rate {} must be positive", self.learning_rate)));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::Config(format!("label smoothing {} outside [0, 1)", self.label_smoothing)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NmtEpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub valid_loss: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct NmtTrainResult {
    /// Average of the last `average_last` epoch snapshots.
    pub model: Translator,
    pub log: Vec<NmtEpochLog>,
    pub steps: u64,
}

pub fn train_translator(
    model_cfg: TranslatorConfig,
    vocab: Vocab,
    train: &[Example],
    valid: &[Example],
    cfg: &NmtTrainConfig,
) -> Result<NmtTrainResult> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Domain("cannot train on an empty corpus".into()));
    }
    let root = RngState::new(cfg.seed);
    let mut model = Translator::new(model_cfg, vocab, cfg.seed)?;
    let mut order_rng = root.derive(1);
    let mut drop_rng = root.derive(2);
    let mut adam = Adam::new(&model.params, AdamConfig::default());
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut snapshots: VecDeque<ParamStore> = VecDeque::with_capacity(cfg.average_last);
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut step = 0u64;
    for epoch in 0..cfg.epochs {
        order_rng.shuffle(&mut order);
        let (mut total, mut tokens) = (0.0, 0usize);
        for idx in order.chunks(cfg.batch_size) {
            step += 1;
            let batch: Vec<&Example> = idx.iter().map(|&i| &train[i]).collect();
            let grads = {
                let mut tape = Tape::new(&model.params);
                let opts = ForwardOpts::train(cfg.text_only);
                let (loss, n) = model.loss_on_tape(&mut tape, &batch, cfg.label_smoothing, opts, &mut drop_rng)?;
                let value = tape.scalar(loss);
                if !value.is_finite() {
                    return Err(Error::Diverged { step, msg: format!("translator loss {value}") });
                }
                total += value * n as f64;
                tokens += n;
                tape.backward(loss)
            };
            model.params.zero_grad();
            grads.accumulate_into(&mut model.params);
            if let Some(c) = cfg.clip_grad_norm {
                model.params.clip_grad_norm(c);
            }
            let lr = inverse_sqrt_lr(step, cfg.learning_rate, cfg.warmup_steps);
            adam.step(&mut model.params, lr)
                .map_err(|e| Error::Diverged { step, msg: e.to_string() })?;
        }
        if snapshots.len() == cfg.average_last {
            snapshots.pop_front();
        }
        snapshots.push_back(model.params.clone());
        let valid_loss = if valid.is_empty() {
            None
        } else {
            Some(model.eval_loss(valid, cfg.label_smoothing, cfg.text_only)?)
        };
        let entry = NmtEpochLog { epoch: epoch + 1, train_loss: total / tokens as f64, valid_loss };
        log::debug!("nmt epoch {}: {:?}", entry.epoch, entry);
        log.push(entry);
    }
    let refs: Vec<&ParamStore> = snapshots.iter().collect();
    model.params = ParamStore::average(&refs)?;
    Ok(NmtTrainResult { model, log, steps: step })
}

/// Arithmetic mean of every parameter across models of one architecture.
pub fn average_models(models: &[&Translator]) -> Result<Translator> {
    let first = models
        .first()
        .ok_or_else(|| Error::Config("cannot average zero checkpoints".into()))?;
    if let Some(m) = models.iter().find(|m| m.cfg != first.cfg) {
        return Err(Error::Config(format!("config mismatch: {:?} vs {:?}", first.cfg, m.cfg)));
    }
    let stores: Vec<&ParamStore> = models.iter().map(|m| &m.params).collect();
    let mut out = (*first).clone();
    out.params = ParamStore::average(&stores)?;
    Ok(out)
}

pub fn average_checkpoints<P: AsRef<Path>>(paths: &[P]) -> Result<Translator> {
    let models = paths.iter().map(Translator::load).collect::<Result<Vec<_>>>()?;
    average_models(&models.iter().collect::<Vec<_>>())
}
