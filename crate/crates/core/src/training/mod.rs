//! Losses, Adam and the training loop.

mod adam;
mod loss;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use loss::{action_loss, infonce_loss, sample_negatives, total_loss, LossValue};

use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::compressor::compress;
use crate::datalog::{partition_history_recent, Interaction, ItemCatalog, ItemId, Splits, UserId};
use crate::error::{Error, Result};
use crate::evalmetrics::{evaluate, Protocol};
use crate::model::{assemble_sequence, Model, ModelConfig, TokenSequence};
use crate::scalar::Scalar;
use crate::seed::rng_for;
use crate::tensor::Tape;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub negatives: usize,
    /// Stop after this many validations without improvement.
    pub patience: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 5e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            epochs: 50,
            batch_size: 32,
            negatives: 200,
            patience: 10,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.negatives == 0 || self.batch_size == 0 {
            return Err(Error::Config(
                "negatives and batch_size must be >= 1".into(),
            ));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning_rate {} must be >= 0",
                self.learning_rate
            )));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{name} = {b} outside [0, 1)")));
            }
        }
        if !(self.adam_eps > 0.0) {
            return Err(Error::Config("adam_eps must be > 0".into()));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.adam_eps,
        }
    }
}

/// Compresses everything before the last `iLen` events of `context` and
/// assembles the model input whose final position predicts `next_item`.
pub fn context_sequence(
    cfg: &ModelConfig,
    user: UserId,
    context: &[Interaction],
    next_item: Option<ItemId>,
    catalog: &ItemCatalog,
) -> Result<TokenSequence> {
    let (history, recent) = partition_history_recent(context, cfg.max_recent)?;
    let plan = compress(history, catalog, cfg.max_buckets, cfg.max_items_per_bucket)?;
    assemble_sequence(cfg, user, &plan, recent, next_item, catalog)
}

/// Assembled sequences for each split.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainData {
    /// Context: all training events but the last; it is the final target.
    pub train: Vec<TokenSequence>,
    /// Context: training events; target: the validation event.
    pub val: Vec<TokenSequence>,
    /// Context: training and validation events; target: the test event.
    pub test: Vec<TokenSequence>,
}

fn held_out(
    cfg: &ModelConfig,
    user: UserId,
    before: Vec<Interaction>,
    part: &[Interaction],
    catalog: &ItemCatalog,
) -> Result<Option<TokenSequence>> {
    let Some((last, rest)) = part.split_last() else {
        return Ok(None);
    };
    let mut context = before;
    context.extend_from_slice(rest);
    if context.is_empty() {
        return Ok(None);
    }
    context_sequence(cfg, user, &context, Some(last.item), catalog).map(Some)
}

/// Builds training, validation and test inputs. Users without a usable
/// context in a split are left out of it.
pub fn build_data(cfg: &ModelConfig, splits: &Splits, catalog: &ItemCatalog) -> Result<TrainData> {
    let mut data = TrainData::default();
    for s in &splits.train {
        if let Some(seq) = held_out(cfg, s.user, Vec::new(), &s.events, catalog)? {
            data.train.push(seq);
        }
    }
    let events_of = |seq: Option<&crate::datalog::UserSequence>| {
        seq.map(|s| s.events.clone()).unwrap_or_default()
    };
    for s in &splits.val {
        let before = events_of(splits.train_of(s.user));
        if let Some(seq) = held_out(cfg, s.user, before, &s.events, catalog)? {
            data.val.push(seq);
        }
    }
    for s in &splits.test {
        let mut before = events_of(splits.train_of(s.user));
        before.extend(events_of(splits.val_of(s.user)));
        if let Some(seq) = held_out(cfg, s.user, before, &s.events, catalog)? {
            data.test.push(seq);
        }
    }
    Ok(data)
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_ndcg10: Option<f64>,
    pub wall_ms: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome<T: Scalar> {
    /// Parameters of the best validation epoch (the last epoch when there
    /// is no validation data).
    pub best: Model<T>,
    pub last: Model<T>,
    pub log: Vec<EpochLog>,
    pub best_epoch: usize,
    pub best_val: Option<f64>,
}

/// One optimisation step on `batch`; returns the loss before the update.
pub fn train_step<T: Scalar>(
    model: &mut Model<T>,
    state: &mut AdamState<T>,
    batch: &[TokenSequence],
    tcfg: &TrainConfig,
    rng: &mut crate::seed::Rng,
) -> Result<LossValue> {
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, true);
    let (loss, value) = total_loss(model, &mut tape, &bound, batch, tcfg.negatives, rng)?;
    if !value.total.is_finite() {
        return Err(Error::NonFinite("training loss".into()));
    }
    tape.backward(loss)?;
    let grads: Vec<_> = bound.vars.iter().map(|&v| tape.grad(v)).collect();
    adam_step(&mut model.params, &grads, &model.names, state, &tcfg.adam())?;
    Ok(value)
}

/// Seeded mini-batch training with per-epoch validation nDCG@10 and early
/// exit after `patience` epochs without improvement.
pub fn train<T: Scalar>(
    mut model: Model<T>,
    tcfg: &TrainConfig,
    data: &TrainData,
) -> Result<TrainOutcome<T>> {
    tcfg.validate()?;
    let trainable: Vec<&TokenSequence> = data
        .train
        .iter()
        .filter(|s| !s.item_targets.is_empty())
        .collect();
    if trainable.is_empty() {
        return Err(Error::EmptyInput(
            "no training sequences with targets".into(),
        ));
    }
    let mut order_rng = rng_for(tcfg.seed, "batch-order");
    let mut neg_rng = rng_for(tcfg.seed, "negatives");
    let mut state = AdamState::new(&model.params);
    let mut order: Vec<usize> = (0..trainable.len()).collect();
    let mut log = Vec::new();
    let mut best = model.clone();
    let mut best_val: Option<f64> = None;
    let mut best_epoch = 0;
    let mut stale = 0;
    for epoch in 1..=tcfg.epochs {
        let start = Instant::now();
        order.shuffle(&mut order_rng);
        let mut loss_sum = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(tcfg.batch_size) {
            let batch: Vec<TokenSequence> = chunk.iter().map(|&i| trainable[i].clone()).collect();
            loss_sum += train_step(&mut model, &mut state, &batch, tcfg, &mut neg_rng)?.total;
            batches += 1;
        }
        let val = if data.val.is_empty() {
            None
        } else {
            Some(evaluate(&model, &data.val, Protocol::Full)?.metrics.n10)
        };
        log.push(EpochLog {
            epoch,
            train_loss: loss_sum / batches as f64,
            val_ndcg10: val,
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
        });
        match val {
            Some(v) if best_val.is_none_or(|b| v > b) => {
                best_val = Some(v);
                best_epoch = epoch;
                best = model.clone();
                stale = 0;
            }
            Some(_) => {
                stale += 1;
                if stale >= tcfg.patience {
                    break;
                }
            }
            None => {
                best_epoch = epoch;
                best = model.clone();
            }
        }
    }
    Ok(TrainOutcome {
        best,
        last: model,
        log,
        best_epoch,
        best_val,
    })
}
