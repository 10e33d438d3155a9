use rand::Rng;

use crate::datalog::ItemId;
use crate::error::{Error, Result};
use crate::model::{Bound, Model, TokenSequence};
use crate::scalar::Scalar;
use crate::seed::Rng as SeedRng;
use crate::tensor::{Tape, Var};

/// `k` ids drawn uniformly with replacement from `[0, n)` minus `positive`.
pub fn sample_negatives(
    n: usize,
    k: usize,
    positive: ItemId,
    rng: &mut SeedRng,
) -> Result<Vec<ItemId>> {
    if n < 2 {
        return Err(Error::Config(format!(
            "negative sampling needs at least 2 items, got {n}"
        )));
    }
    if positive as usize >= n {
        return Err(Error::UnknownItem(positive));
    }
    Ok((0..k)
        .map(|_| {
            let r = rng.random_range(0..n as ItemId - 1);
            if r >= positive {
                r + 1
            } else {
                r
            }
        })
        .collect())
}

/// Mean over rows of `h` of `-log softmax([s_pos, s_neg..] / τ)[0]` with
/// `s_c = h_row · table[c]`.
pub fn infonce_loss<T: Scalar>(
    tape: &mut Tape<T>,
    h: Var,
    table: Var,
    positives: &[ItemId],
    negatives: &[Vec<ItemId>],
    tau: f64,
) -> Result<Var> {
    if !(tau > 0.0) {
        return Err(Error::Config(format!("temperature must be > 0, got {tau}")));
    }
    if positives.len() != negatives.len() || positives.is_empty() {
        return Err(Error::shape(
            "infonce",
            format!(
                "{} positives, {} negative lists",
                positives.len(),
                negatives.len()
            ),
        ));
    }
    let k = negatives[0].len();
    let mut ids = Vec::with_capacity(positives.len() * (k + 1));
    for (&p, negs) in positives.iter().zip(negatives) {
        if negs.len() != k {
            return Err(Error::shape(
                "infonce",
                format!("negative lists of {} and {k}", negs.len()),
            ));
        }
        if negs.contains(&p) {
            return Err(Error::Invalid(format!("positive {p} among its negatives")));
        }
        ids.push(p as usize);
        ids.extend(negs.iter().map(|&n| n as usize));
    }
    let logits = tape.gather_dot(h, table, ids)?;
    let logits = tape.scale(logits, T::lit(1.0 / tau))?;
    let logp = tape.log_softmax(logits)?;
    let pos = tape.pick_cols(logp, vec![0; positives.len()])?;
    let m = tape.mean(pos)?;
    tape.scale(m, -T::one())
}

/// Mean cross-entropy of `softmax(h · w + b)` against `labels`.
pub fn action_loss<T: Scalar>(
    tape: &mut Tape<T>,
    h: Var,
    w: Var,
    b: Var,
    labels: &[u32],
) -> Result<Var> {
    let t = tape.value(w).cols();
    if let Some(&bad) = labels.iter().find(|&&a| a as usize >= t) {
        return Err(Error::Invalid(format!(
            "action label {bad} outside [0, {t})"
        )));
    }
    let logits = tape.matmul(h, w)?;
    let logits = tape.add_row(logits, b)?;
    let logp = tape.log_softmax(logits)?;
    let picked = tape.pick_cols(logp, labels.iter().map(|&a| a as usize).collect())?;
    let m = tape.mean(picked)?;
    tape.scale(m, -T::one())
}

/// Values of the loss terms of one batch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossValue {
    pub item: f64,
    pub action: Option<f64>,
    pub total: f64,
}

/// Item InfoNCE over every item-target position plus, when the action head
/// is on and the batch has action targets, the action cross-entropy.
/// Negatives are drawn per target position.
pub fn total_loss<T: Scalar>(
    model: &Model<T>,
    tape: &mut Tape<T>,
    bound: &Bound,
    batch: &[TokenSequence],
    negatives: usize,
    rng: &mut SeedRng,
) -> Result<(Var, LossValue)> {
    let enc = model.encode(tape, bound, batch)?;
    let mut item_rows = Vec::new();
    let mut positives = Vec::new();
    let mut action_rows = Vec::new();
    let mut labels = Vec::new();
    for (b, seq) in batch.iter().enumerate() {
        for &(pos, item) in &seq.item_targets {
            item_rows.push(enc.row(b, pos));
            positives.push(item);
        }
        for &(pos, a) in &seq.action_targets {
            action_rows.push(enc.row(b, pos));
            labels.push(a);
        }
    }
    if positives.is_empty() {
        return Err(Error::EmptyInput("batch has no item targets".into()));
    }
    let n = model.cfg.item_vocab;
    let negs = positives
        .iter()
        .map(|&p| sample_negatives(n, negatives, p, rng))
        .collect::<Result<Vec<_>>>()?;
    let h_item = tape.gather_rows(enc.h, item_rows)?;
    let item = infonce_loss(
        tape,
        h_item,
        model.item_table(bound),
        &positives,
        &negs,
        model.cfg.temperature,
    )?;
    let item_value = tape.value(item).item().as_f64();
    if !model.cfg.use_action_head || labels.is_empty() {
        return Ok((
            item,
            LossValue {
                item: item_value,
                action: None,
                total: item_value,
            },
        ));
    }
    let h_act = tape.gather_rows(enc.h, action_rows)?;
    let (w, b) = model.action_head(bound);
    let action = action_loss(tape, h_act, w, b, &labels)?;
    let total = tape.add(item, action)?;
    Ok((
        total,
        LossValue {
            item: item_value,
            action: Some(tape.value(action).item().as_f64()),
            total: tape.value(total).item().as_f64(),
        },
    ))
}
