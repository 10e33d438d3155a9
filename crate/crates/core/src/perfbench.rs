//! Analytic backbone cost model, forward-pass timing and compression
//! accounting.

use std::time::Instant;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::compressor::{compress, Bucket, BucketEntry};
use crate::datalog::{partition_history_recent, ItemCatalog, UserId, UserSequence};
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig, Special, Token, TokenSequence};
use crate::seed::rng_for;

/// Published per-batch latency ratio of the long uncompressed run over the
/// compressed run at a quarter of its length, printed next to ours.
pub const REFERENCE_TIME_RATIO: f64 = 11.10 / 1.87;
/// Published best relative accuracy gain at equal sequence length.
pub const REFERENCE_ACCURACY_GAIN: f64 = 0.3914;

/// Attention `H·L²·D` plus feed-forward `H·L·D²·r`, constants dropped.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostBreakdown {
    pub layers: u64,
    pub seq_len: u64,
    pub hidden_dim: u64,
    pub ffn_expansion: u64,
    pub attention_cost: u64,
    pub ffn_cost: u64,
    pub total: u64,
}

pub fn flop_cost(
    layers: usize,
    seq_len: usize,
    hidden_dim: usize,
    ffn_expansion: usize,
) -> CostBreakdown {
    let (h, l, d, r) = (
        layers as u64,
        seq_len as u64,
        hidden_dim as u64,
        ffn_expansion as u64,
    );
    let attention_cost = h * l * l * d;
    let ffn_cost = h * l * d * d * r;
    CostBreakdown {
        layers: h,
        seq_len: l,
        hidden_dim: d,
        ffn_expansion: r,
        attention_cost,
        ffn_cost,
        total: attention_cost + ffn_cost,
    }
}

/// `flop_cost(long).total / flop_cost(short).total` for the same backbone.
pub fn flop_ratio(
    layers: usize,
    long: usize,
    short: usize,
    hidden_dim: usize,
    ffn_expansion: usize,
) -> f64 {
    flop_cost(layers, long, hidden_dim, ffn_expansion).total as f64
        / flop_cost(layers, short, hidden_dim, ffn_expansion).total as f64
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimingStats {
    pub mean_ms: f64,
    pub std_ms: f64,
    pub min_ms: f64,
    pub warmup: usize,
    pub reps: usize,
}

impl TimingStats {
    pub fn from_samples(samples_ms: &[f64], warmup: usize) -> Self {
        let n = samples_ms.len() as f64;
        let mean = samples_ms.iter().sum::<f64>() / n;
        let var = samples_ms
            .iter()
            .map(|s| (s - mean) * (s - mean))
            .sum::<f64>()
            / n;
        Self {
            mean_ms: mean,
            std_ms: var.sqrt(),
            min_ms: samples_ms.iter().copied().fold(f64::INFINITY, f64::min),
            warmup,
            reps: samples_ms.len(),
        }
    }
}

/// Shape of a synthetic timing batch: total padded length and how many
/// history buckets (each of `bucket_items` items) it carries.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BenchShape {
    pub len: usize,
    pub buckets: usize,
    pub bucket_items: usize,
}

/// Random sequences of exactly `shape.len` tokens laid out like real input.
pub fn random_batch(
    cfg: &ModelConfig,
    shape: BenchShape,
    batch: usize,
    seed: u64,
) -> Result<Vec<TokenSequence>> {
    let fixed = 4 + shape.buckets;
    if shape.len <= fixed || shape.len > cfg.max_len() {
        return Err(Error::Config(format!(
            "bench length {} must lie in {}..={} for this config",
            shape.len,
            fixed + 1,
            cfg.max_len()
        )));
    }
    if shape.buckets > 0 && shape.bucket_items == 0 {
        return Err(Error::Config(
            "history buckets need at least one item".into(),
        ));
    }
    let mut rng = rng_for(seed, "bench-batch");
    let mut out = Vec::with_capacity(batch);
    for _ in 0..batch {
        let user = rng.random_range(0..cfg.user_vocab as UserId);
        let mut tokens = vec![
            Token::Special(Special::SegUser),
            Token::User(user),
            Token::Special(Special::SegHist),
        ];
        let mut buckets = Vec::with_capacity(shape.buckets);
        for j in 0..shape.buckets {
            let items = (0..shape.bucket_items)
                .map(|t| BucketEntry {
                    item: rng.random_range(0..cfg.item_vocab as u32),
                    ts: t as i64,
                    seq_pos: t as u32,
                })
                .collect();
            buckets.push(Bucket {
                category: rng.random_range(0..cfg.category_vocab as u32),
                items,
            });
            tokens.push(Token::History(j));
        }
        tokens.push(Token::Special(Special::SegRecent));
        while tokens.len() < shape.len {
            if tokens.len() % 2 == fixed % 2 {
                tokens.push(Token::Item {
                    item: rng.random_range(0..cfg.item_vocab as u32),
                    cats: vec![rng.random_range(0..cfg.category_vocab as u32)],
                });
            } else {
                tokens.push(Token::Action(rng.random_range(0..cfg.action_vocab as u32)));
            }
        }
        out.push(TokenSequence {
            user,
            tokens,
            buckets,
            item_targets: Vec::new(),
            action_targets: Vec::new(),
        });
    }
    Ok(out)
}

/// Wall-clock of inference forward passes (history pooling included) over
/// one random batch, after `warmup` untimed passes.
pub fn time_forward(
    cfg: &ModelConfig,
    shape: BenchShape,
    batch: usize,
    warmup: usize,
    reps: usize,
    seed: u64,
) -> Result<TimingStats> {
    if reps < 5 {
        return Err(Error::Config(format!(
            "need at least 5 timed repetitions, got {reps}"
        )));
    }
    let model = Model::<f32>::new(cfg.clone(), seed)?;
    let seqs = random_batch(cfg, shape, batch, seed)?;
    let mut samples = Vec::with_capacity(reps);
    for i in 0..warmup + reps {
        let start = Instant::now();
        let h = model.encode_last(&seqs)?;
        let ms = start.elapsed().as_secs_f64() * 1e3;
        if !h.is_finite() {
            return Err(Error::NonFinite("benchmark forward output".into()));
        }
        if i >= warmup {
            samples.push(ms);
        }
    }
    Ok(TimingStats::from_samples(&samples, warmup))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UserCompression {
    pub user: UserId,
    pub raw_events: usize,
    pub history_events: usize,
    /// Bucket members summed over buckets.
    pub retained: usize,
    pub buckets: usize,
    pub recent: usize,
    /// Recent-segment tokens, `2 · recent`.
    pub recent_slen: usize,
    /// `4 + buckets + 2 · recent`.
    pub total_slen: usize,
    /// `4 + 2 · raw_events`.
    pub uncompressed_slen: usize,
    pub flop_ratio: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompressionReport {
    pub users: usize,
    pub mean_raw_events: f64,
    pub mean_retained: f64,
    pub mean_buckets: f64,
    pub mean_total_slen: f64,
    pub max_total_slen: usize,
    pub mean_uncompressed_slen: f64,
    /// Summed uncompressed cost over summed compressed cost.
    pub flop_ratio: f64,
    pub per_user: Vec<UserCompression>,
}

/// Sequence lengths and backbone cost with and without compression, for
/// a backbone with `layers`, `hidden_dim` and `ffn_expansion`.
#[allow(clippy::too_many_arguments)]
pub fn compression_report(
    seqs: &[UserSequence],
    catalog: &ItemCatalog,
    max_buckets: usize,
    max_items: usize,
    i_len: usize,
    layers: usize,
    hidden_dim: usize,
    ffn_expansion: usize,
) -> Result<CompressionReport> {
    if seqs.is_empty() {
        return Err(Error::EmptyInput("no sequences to report on".into()));
    }
    let mut per_user = Vec::with_capacity(seqs.len());
    let (mut cost_full, mut cost_comp) = (0u128, 0u128);
    for s in seqs {
        let (history, recent) = partition_history_recent(&s.events, i_len)?;
        let plan = compress(history, catalog, max_buckets, max_items)?;
        let total_slen = 4 + plan.len() + 2 * recent.len();
        let uncompressed_slen = 4 + 2 * s.len();
        let full = flop_cost(layers, uncompressed_slen, hidden_dim, ffn_expansion).total;
        let comp = flop_cost(layers, total_slen, hidden_dim, ffn_expansion).total;
        cost_full += full as u128;
        cost_comp += comp as u128;
        per_user.push(UserCompression {
            user: s.user,
            raw_events: s.len(),
            history_events: history.len(),
            retained: plan.retained(),
            buckets: plan.len(),
            recent: recent.len(),
            recent_slen: 2 * recent.len(),
            total_slen,
            uncompressed_slen,
            flop_ratio: full as f64 / comp as f64,
        });
    }
    let n = per_user.len() as f64;
    let mean =
        |f: &dyn Fn(&UserCompression) -> usize| per_user.iter().map(f).sum::<usize>() as f64 / n;
    Ok(CompressionReport {
        users: per_user.len(),
        mean_raw_events: mean(&|u| u.raw_events),
        mean_retained: mean(&|u| u.retained),
        mean_buckets: mean(&|u| u.buckets),
        mean_total_slen: mean(&|u| u.total_slen),
        max_total_slen: per_user.iter().map(|u| u.total_slen).max().unwrap_or(0),
        mean_uncompressed_slen: mean(&|u| u.uncompressed_slen),
        flop_ratio: cost_full as f64 / cost_comp as f64,
        per_user,
    })
}
