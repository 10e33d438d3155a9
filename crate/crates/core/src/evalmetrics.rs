//! Ranking metrics and the evaluation loop.

use std::fmt;
use std::str::FromStr;

use rand::seq::index;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest, Sha256};

use crate::datalog::ItemId;
use crate::error::{Error, Result};
use crate::model::{Model, TokenSequence};
use crate::scalar::Scalar;
use crate::seed::rng_for;

pub const CUTOFFS: [usize; 5] = [1, 10, 20, 100, 200];
const EVAL_BATCH: usize = 64;

/// 1-based rank of `scores[target]`: one plus the number of strictly
/// higher scores plus the number of equal scores at smaller indices.
pub fn rank_of_target<T: Scalar>(scores: &[T], target: usize) -> Result<usize> {
    if target >= scores.len() {
        return Err(Error::Invalid(format!(
            "target {target} of {} candidates",
            scores.len()
        )));
    }
    if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
        return Err(Error::NonFinite(format!("score of candidate {i}")));
    }
    let t = scores[target];
    let ahead = scores
        .iter()
        .enumerate()
        .filter(|&(i, &s)| s > t || (s == t && i < target))
        .count();
    Ok(ahead + 1)
}

pub fn ndcg_at_k(rank: usize, k: usize) -> f64 {
    if rank >= 1 && rank <= k {
        1.0 / ((rank + 1) as f64).log2()
    } else {
        0.0
    }
}

pub fn mrr(rank: usize) -> f64 {
    1.0 / rank as f64
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Protocol {
    /// Rank against every item.
    Full,
    /// Rank against the target plus `k` distinct sampled non-targets.
    Sampled { k: usize, seed: u64 },
}

impl fmt::Display for Protocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Protocol::Full => write!(f, "full"),
            Protocol::Sampled { k, .. } => write!(f, "sampled:{k}"),
        }
    }
}

impl FromStr for Protocol {
    type Err = Error;

    /// `full` or `sampled:K`; the sampling seed is set separately.
    fn from_str(s: &str) -> Result<Self> {
        if s == "full" {
            return Ok(Protocol::Full);
        }
        let k = s
            .strip_prefix("sampled:")
            .and_then(|k| k.parse::<usize>().ok())
            .filter(|&k| k >= 1)
            .ok_or_else(|| Error::Config(format!("protocol {s:?} is not full or sampled:K")))?;
        Ok(Protocol::Sampled { k, seed: 0 })
    }
}

impl Protocol {
    pub fn with_seed(self, seed: u64) -> Self {
        match self {
            Protocol::Sampled { k, .. } => Protocol::Sampled { k, seed },
            full => full,
        }
    }
}

impl Serialize for Protocol {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for Protocol {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Per-user means of each metric.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    #[serde(rename = "N@1")]
    pub n1: f64,
    #[serde(rename = "N@10")]
    pub n10: f64,
    #[serde(rename = "N@20")]
    pub n20: f64,
    #[serde(rename = "N@100")]
    pub n100: f64,
    #[serde(rename = "N@200")]
    pub n200: f64,
    #[serde(rename = "MRR")]
    pub mrr: f64,
}

impl Metrics {
    pub fn of_rank(rank: usize) -> Self {
        Self {
            n1: ndcg_at_k(rank, 1),
            n10: ndcg_at_k(rank, 10),
            n20: ndcg_at_k(rank, 20),
            n100: ndcg_at_k(rank, 100),
            n200: ndcg_at_k(rank, 200),
            mrr: mrr(rank),
        }
    }

    pub fn values(&self) -> [f64; 6] {
        [self.n1, self.n10, self.n20, self.n100, self.n200, self.mrr]
    }

    /// Mean over per-user metrics; zeros for an empty slice.
    pub fn mean(all: &[Metrics]) -> Self {
        if all.is_empty() {
            return Self::default();
        }
        let n = all.len() as f64;
        let mut sum = [0.0; 6];
        for m in all {
            for (s, v) in sum.iter_mut().zip(m.values()) {
                *s += v;
            }
        }
        Self {
            n1: sum[0] / n,
            n10: sum[1] / n,
            n20: sum[2] / n,
            n100: sum[3] / n,
            n200: sum[4] / n,
            mrr: sum[5] / n,
        }
    }
}

/// Outcome of [`evaluate`]: per-user ranks and their metric means.
#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub ranks: Vec<usize>,
    pub metrics: Metrics,
}

/// The held-out item a case is scored on: the item target at its last
/// position.
pub fn case_target(seq: &TokenSequence) -> Result<ItemId> {
    match seq.item_targets.last() {
        Some(&(pos, item)) if pos + 1 == seq.len() => Ok(item),
        _ => Err(Error::Invalid(format!(
            "user {} has no held-out target",
            seq.user
        ))),
    }
}

/// Ranks each case's held-out item by the score of the last position.
pub fn evaluate<T: Scalar>(
    model: &Model<T>,
    cases: &[TokenSequence],
    protocol: Protocol,
) -> Result<Evaluation> {
    if cases.is_empty() {
        return Err(Error::EmptyInput("no users to evaluate".into()));
    }
    let n = model.cfg.item_vocab;
    let all: Vec<ItemId> = (0..n as ItemId).collect();
    let mut rng = match protocol {
        Protocol::Sampled { seed, .. } => Some(rng_for(seed, "eval-candidates")),
        Protocol::Full => None,
    };
    let mut ranks = Vec::with_capacity(cases.len());
    for chunk in cases.chunks(EVAL_BATCH) {
        let h = model.encode_last(chunk)?;
        for (r, seq) in chunk.iter().enumerate() {
            let target = case_target(seq)?;
            if target as usize >= n {
                return Err(Error::UnknownItem(target));
            }
            let rank = match (protocol, rng.as_mut()) {
                (Protocol::Sampled { k, .. }, Some(rng)) => {
                    let k = k.min(n - 1);
                    let mut cands = Vec::with_capacity(k + 1);
                    cands.push(target);
                    for j in index::sample(rng, n - 1, k) {
                        let j = j as ItemId;
                        cands.push(if j >= target { j + 1 } else { j });
                    }
                    rank_of_target(&model.score_items(h.row(r), &cands)?, 0)?
                }
                _ => rank_of_target(&model.score_items(h.row(r), &all)?, target as usize)?,
            };
            ranks.push(rank);
        }
    }
    let per_user: Vec<Metrics> = ranks.iter().map(|&r| Metrics::of_rank(r)).collect();
    Ok(Evaluation {
        metrics: Metrics::mean(&per_user),
        ranks,
    })
}

/// Short SHA-256 fingerprint of a serialisable config.
pub fn config_hash<C: Serialize>(config: &C) -> Result<String> {
    let json = serde_json::to_vec(config)?;
    let digest = Sha256::digest(&json);
    Ok(digest.iter().take(6).map(|b| format!("{b:02x}")).collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub config_hash: String,
    pub metrics: Metrics,
    pub protocol: Protocol,
    pub users: usize,
}

impl EvalReport {
    pub fn new<C: Serialize>(eval: &Evaluation, protocol: Protocol, config: &C) -> Result<Self> {
        Ok(Self {
            config_hash: config_hash(config)?,
            metrics: eval.metrics,
            protocol,
            users: eval.ranks.len(),
        })
    }

    pub fn csv_header() -> &'static str {
        "label,protocol,users,N@1,N@10,N@20,N@100,N@200,MRR"
    }

    pub fn csv_row(&self, label: &str) -> String {
        let vals: Vec<String> = self
            .metrics
            .values()
            .iter()
            .map(|v| format!("{v:.6}"))
            .collect();
        format!(
            "{label},{},{},{}",
            self.protocol,
            self.users,
            vals.join(",")
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tie_rule() {
        assert_eq!(rank_of_target(&[0.1, 0.9, 0.3], 1).unwrap(), 1);
        let flat = vec![0.5f64; 201];
        assert_eq!(rank_of_target(&flat, 0).unwrap(), 1);
        assert_eq!(rank_of_target(&flat, 200).unwrap(), 201);
        assert!(rank_of_target(&[0.0, f64::NAN], 0).is_err());
        assert!(rank_of_target(&[0.0], 1).is_err());
    }

    #[test]
    fn closed_forms() {
        assert_eq!(ndcg_at_k(1, 1), 1.0);
        assert_eq!(mrr(1), 1.0);
        assert_eq!(ndcg_at_k(3, 10), 0.5);
        assert_eq!(mrr(3), 1.0 / 3.0);
        assert_eq!(ndcg_at_k(15, 10), 0.0);
        assert_eq!(ndcg_at_k(15, 20), 0.25);
    }

    #[test]
    fn protocol_strings() {
        assert_eq!("full".parse::<Protocol>().unwrap(), Protocol::Full);
        assert_eq!(
            "sampled:200".parse::<Protocol>().unwrap(),
            Protocol::Sampled { k: 200, seed: 0 }
        );
        assert!("sampled:0".parse::<Protocol>().is_err());
        assert!("top".parse::<Protocol>().is_err());
        assert_eq!(Protocol::Sampled { k: 5, seed: 9 }.to_string(), "sampled:5");
    }

    #[test]
    fn report_json_and_csv() {
        let eval = Evaluation {
            ranks: vec![1, 3],
            metrics: Metrics::mean(&[Metrics::of_rank(1), Metrics::of_rank(3)]),
        };
        let r = EvalReport::new(&eval, Protocol::Full, &("cfg", 1)).unwrap();
        assert_eq!(r.users, 2);
        assert_eq!(r.config_hash.len(), 12);
        let json = serde_json::to_string(&r).unwrap();
        assert!(json.contains("\"N@10\":0.75"));
        assert!(r.csv_row("full").starts_with("full,full,2,"));
    }
}
