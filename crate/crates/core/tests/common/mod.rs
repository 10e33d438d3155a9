//! Helpers shared by the integration test targets.
#![allow(dead_code)]

use cause::compressor::{Bucket, BucketEntry, BucketPlan};
use cause::datalog::{Interaction, ItemCatalog};
use cause::model::{assemble_sequence, Bound, ModelConfig, TokenSequence};
use cause::seed::rng_for;
use cause::tensor::{finite_diff_check, SeqLayout, Tape, Tensor, Var};
use cause::training::total_loss;
use cause::{Model64, Result};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Brute-force bucket selection written without the library's sort-based
/// approach: categories are picked one at a time by scanning for the newest
/// unpicked bucket, and bucket members are collected by walking the history
/// backwards. Returns `(category, items)` oldest bucket first.
pub fn oracle_compress(
    history: &[Interaction],
    catalog: &ItemCatalog,
    v: usize,
    g: usize,
) -> Vec<(u32, Vec<u32>)> {
    let c = catalog.num_categories() as u32;
    let newest = |cat: u32| -> Option<usize> {
        (0..history.len()).rev().find(|&i| {
            catalog
                .categories_of(history[i].item)
                .unwrap()
                .contains(&cat)
        })
    };
    let mut picked: Vec<u32> = Vec::new();
    while picked.len() < v {
        let mut best: Option<(usize, u32)> = None;
        for cat in 0..c {
            if picked.contains(&cat) {
                continue;
            }
            if let Some(pos) = newest(cat) {
                // history is strictly time ordered, so position is recency
                let better = match best {
                    None => true,
                    Some((bp, _)) => pos > bp,
                };
                if better {
                    best = Some((pos, cat));
                }
            }
        }
        match best {
            Some((_, cat)) => picked.push(cat),
            None => break,
        }
    }
    picked
        .into_iter()
        .rev()
        .map(|cat| {
            let mut items = Vec::new();
            for e in history.iter().rev() {
                if items.len() == g {
                    break;
                }
                if catalog.categories_of(e.item).unwrap().contains(&cat) {
                    items.push(e.item);
                }
            }
            items.reverse();
            (cat, items)
        })
        .collect()
}

/// Random multi-category catalog and time-ordered history with occasional
/// timestamp ties.
pub fn random_case(
    seed: u64,
    max_events: usize,
    max_cats: usize,
) -> (ItemCatalog, Vec<Interaction>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cats = rng.random_range(1..=max_cats);
    let items = rng.random_range(1..=64usize);
    let table: Vec<Vec<u32>> = (0..items)
        .map(|_| {
            let k = rng.random_range(1..=3usize.min(cats));
            (0..k).map(|_| rng.random_range(0..cats as u32)).collect()
        })
        .collect();
    let catalog = ItemCatalog::new(cats, table).unwrap();
    let n = rng.random_range(0..=max_events);
    let mut ts = 0i64;
    let history = (0..n)
        .map(|i| {
            ts += rng.random_range(0..3i64);
            Interaction {
                user: 0,
                item: rng.random_range(0..items as u32),
                action: 0,
                ts,
                seq_pos: i as u32,
            }
        })
        .collect();
    (catalog, history)
}

pub fn rand_t(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor<f64> {
    Tensor::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0))
}

fn positive(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor<f64> {
    Tensor::from_fn(r, c, |_, _| rng.random_range(0.5..2.0))
}

/// Reduces an arbitrary-shape output to a scalar with fixed random weights
/// so every output coordinate contributes a distinct gradient.
pub fn weighted_sum(t: &mut Tape<f64>, y: Var, seed: u64) -> Result<Var> {
    let (r, c) = t.value(y).shape();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = t.constant(rand_t(&mut rng, r, c));
    let p = t.mul(y, w)?;
    t.sum(p)
}

fn check(
    out: &mut Vec<(&'static str, f64)>,
    name: &'static str,
    inputs: Vec<Tensor<f64>>,
    f: impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
) {
    let err = finite_diff_check(
        |t, v| {
            let y = f(t, v)?;
            weighted_sum(t, y, 99)
        },
        &inputs,
        1e-5,
    )
    .unwrap();
    out.push((name, err));
}

/// Worst relative finite-difference error of every tape op on random
/// inputs drawn from `seed`.
pub fn op_gradient_errors(seed: u64) -> Vec<(&'static str, f64)> {
    let mut out = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = rand_t(&mut rng, 3, 4);
    let b = rand_t(&mut rng, 4, 5);
    let a2 = rand_t(&mut rng, 3, 4);
    let bias = rand_t(&mut rng, 1, 4);

    check(&mut out, "matmul", vec![a.clone(), b.clone()], |t, v| {
        t.matmul(v[0], v[1])
    });
    check(&mut out, "add", vec![a.clone(), a2.clone()], |t, v| {
        t.add(v[0], v[1])
    });
    check(&mut out, "sub", vec![a.clone(), a2.clone()], |t, v| {
        t.sub(v[0], v[1])
    });
    check(&mut out, "mul", vec![a.clone(), a2.clone()], |t, v| {
        t.mul(v[0], v[1])
    });
    check(
        &mut out,
        "add_row",
        vec![a.clone(), bias.clone()],
        |t, v| t.add_row(v[0], v[1]),
    );
    check(&mut out, "scale", vec![a.clone()], |t, v| {
        t.scale(v[0], -2.5)
    });
    check(&mut out, "sum", vec![a.clone()], |t, v| t.sum(v[0]));
    check(&mut out, "mean", vec![a.clone()], |t, v| t.mean(v[0]));
    check(
        &mut out,
        "group_mean",
        vec![rand_t(&mut rng, 6, 3)],
        |t, v| t.group_mean(v[0], vec![0..1, 1..4, 2..6]),
    );
    check(&mut out, "row_mean", vec![a.clone()], |t, v| {
        t.row_mean(v[0])
    });
    check(
        &mut out,
        "concat",
        vec![a.clone(), rand_t(&mut rng, 2, 4)],
        |t, v| t.concat(&[v[0], v[1], v[0]]),
    );
    check(&mut out, "slice", vec![rand_t(&mut rng, 5, 3)], |t, v| {
        t.slice_rows(v[0], 1, 3)
    });
    check(&mut out, "gather", vec![rand_t(&mut rng, 4, 3)], |t, v| {
        t.gather_rows(v[0], vec![3, 0, 3, 1])
    });
    check(&mut out, "softmax", vec![a.clone()], |t, v| t.softmax(v[0]));
    let keep: Vec<bool> = (0..12).map(|i| i % 3 != 1).collect();
    check(&mut out, "softmax_masked", vec![a.clone()], |t, v| {
        t.softmax_masked(v[0], Some(&keep))
    });
    check(&mut out, "log_softmax", vec![a.clone()], |t, v| {
        t.log_softmax(v[0])
    });
    check(&mut out, "log", vec![positive(&mut rng, 3, 3)], |t, v| {
        t.log(v[0])
    });
    check(&mut out, "exp", vec![a.clone()], |t, v| t.exp(v[0]));
    check(
        &mut out,
        "gelu",
        vec![rand_t(&mut rng, 4, 4).map(|x| 3.0 * x)],
        |t, v| t.gelu(v[0]),
    );
    check(
        &mut out,
        "layer_norm",
        vec![
            rand_t(&mut rng, 3, 6),
            rand_t(&mut rng, 1, 6),
            rand_t(&mut rng, 1, 6),
        ],
        |t, v| t.layer_norm(v[0], v[1], v[2]),
    );
    check(
        &mut out,
        "gather_dot",
        vec![rand_t(&mut rng, 3, 4), rand_t(&mut rng, 5, 4)],
        |t, v| t.gather_dot(v[0], v[1], vec![0, 2, 4, 1, 1, 3, 4, 0, 2]),
    );
    check(&mut out, "pick_cols", vec![a.clone()], |t, v| {
        t.pick_cols(v[0], vec![3, 0, 2])
    });

    let layout = SeqLayout {
        batch: 2,
        len: 4,
        valid: vec![4, 2],
    };
    check(
        &mut out,
        "causal_attention",
        vec![
            rand_t(&mut rng, 8, 6),
            rand_t(&mut rng, 8, 6),
            rand_t(&mut rng, 8, 6),
        ],
        |t, v| t.causal_attention(v[0], v[1], v[2], &layout, 2),
    );
    out
}

pub fn small_config() -> ModelConfig {
    ModelConfig {
        hidden_dim: 8,
        num_layers: 2,
        num_heads: 2,
        item_vocab: 40,
        action_vocab: 3,
        user_vocab: 4,
        category_vocab: 6,
        max_recent: 6,
        max_buckets: 4,
        max_items_per_bucket: 5,
        ..ModelConfig::default()
    }
}

pub fn bucket(category: u32, items: &[u32]) -> Bucket {
    Bucket {
        category,
        items: items
            .iter()
            .enumerate()
            .map(|(i, &item)| BucketEntry {
                item,
                ts: i as i64,
                seq_pos: i as u32,
            })
            .collect(),
    }
}

pub fn set(model: &mut Model64, name: &str, t: Tensor<f64>) {
    *model.param_mut(name).unwrap() = t;
}

/// Pooled history token written out longhand: mean over members of
/// `e · W + b`, plus the category row.
pub fn pooled_oracle(model: &Model64, b: &Bucket, align: bool) -> Vec<f64> {
    let d = model.cfg.hidden_dim;
    let emb = model.param("item_emb").unwrap();
    let w = model.param("align_w").unwrap();
    let bias = model.param("align_b").unwrap();
    let mut acc = vec![0.0; d];
    for e in &b.items {
        let x = emb.row(e.item as usize);
        for j in 0..d {
            let mapped = if align {
                (0..d).map(|i| x[i] * w.at(i, j)).sum::<f64>() + bias.at(0, j)
            } else {
                x[j]
            };
            acc[j] += mapped;
        }
    }
    let cat = model
        .param("category_emb")
        .unwrap()
        .row(b.category as usize);
    (0..d)
        .map(|j| acc[j] / b.items.len() as f64 + cat[j])
        .collect()
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        hidden_dim: 8,
        num_layers: 1,
        num_heads: 1,
        item_vocab: 10,
        action_vocab: 3,
        user_vocab: 2,
        category_vocab: 3,
        max_recent: 3,
        max_buckets: 2,
        max_items_per_bucket: 2,
        ..ModelConfig::default()
    }
}

pub fn tiny_batch(cfg: &ModelConfig) -> Vec<TokenSequence> {
    let catalog = ItemCatalog::new(3, (0..10).map(|i| vec![i % 3]).collect()).unwrap();
    let ev = |user: u32, item: u32, action: u32, ts: i64| Interaction {
        user,
        item,
        action,
        ts,
        seq_pos: ts as u32,
    };
    let history = [ev(0, 1, 0, 0), ev(0, 2, 1, 1), ev(0, 4, 2, 2)];
    let plan = cause::compressor::compress(&history, &catalog, 2, 2).unwrap();
    let a = assemble_sequence(
        cfg,
        0,
        &plan,
        &[ev(0, 5, 1, 3), ev(0, 6, 0, 4)],
        Some(7),
        &catalog,
    )
    .unwrap();
    let b = assemble_sequence(
        cfg,
        1,
        &BucketPlan::empty(2, 2),
        &[ev(1, 9, 2, 0), ev(1, 3, 1, 1), ev(1, 0, 0, 2)],
        Some(8),
        &catalog,
    )
    .unwrap();
    vec![a, b]
}

/// Total loss as a function of every model parameter, with the same
/// negatives on every evaluation.
pub fn loss_of_params(
    model: &Model64,
    batch: &[TokenSequence],
    tape: &mut Tape<f64>,
    vars: &[Var],
) -> cause::Result<Var> {
    let bound = Bound {
        vars: vars.to_vec(),
    };
    let mut rng = rng_for(9, "negatives");
    total_loss(model, tape, &bound, batch, 5, &mut rng).map(|(l, _)| l)
}

pub fn as_pairs(plan: &BucketPlan) -> Vec<(u32, Vec<u32>)> {
    plan.buckets
        .iter()
        .map(|b| (b.category, b.items.iter().map(|e| e.item).collect()))
        .collect()
}

pub fn check_invariants(
    history: &[Interaction],
    catalog: &ItemCatalog,
    plan: &BucketPlan,
    v: usize,
    g: usize,
) {
    assert!(plan.len() <= v);
    for w in plan.buckets.windows(2) {
        assert!(w[0].last_key() <= w[1].last_key());
    }
    for b in &plan.buckets {
        assert!(!b.is_empty() && b.len() <= g);
        for e in &b.items {
            assert!(catalog.categories_of(e.item).unwrap().contains(&b.category));
        }
        // members dropped from a kept bucket are older than every kept member
        let oldest = b.items[0].key();
        let dropped_newer = history.iter().any(|e| {
            catalog.categories_of(e.item).unwrap().contains(&b.category)
                && e.key() > oldest
                && !b.items.iter().any(|k| k.key() == e.key())
        });
        assert!(!dropped_newer);
    }
    // a category left out is never more recent than a kept one
    let kept: Vec<u32> = plan.buckets.iter().map(|b| b.category).collect();
    let min_kept = plan.buckets.iter().map(|b| b.last_key()).min();
    for e in history {
        for c in catalog.categories_of(e.item).unwrap() {
            if !kept.contains(c) {
                assert!(plan.len() == v, "category {c} dropped while under budget");
                assert!(Some(e.key()) <= min_kept);
            }
        }
    }
}
