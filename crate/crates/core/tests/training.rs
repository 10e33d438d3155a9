//! Loss values, loss gradients, negative sampling and the optimiser.

mod common;

use cause::seed::rng_for;
use cause::tensor::{finite_diff_check, Tape, Tensor};
use cause::training::{
    action_loss, adam_step, infonce_loss, sample_negatives, total_loss, AdamConfig, AdamState,
};
use cause::Model64;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use common::{loss_of_params, rand_t, tiny_batch, tiny_config};

#[test]
fn uniform_infonce_is_log_of_candidate_count() {
    let mut tape = Tape::<f64>::new();
    let h = tape.constant(Tensor::zeros(3, 16));
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let table = tape.constant(rand_t(&mut rng, 500, 16));
    let mut srng = rng_for(0, "test");
    let positives = [4, 17, 300];
    let negatives: Vec<Vec<u32>> = positives
        .iter()
        .map(|&p| sample_negatives(500, 200, p, &mut srng).unwrap())
        .collect();
    let l = infonce_loss(&mut tape, h, table, &positives, &negatives, 0.1).unwrap();
    assert!((tape.value(l).item() - 201f64.ln()).abs() < 1e-9);
}

#[test]
fn uniform_action_loss_is_log_of_action_count() {
    let mut tape = Tape::<f64>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let h = tape.constant(rand_t(&mut rng, 4, 6));
    let w = tape.constant(Tensor::zeros(6, 5));
    let b = tape.constant(Tensor::filled(1, 5, 0.3));
    let l = action_loss(&mut tape, h, w, b, &[0, 4, 2, 2]).unwrap();
    assert!((tape.value(l).item() - 5f64.ln()).abs() < 1e-9);
}

/// Mean over rows of `-log softmax(logits)[label]`, computed directly.
fn ce_oracle(logits: &[Vec<f64>], labels: &[usize]) -> f64 {
    let mut total = 0.0;
    for (row, &y) in logits.iter().zip(labels) {
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|x| (x - m).exp()).sum();
        total += -(row[y] - m - z.ln());
    }
    total / labels.len() as f64
}

#[test]
fn losses_match_direct_evaluation() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (h, table) = (rand_t(&mut rng, 2, 4), rand_t(&mut rng, 9, 4));
    let positives = [3u32, 0];
    let negatives = vec![vec![1u32, 5, 8], vec![2, 2, 7]];
    let tau = 0.25;
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let logits: Vec<Vec<f64>> = positives
        .iter()
        .zip(&negatives)
        .enumerate()
        .map(|(r, (&p, negs))| {
            std::iter::once(p)
                .chain(negs.iter().copied())
                .map(|c| dot(h.row(r), table.row(c as usize)) / tau)
                .collect()
        })
        .collect();
    let mut tape = Tape::new();
    let (hv, tv) = (tape.constant(h.clone()), tape.constant(table));
    let l = infonce_loss(&mut tape, hv, tv, &positives, &negatives, tau).unwrap();
    assert!((tape.value(l).item() - ce_oracle(&logits, &[0, 0])).abs() < 1e-12);

    let (w, b) = (rand_t(&mut rng, 4, 3), rand_t(&mut rng, 1, 3));
    let logits: Vec<Vec<f64>> = (0..2)
        .map(|r| {
            (0..3)
                .map(|c| dot(h.row(r), &w.col_vec(c)) + b.at(0, c))
                .collect()
        })
        .collect();
    let (wv, bv) = (tape.constant(w), tape.constant(b));
    let a = action_loss(&mut tape, hv, wv, bv, &[2, 1]).unwrap();
    assert!((tape.value(a).item() - ce_oracle(&logits, &[2, 1])).abs() < 1e-12);
}

trait ColVec {
    fn col_vec(&self, c: usize) -> Vec<f64>;
}

impl ColVec for Tensor<f64> {
    fn col_vec(&self, c: usize) -> Vec<f64> {
        (0..self.rows()).map(|r| self.at(r, c)).collect()
    }
}

#[test]
fn infonce_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    // embedding-scale inputs keep the τ = 0.1 softmax away from saturation
    let inputs = vec![
        rand_t(&mut rng, 2, 6).map(|x| 0.3 * x),
        rand_t(&mut rng, 12, 6).map(|x| 0.3 * x),
    ];
    let negatives = vec![vec![1u32, 2, 3, 4, 5], vec![6, 7, 8, 9, 1]];
    let err = finite_diff_check(
        |t, v| infonce_loss(t, v[0], v[1], &[0, 11], &negatives, 0.1),
        &inputs,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-4, "InfoNCE relative error {err:e}");
}

#[test]
fn action_loss_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let inputs = vec![
        rand_t(&mut rng, 3, 5),
        rand_t(&mut rng, 5, 4),
        rand_t(&mut rng, 1, 4),
    ];
    let err = finite_diff_check(
        |t, v| action_loss(t, v[0], v[1], v[2], &[3, 0, 1]),
        &inputs,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-4, "action loss relative error {err:e}");
}

#[test]
fn end_to_end_gradient() {
    let cfg = tiny_config();
    let model = Model64::new(cfg.clone(), 11).unwrap();
    let batch = tiny_batch(&cfg);
    let err = finite_diff_check(
        |t, v| loss_of_params(&model, &batch, t, v),
        &model.params,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-3, "end-to-end relative error {err:e}");
}

#[test]
fn reachable_gradients_are_finite_and_nonzero() {
    let cfg = tiny_config();
    let model = Model64::new(cfg.clone(), 12).unwrap();
    let batch = tiny_batch(&cfg);
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, true);
    let l = loss_of_params(&model, &batch, &mut tape, &bound.vars).unwrap();
    tape.backward(l).unwrap();
    for (name, v) in model.names.iter().zip(&bound.vars) {
        let g = tape.grad(*v).unwrap();
        assert!(g.is_finite(), "{name}");
        assert!(g.data().iter().any(|&x| x != 0.0), "{name} got no gradient");
    }
}

#[test]
fn total_is_item_plus_action() {
    let cfg = tiny_config();
    let model = Model64::new(cfg.clone(), 13).unwrap();
    let batch = tiny_batch(&cfg);
    let run = |m: &Model64| {
        let mut tape = Tape::new();
        let bound = m.bind(&mut tape, false);
        let mut rng = rng_for(1, "negatives");
        total_loss(m, &mut tape, &bound, &batch, 5, &mut rng)
            .unwrap()
            .1
    };
    let with = run(&model);
    let action = with.action.unwrap();
    assert!((with.total - (with.item + action)).abs() < 1e-12);
    let mut without = model.clone();
    without.cfg.use_action_head = false;
    let v = run(&without);
    assert_eq!(v.action, None);
    assert_eq!(v.total, v.item);
    assert!((v.item - with.item).abs() < 1e-12);
}

#[test]
fn negatives_are_uniform_over_non_positives() {
    let (n, positive, draws) = (20usize, 7u32, 190_000usize);
    let mut rng = rng_for(3, "uniformity");
    let mut counts = vec![0usize; n];
    for id in sample_negatives(n, draws, positive, &mut rng).unwrap() {
        counts[id as usize] += 1;
    }
    assert_eq!(counts[positive as usize], 0);
    let expected = draws as f64 / (n - 1) as f64;
    let chi2: f64 = counts
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != positive as usize)
        .map(|(_, &c)| (c as f64 - expected).powi(2) / expected)
        .sum();
    // 18 degrees of freedom; the 0.999 quantile is 42.3
    assert!(chi2 < 42.3, "chi-square {chi2}");
}

/// Scalar Adam written from the update equations.
fn adam_oracle(p: &mut [f64], grads: &[Vec<f64>], cfg: &AdamConfig) {
    let mut m = vec![0.0; p.len()];
    let mut v = vec![0.0; p.len()];
    for (t, g) in grads.iter().enumerate() {
        let t = (t + 1) as i32;
        for j in 0..p.len() {
            m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g[j];
            v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g[j] * g[j];
            let mh = m[j] / (1.0 - cfg.beta1.powi(t));
            let vh = v[j] / (1.0 - cfg.beta2.powi(t));
            p[j] -= cfg.learning_rate * mh / (vh.sqrt() + cfg.eps);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn adam_matches_update_equations(seed in any::<u64>(), steps in 1usize..8) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p0 = rand_t(&mut rng, 2, 3);
        let grads: Vec<Tensor<f64>> = (0..steps).map(|_| rand_t(&mut rng, 2, 3)).collect();
        let cfg = AdamConfig { learning_rate: 0.01, ..AdamConfig::default() };
        let mut params = vec![p0.clone()];
        let mut state = AdamState::new(&params);
        for g in &grads {
            adam_step(&mut params, &[Some(g.clone())], &["p".to_string()], &mut state, &cfg).unwrap();
        }
        let mut expect = p0.data().to_vec();
        let raw: Vec<Vec<f64>> = grads.iter().map(|g| g.data().to_vec()).collect();
        adam_oracle(&mut expect, &raw, &cfg);
        for (a, b) in params[0].data().iter().zip(&expect) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }
}
