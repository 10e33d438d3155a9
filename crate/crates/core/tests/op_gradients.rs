//! Every tape op against central finite differences in double precision.

mod common;

use cause::tensor::finite_diff_check;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const TOL: f64 = 1e-4;
const EPS: f64 = 1e-5;

#[test]
fn every_op_matches_finite_differences() {
    for seed in 0..5u64 {
        for (name, err) in common::op_gradient_errors(seed) {
            assert!(err < TOL, "{name}: max relative error {err:e}");
        }
    }
}

#[test]
fn composite_graph_with_shared_subexpressions() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x = common::rand_t(&mut rng, 4, 3);
    let w = common::rand_t(&mut rng, 3, 3);
    let err = finite_diff_check(
        |t, v| {
            let h = t.matmul(v[0], v[1])?;
            let g = t.gelu(h)?;
            let r = t.add(g, v[0])?;
            let s = t.log_softmax(r)?;
            let p = t.pick_cols(s, vec![0, 1, 2, 0])?;
            let m = t.mean(p)?;
            t.scale(m, -1.0)
        },
        &[x, w],
        EPS,
    )
    .unwrap();
    assert!(err < TOL, "{err:e}");
}
