use cause::cluster::{induce_catalog, kmeans_fit, DEFAULT_MAX_ITER, DEFAULT_TOL};
use cause::Tensor;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

#[test]
fn gaussian_blobs_are_recovered() {
    let centers = [[0.0, 0.0], [6.0, 0.0], [0.0, 6.0], [6.0, 6.0]];
    let noise = Normal::new(0.0, 0.1).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    for i in 0..1000 {
        let c = centers[i % 4];
        rows.push(vec![
            c[0] + noise.sample(&mut rng),
            c[1] + noise.sample(&mut rng),
        ]);
        labels.push(i % 4);
    }
    let pts = Tensor::from_rows(&rows).unwrap();
    let r = kmeans_fit(&pts, 4, 2, DEFAULT_MAX_ITER, DEFAULT_TOL).unwrap();
    // purity: each generating label maps onto exactly one cluster
    let mut map = [None; 4];
    for (l, &a) in labels.iter().zip(&r.assignment) {
        match map[*l] {
            None => map[*l] = Some(a),
            Some(m) => assert_eq!(m, a),
        }
    }
    let mut used: Vec<_> = map.iter().map(|m| m.unwrap()).collect();
    used.sort();
    used.dedup();
    assert_eq!(used.len(), 4);
    let cat = induce_catalog(&r);
    assert_eq!(cat.num_categories(), 4);
    assert!(cat.is_one_to_many());
}

fn points(seed: u64, n: usize, d: usize) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0).unwrap();
    Tensor::from_fn(n, d, |_, _| normal.sample(&mut rng))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn lloyd_invariants(seed in any::<u64>(), n in 1usize..60, d in 1usize..5, k in 1usize..9) {
        prop_assume!(k <= n);
        let pts = points(seed, n, d);
        let r = kmeans_fit(&pts, k, seed, DEFAULT_MAX_ITER, DEFAULT_TOL).unwrap();
        for w in r.inertia_history.windows(2) {
            prop_assert!(w[1] <= w[0] + 1e-9 * w[0].max(1.0));
        }
        prop_assert!(r.inertia >= 0.0);
        prop_assert!(r.assignment.iter().all(|&a| (a as usize) < k));
        // every centroid is the mean of its members
        for c in 0..k {
            let members: Vec<usize> = (0..n).filter(|&i| r.assignment[i] as usize == c).collect();
            prop_assert!(!members.is_empty());
            for j in 0..d {
                let mean = members.iter().map(|&i| pts.at(i, j)).sum::<f64>() / members.len() as f64;
                prop_assert!((r.centroids.at(c, j) - mean).abs() < 1e-9);
            }
        }
        let again = kmeans_fit(&pts, k, seed, DEFAULT_MAX_ITER, DEFAULT_TOL).unwrap();
        prop_assert_eq!(again, r);
    }
}
