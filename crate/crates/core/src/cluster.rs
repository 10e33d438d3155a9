//! K-Means over item embeddings and category induction from the clusters.

use rand::Rng;

use crate::datalog::{CategoryId, ItemCatalog};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::seed::rng_for;
use crate::tensor::Tensor;

pub const DEFAULT_MAX_ITER: usize = 100;
pub const DEFAULT_TOL: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq)]
pub struct KMeansResult {
    /// `k × d`.
    pub centroids: Tensor<f64>,
    /// Cluster of each input row.
    pub assignment: Vec<CategoryId>,
    /// Sum of squared distances of points to their centroids.
    pub inertia: f64,
    /// Inertia after every iteration; non-increasing.
    pub inertia_history: Vec<f64>,
    pub iterations_run: usize,
}

impl KMeansResult {
    pub fn k(&self) -> usize {
        self.centroids.rows()
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(p: &[f64], centroids: &Tensor<f64>) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for c in 0..centroids.rows() {
        let d = sq_dist(p, centroids.row(c));
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

fn plus_plus_init(points: &Tensor<f64>, k: usize, seed: u64) -> Tensor<f64> {
    let mut rng = rng_for(seed, "kmeans++");
    let n = points.rows();
    let mut chosen = vec![rng.random_range(0..n)];
    let mut d2: Vec<f64> = (0..n)
        .map(|i| sq_dist(points.row(i), points.row(chosen[0])))
        .collect();
    while chosen.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut u = rng.random::<f64>() * total;
            let mut pick = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                if u < w {
                    pick = i;
                    break;
                }
                u -= w;
            }
            pick
        } else {
            // all remaining points coincide with a centroid
            rng.random_range(0..n)
        };
        chosen.push(next);
        for (i, d) in d2.iter_mut().enumerate() {
            *d = d.min(sq_dist(points.row(i), points.row(next)));
        }
    }
    Tensor::from_fn(k, points.cols(), |r, c| points.at(chosen[r], c))
}

fn means(points: &Tensor<f64>, assignment: &[CategoryId], k: usize) -> Tensor<f64> {
    let mut sums = Tensor::zeros(k, points.cols());
    let mut counts = vec![0usize; k];
    for (i, &a) in assignment.iter().enumerate() {
        counts[a as usize] += 1;
        for (s, x) in sums.row_mut(a as usize).iter_mut().zip(points.row(i)) {
            *s += x;
        }
    }
    for (c, &n) in counts.iter().enumerate() {
        let n = n.max(1) as f64;
        sums.row_mut(c).iter_mut().for_each(|s| *s /= n);
    }
    sums
}

/// Gives every empty cluster the point farthest from its current centroid,
/// taken only from clusters that keep at least one member.
fn repair_empty(
    points: &Tensor<f64>,
    centroids: &Tensor<f64>,
    assignment: &mut [CategoryId],
    k: usize,
) {
    let mut counts = vec![0usize; k];
    for &a in assignment.iter() {
        counts[a as usize] += 1;
    }
    for empty in 0..k {
        if counts[empty] > 0 {
            continue;
        }
        let victim = (0..points.rows())
            .filter(|&i| counts[assignment[i] as usize] > 1)
            .map(|i| {
                (
                    i,
                    sq_dist(points.row(i), centroids.row(assignment[i] as usize)),
                )
            })
            .fold(None, |best: Option<(usize, f64)>, (i, d)| match best {
                Some((_, bd)) if bd >= d => best,
                _ => Some((i, d)),
            });
        if let Some((i, _)) = victim {
            counts[assignment[i] as usize] -= 1;
            assignment[i] = empty as CategoryId;
            counts[empty] += 1;
        }
    }
}

fn inertia(points: &Tensor<f64>, centroids: &Tensor<f64>, assignment: &[CategoryId]) -> f64 {
    assignment
        .iter()
        .enumerate()
        .map(|(i, &a)| sq_dist(points.row(i), centroids.row(a as usize)))
        .sum()
}

/// Lloyd's algorithm from a k-means++ start. Stops once no centroid moves
/// by `tol` or more (Euclidean) or after `max_iter` iterations.
pub fn kmeans_fit<T: Scalar>(
    points: &Tensor<T>,
    k: usize,
    seed: u64,
    max_iter: usize,
    tol: f64,
) -> Result<KMeansResult> {
    let n = points.rows();
    if k == 0 || n < k {
        return Err(Error::Config(format!(
            "k-means needs 1 <= k <= n (k={k}, n={n})"
        )));
    }
    if !points.is_finite() {
        return Err(Error::NonFinite("k-means input".into()));
    }
    let points: Tensor<f64> = points.cast();
    let mut centroids = plus_plus_init(&points, k, seed);
    let mut assignment = vec![0 as CategoryId; n];
    let mut history = Vec::new();
    let mut iterations = 0;
    while iterations < max_iter.max(1) {
        iterations += 1;
        for (i, a) in assignment.iter_mut().enumerate() {
            *a = nearest(points.row(i), &centroids).0 as CategoryId;
        }
        repair_empty(&points, &centroids, &mut assignment, k);
        let next = means(&points, &assignment, k);
        let shift = (0..k)
            .map(|c| sq_dist(next.row(c), centroids.row(c)).sqrt())
            .fold(0.0, f64::max);
        centroids = next;
        history.push(inertia(&points, &centroids, &assignment));
        if shift < tol {
            break;
        }
    }
    Ok(KMeansResult {
        inertia: *history.last().expect("at least one iteration"),
        centroids,
        assignment,
        inertia_history: history,
        iterations_run: iterations,
    })
}

/// Single-category catalog with one category per cluster.
pub fn induce_catalog(result: &KMeansResult) -> ItemCatalog {
    ItemCatalog::one_to_many(result.k(), &result.assignment).expect("assignments are below k")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_cluster_is_the_mean() {
        let pts = Tensor::from_rows(&[vec![0.0, 0.0], vec![2.0, 4.0], vec![4.0, 2.0]]).unwrap();
        let r = kmeans_fit(&pts, 1, 0, DEFAULT_MAX_ITER, DEFAULT_TOL).unwrap();
        assert_eq!(r.assignment, vec![0, 0, 0]);
        assert_eq!(r.centroids.row(0), &[2.0, 2.0]);
    }

    #[test]
    fn two_separated_pairs() {
        let pts = Tensor::from_rows(&[
            vec![0.0, 0.0],
            vec![0.0, 1.0],
            vec![10.0, 10.0],
            vec![10.0, 11.0],
        ])
        .unwrap();
        let r = kmeans_fit(&pts, 2, 3, DEFAULT_MAX_ITER, DEFAULT_TOL).unwrap();
        assert_eq!(r.assignment[0], r.assignment[1]);
        assert_eq!(r.assignment[2], r.assignment[3]);
        assert_ne!(r.assignment[0], r.assignment[2]);
        let a = r.assignment[0] as usize;
        assert_eq!(r.centroids.row(a), &[0.0, 0.5]);
        assert_eq!(r.centroids.row(1 - a), &[10.0, 10.5]);
        assert!((r.inertia - 1.0).abs() < 1e-12);
    }

    #[test]
    fn bad_inputs() {
        let pts = Tensor::from_rows(&[vec![0.0f64]]).unwrap();
        assert!(kmeans_fit(&pts, 2, 0, 10, 1e-4).is_err());
        assert!(kmeans_fit(&pts, 0, 0, 10, 1e-4).is_err());
        let nan = Tensor::from_vec(1, 1, vec![f64::NAN]);
        assert!(matches!(
            kmeans_fit(&nan, 1, 0, 10, 1e-4),
            Err(Error::NonFinite(_))
        ));
    }

    #[test]
    fn duplicate_points_still_fill_every_cluster() {
        let pts = Tensor::from_rows(&[vec![1.0], vec![1.0], vec![1.0], vec![1.0]]).unwrap();
        let r = kmeans_fit(&pts, 3, 5, 10, 1e-4).unwrap();
        for c in 0..3 {
            assert!(r.assignment.contains(&c));
        }
    }

    #[test]
    fn induced_catalog_follows_assignment() {
        let r = KMeansResult {
            centroids: Tensor::zeros(3, 1),
            assignment: vec![2, 0],
            inertia: 0.0,
            inertia_history: vec![0.0],
            iterations_run: 1,
        };
        let cat = induce_catalog(&r);
        assert_eq!(cat.num_categories(), 3);
        assert_eq!(cat.categories_of(0), Some(&[2][..]));
        assert_eq!(cat.categories_of(1), Some(&[0][..]));
    }
}
