//! Lloyd's k-means with seeded k-means++ initialization and a fixed number of
//! iterations. Ties go to the lowest centroid index.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid_arg, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansResult {
    pub assignments: Vec<usize>,
    pub centroids: Tensor<f64>,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Index of the nearest centroid (lowest index on ties).
pub fn nearest(point: &[f64], centroids: &Tensor<f64>) -> usize {
    let mut best = (0, f64::INFINITY);
    for c in 0..centroids.rows() {
        let d = sq_dist(point, centroids.row(c));
        if d < best.1 {
            best = (c, d);
        }
    }
    best.0
}

pub fn kmeans(points: &Tensor<f64>, k: usize, iterations: usize, seed: u64) -> Result<KMeansResult> {
    let n = points.rows();
    if k < 2 {
        return Err(invalid_arg!("k must be >= 2, got {}", k));
    }
    if k > n {
        return Err(invalid_arg!("k = {} exceeds the {} points", k, n));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = Tensor::zeros(k, points.cols());
    let first = rng.gen_range(0..n);
    centroids.row_mut(0).copy_from_slice(points.row(first));
    let mut d2: Vec<f64> = (0..n).map(|i| sq_dist(points.row(i), centroids.row(0))).collect();
    for c in 1..k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut t = rng.gen_range(0.0..total);
            let mut chosen = n - 1;
            for (i, &d) in d2.iter().enumerate() {
                if t < d {
                    chosen = i;
                    break;
                }
                t -= d;
            }
            chosen
        } else {
            rng.gen_range(0..n)
        };
        centroids.row_mut(c).copy_from_slice(points.row(pick));
        for (i, d) in d2.iter_mut().enumerate() {
            *d = d.min(sq_dist(points.row(i), centroids.row(c)));
        }
    }
    let mut assignments = vec![0; n];
    for _ in 0..iterations.max(1) {
        for (i, a) in assignments.iter_mut().enumerate() {
            *a = nearest(points.row(i), &centroids);
        }
        let mut sums = Tensor::<f64>::zeros(k, points.cols());
        let mut counts = vec![0usize; k];
        for (i, &a) in assignments.iter().enumerate() {
            counts[a] += 1;
            for (s, &x) in sums.row_mut(a).iter_mut().zip(points.row(i)) {
                *s += x;
            }
        }
        for c in 0..k {
            // Empty clusters keep their centroid.
            if counts[c] > 0 {
                for (dst, &s) in centroids.row_mut(c).iter_mut().zip(sums.row(c)) {
                    *dst = s / counts[c] as f64;
                }
            }
        }
    }
    for (i, a) in assignments.iter_mut().enumerate() {
        *a = nearest(points.row(i), &centroids);
    }
    Ok(KMeansResult { assignments, centroids })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_points_one_cluster() {
        let p = Tensor::filled(9, 3, 0.25);
        let r = kmeans(&p, 3, 10, 0).unwrap();
        assert!(r.assignments.iter().all(|&a| a == r.assignments[0]));
    }

    #[test]
    fn two_groups_match_nearest_centroid_oracle() {
        let p = Tensor::from_fn(8, 2, |r, c| if r % 2 == 0 { 10.0 + (r + c) as f64 * 0.01 } else { -10.0 - c as f64 * 0.02 });
        let r = kmeans(&p, 2, 20, 7).unwrap();
        assert_ne!(r.assignments[0], r.assignments[1]);
        for i in 0..8 {
            assert_eq!(r.assignments[i], r.assignments[i % 2]);
            // Brute force over centroids.
            let d: Vec<f64> = (0..2).map(|c| sq_dist(p.row(i), r.centroids.row(c))).collect();
            assert!(d[r.assignments[i]] <= d[1 - r.assignments[i]]);
        }
    }

    #[test]
    fn invalid_k() {
        let p = Tensor::filled(3, 2, 0.0);
        assert!(kmeans(&p, 4, 5, 0).is_err());
        assert!(kmeans(&p, 1, 5, 0).is_err());
    }
}
