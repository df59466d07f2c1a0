//! k-means++ seeded Lloyd iterations for codebook initialization.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Tensor;
use crate::codec::Codebook;
use crate::error::{Error, Result};

pub const KMEANS_MAX_ITERS: usize = 50;
const DUPLICATE_JITTER: f64 = 1e-4;

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn count_distinct(samples: &Tensor, limit: usize) -> usize {
    let mut distinct: Vec<&[f64]> = Vec::new();
    for r in 0..samples.rows() {
        let row = samples.row(r);
        if !distinct.contains(&row) {
            distinct.push(row);
            if distinct.len() >= limit {
                break;
            }
        }
    }
    distinct.len()
}

/// Clusters the rows of `samples` into `k` centroids.
///
/// Needs at least `k` distinct rows. Centroids that end up identical are
/// separated by a small seeded jitter.
pub fn kmeans_init(samples: &Tensor, k: usize, seed: u64) -> Result<Codebook> {
    let n = samples.rows();
    let d = samples.cols();
    if k == 0 {
        return Err(Error::arg("k-means needs k >= 1"));
    }
    if count_distinct(samples, k) < k {
        return Err(Error::arg(format!(
            "k-means needs at least {k} distinct samples"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // k-means++ seeding.
    let mut centroids: Vec<Vec<f64>> = Vec::with_capacity(k);
    centroids.push(samples.row(rng.random_range(0..n)).to_vec());
    let mut nearest: Vec<f64> = (0..n).map(|i| sq_dist(samples.row(i), &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = nearest.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.random_range(0.0..total);
            let mut chosen = n - 1;
            for (i, w) in nearest.iter().enumerate() {
                if target < *w {
                    chosen = i;
                    break;
                }
                target -= w;
            }
            chosen
        } else {
            rng.random_range(0..n)
        };
        let c = samples.row(pick).to_vec();
        for (i, best) in nearest.iter_mut().enumerate() {
            *best = best.min(sq_dist(samples.row(i), &c));
        }
        centroids.push(c);
    }

    let mut assignment = vec![usize::MAX; n];
    for _ in 0..KMEANS_MAX_ITERS {
        let mut changed = false;
        for (i, slot) in assignment.iter_mut().enumerate() {
            let row = samples.row(i);
            let mut best = (0, f64::INFINITY);
            for (j, c) in centroids.iter().enumerate() {
                let dist = sq_dist(row, c);
                if dist < best.1 {
                    best = (j, dist);
                }
            }
            if *slot != best.0 {
                *slot = best.0;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        let mut sums = vec![vec![0.0; d]; k];
        let mut counts = vec![0usize; k];
        for (i, &a) in assignment.iter().enumerate() {
            counts[a] += 1;
            for (s, v) in sums[a].iter_mut().zip(samples.row(i)) {
                *s += v;
            }
        }
        for j in 0..k {
            if counts[j] > 0 {
                centroids[j] = sums[j].iter().map(|s| s / counts[j] as f64).collect();
            } else {
                // Re-seed an empty cluster at the sample farthest from its centroid.
                let far = (0..n)
                    .max_by(|&a, &b| {
                        let da = sq_dist(samples.row(a), &centroids[assignment[a]]);
                        let db = sq_dist(samples.row(b), &centroids[assignment[b]]);
                        da.total_cmp(&db)
                    })
                    .expect("non-empty samples");
                centroids[j] = samples.row(far).to_vec();
            }
        }
    }

    for j in 1..k {
        while centroids[..j].iter().any(|c| *c == centroids[j]) {
            for v in centroids[j].iter_mut() {
                *v += rng.random_range(-DUPLICATE_JITTER..=DUPLICATE_JITTER);
            }
        }
    }

    Ok(Codebook {
        vectors: Tensor::matrix(k, d, centroids.concat())?,
    })
}
