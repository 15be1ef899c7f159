//! Seeded k-means (k-means++ init, Lloyd iterations) over f32 rows.
//!
//! Assignment distances and centroid sums are accumulated in f64, and every
//! reduction walks points in index order, so a given seed produces the same
//! clustering regardless of thread count.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use crate::par::par_map_range;

pub struct KMeans {
    /// `k * d`, row-major.
    pub centroids: Vec<f64>,
    /// Cluster id per input row.
    pub assignments: Vec<usize>,
    pub k: usize,
    pub d: usize,
}

/// Squared Euclidean distance between an f32 row and an f64 centroid.
pub fn squared_distance(row: &[f32], centroid: &[f64]) -> f64 {
    debug_assert_eq!(row.len(), centroid.len());
    let mut acc = 0.0f64;
    for (x, c) in row.iter().zip(centroid) {
        let diff = *x as f64 - c;
        acc += diff * diff;
    }
    acc
}

/// Index of the nearest centroid (ties to the lower id).
pub fn nearest_centroid(row: &[f32], centroids: &[f64], k: usize, d: usize) -> usize {
    let mut best = 0usize;
    let mut best_dist = squared_distance(row, &centroids[..d]);
    for c in 1..k {
        let dist = squared_distance(row, &centroids[c * d..(c + 1) * d]);
        if dist < best_dist {
            best = c;
            best_dist = dist;
        }
    }
    best
}

/// Cluster `n` rows of width `d` into `k` groups with at most `iters` Lloyd
/// rounds. Requires `1 <= k <= n`; callers validate.
pub fn lloyd(points: &[f32], n: usize, d: usize, k: usize, iters: usize, seed: u64) -> KMeans {
    assert!(k >= 1 && k <= n, "k must be in 1..=n");
    assert_eq!(points.len(), n * d);
    let mut rng = ChaCha20Rng::seed_from_u64(seed);

    let mut centroids = seed_plus_plus(points, n, d, k, &mut rng);
    let mut assignments = vec![0usize; n];

    for _ in 0..iters.max(1) {
        let next = par_map_range(n, |i| {
            nearest_centroid(&points[i * d..(i + 1) * d], &centroids, k, d)
        });
        let converged = next == assignments;
        assignments = next;
        fix_empty_clusters(points, n, d, k, &centroids, &mut assignments);
        recompute_centroids(points, n, d, k, &assignments, &mut centroids);
        if converged {
            break;
        }
    }

    KMeans {
        centroids,
        assignments,
        k,
        d,
    }
}

/// k-means++ seeding: first centroid uniform, the rest proportional to the
/// squared distance from the nearest chosen centroid.
fn seed_plus_plus(points: &[f32], n: usize, d: usize, k: usize, rng: &mut ChaCha20Rng) -> Vec<f64> {
    let row = |i: usize| &points[i * d..(i + 1) * d];
    let mut centroids = Vec::with_capacity(k * d);
    let first = rng.random_range(0..n);
    centroids.extend(row(first).iter().map(|v| *v as f64));

    let mut dist2: Vec<f64> = (0..n)
        .map(|i| squared_distance(row(i), &centroids[..d]))
        .collect();

    for _ in 1..k {
        let total: f64 = dist2.iter().sum();
        let chosen = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut pick = n - 1;
            for (i, w) in dist2.iter().enumerate() {
                if target < *w {
                    pick = i;
                    break;
                }
                target -= w;
            }
            pick
        } else {
            // All mass collapsed (duplicate-heavy input): fall back to a
            // uniform draw; Lloyd's empty-cluster repair copes downstream.
            rng.random_range(0..n)
        };
        let start = centroids.len();
        centroids.extend(row(chosen).iter().map(|v| *v as f64));
        for i in 0..n {
            let dc = squared_distance(row(i), &centroids[start..start + d]);
            if dc < dist2[i] {
                dist2[i] = dc;
            }
        }
    }
    centroids
}

/// Give every empty cluster the member farthest from its current centroid,
/// stealing only from clusters that keep at least one row. Deterministic:
/// clusters are repaired in ascending id order, the farthest row wins with
/// ties to the lower row index.
fn fix_empty_clusters(
    points: &[f32],
    n: usize,
    d: usize,
    k: usize,
    centroids: &[f64],
    assignments: &mut [usize],
) {
    let mut sizes = vec![0usize; k];
    for a in assignments.iter() {
        sizes[*a] += 1;
    }
    for empty in 0..k {
        if sizes[empty] > 0 {
            continue;
        }
        let mut best: Option<(usize, f64)> = None;
        for i in 0..n {
            let a = assignments[i];
            if sizes[a] <= 1 {
                continue;
            }
            let dist = squared_distance(&points[i * d..(i + 1) * d], &centroids[a * d..(a + 1) * d]);
            let better = match best {
                None => true,
                Some((_, bd)) => dist > bd,
            };
            if better {
                best = Some((i, dist));
            }
        }
        if let Some((steal, _)) = best {
            sizes[assignments[steal]] -= 1;
            assignments[steal] = empty;
            sizes[empty] += 1;
        }
    }
}

fn recompute_centroids(
    points: &[f32],
    n: usize,
    d: usize,
    k: usize,
    assignments: &[usize],
    centroids: &mut Vec<f64>,
) {
    let mut sums = vec![0.0f64; k * d];
    let mut counts = vec![0usize; k];
    for i in 0..n {
        let c = assignments[i];
        counts[c] += 1;
        let dst = &mut sums[c * d..(c + 1) * d];
        for (s, v) in dst.iter_mut().zip(&points[i * d..(i + 1) * d]) {
            *s += *v as f64;
        }
    }
    for c in 0..k {
        if counts[c] == 0 {
            // Unrepairable empty cluster (k > distinct rows): keep the old
            // centroid rather than dividing by zero.
            continue;
        }
        let inv = 1.0 / counts[c] as f64;
        for j in 0..d {
            centroids[c * d + j] = sums[c * d + j] * inv;
        }
    }
}
