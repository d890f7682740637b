//! K-means clustering of frame features and the two external cluster
//! quality measures used with forced-alignment labels: purity and
//! normalized mutual information.

use ndarray::{Array2, ArrayView1};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::EvalError;

fn sq_dist(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y) * (x - y))
        .sum()
}

/// Lloyd's algorithm with k-means++ seeding.
///
/// Stops when the largest centroid displacement falls below `tol` or
/// after `max_iters` sweeps. Clusters that empty out are re-seeded to
/// the point currently farthest from its own centroid. Deterministic
/// for a fixed RNG stream; distance ties resolve to the lowest index.
pub fn kmeans(
    points: &Array2<f64>,
    k: usize,
    max_iters: usize,
    tol: f64,
    rng: &mut ChaCha8Rng,
) -> (Vec<usize>, Array2<f64>) {
    let (n, d) = points.dim();
    assert!(k >= 1 && n >= k, "need at least k points");

    // k-means++ seeding
    let mut centroids = Array2::<f64>::zeros((k, d));
    let first = rng.random_range(0..n);
    centroids.row_mut(0).assign(&points.row(first));
    let mut best_sq: Vec<f64> = (0..n)
        .map(|i| sq_dist(points.row(i), centroids.row(0)))
        .collect();
    for c in 1..k {
        let total: f64 = best_sq.iter().sum();
        let chosen = if total <= 0.0 {
            // all mass collapsed; fall back to uniform choice
            rng.random_range(0..n)
        } else {
            let mut target = rng.random::<f64>() * total;
            let mut pick = n - 1;
            for (i, &w) in best_sq.iter().enumerate() {
                if target < w {
                    pick = i;
                    break;
                }
                target -= w;
            }
            pick
        };
        centroids.row_mut(c).assign(&points.row(chosen));
        for i in 0..n {
            let dnew = sq_dist(points.row(i), centroids.row(c));
            if dnew < best_sq[i] {
                best_sq[i] = dnew;
            }
        }
    }

    let mut assignments = vec![0usize; n];
    for _ in 0..max_iters {
        // assignment sweep
        for i in 0..n {
            let mut best = 0usize;
            let mut best_d = f64::INFINITY;
            for c in 0..k {
                let dcur = sq_dist(points.row(i), centroids.row(c));
                if dcur < best_d {
                    best_d = dcur;
                    best = c;
                }
            }
            assignments[i] = best;
        }

        // update sweep
        let mut sums = Array2::<f64>::zeros((k, d));
        let mut counts = vec![0usize; k];
        for i in 0..n {
            sums.row_mut(assignments[i]).scaled_add(1.0, &points.row(i));
            counts[assignments[i]] += 1;
        }
        // re-seed empty clusters to the worst-served point
        for c in 0..k {
            if counts[c] == 0 {
                let far = (0..n)
                    .max_by(|&a, &b| {
                        sq_dist(points.row(a), centroids.row(assignments[a]))
                            .total_cmp(&sq_dist(points.row(b), centroids.row(assignments[b])))
                    })
                    .unwrap();
                sums.row_mut(c).assign(&points.row(far));
                counts[c] = 1;
            }
        }
        let mut max_shift = 0.0f64;
        for c in 0..k {
            let inv = 1.0 / counts[c] as f64;
            let mut shift = 0.0;
            for j in 0..d {
                let new = sums[[c, j]] * inv;
                let delta = new - centroids[[c, j]];
                shift += delta * delta;
                centroids[[c, j]] = new;
            }
            max_shift = max_shift.max(shift.sqrt());
        }
        if max_shift < tol {
            break;
        }
    }
    // final assignment against the settled centroids
    for i in 0..n {
        let mut best = 0usize;
        let mut best_d = f64::INFINITY;
        for c in 0..k {
            let dcur = sq_dist(points.row(i), centroids.row(c));
            if dcur < best_d {
                best_d = dcur;
                best = c;
            }
        }
        assignments[i] = best;
    }
    (assignments, centroids)
}

/// Joint count matrix of cluster ids against label ids.
pub fn contingency(assignments: &[usize], labels: &[usize]) -> Array2<usize> {
    let k = assignments.iter().copied().max().map_or(0, |m| m + 1);
    let l = labels.iter().copied().max().map_or(0, |m| m + 1);
    let mut table = Array2::<usize>::zeros((k, l));
    for (&a, &b) in assignments.iter().zip(labels) {
        table[[a, b]] += 1;
    }
    table
}

/// Fraction of points whose cluster's majority label matches their own.
pub fn purity(assignments: &[usize], labels: &[usize]) -> Result<f64, EvalError> {
    if assignments.len() != labels.len() {
        return Err(EvalError::LengthMismatch {
            a: assignments.len(),
            b: labels.len(),
        });
    }
    assert!(!assignments.is_empty(), "purity of an empty assignment");
    let table = contingency(assignments, labels);
    let majority_sum: usize = table
        .outer_iter()
        .map(|row| row.iter().copied().max().unwrap_or(0))
        .sum();
    Ok(majority_sum as f64 / assignments.len() as f64)
}

fn entropy_from_counts(counts: impl Iterator<Item = usize>, n: f64) -> f64 {
    counts
        .filter(|&c| c > 0)
        .map(|c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum()
}

/// Mutual information normalized by the arithmetic mean of the two
/// entropies (natural log, `0 ln 0 = 0`), clamped to [0, 1]. Constant
/// partitions: both constant means identical up to relabeling (1.0);
/// exactly one constant carries no information (0.0).
pub fn nmi(assignments: &[usize], labels: &[usize]) -> Result<f64, EvalError> {
    if assignments.len() != labels.len() {
        return Err(EvalError::LengthMismatch {
            a: assignments.len(),
            b: labels.len(),
        });
    }
    assert!(!assignments.is_empty(), "nmi of an empty assignment");
    let n = assignments.len() as f64;
    let table = contingency(assignments, labels);
    let row_sums: Vec<usize> = table.outer_iter().map(|r| r.sum()).collect();
    let col_sums: Vec<usize> = (0..table.ncols()).map(|j| table.column(j).sum()).collect();
    let h_a = entropy_from_counts(row_sums.iter().copied(), n);
    let h_b = entropy_from_counts(col_sums.iter().copied(), n);
    if h_a == 0.0 && h_b == 0.0 {
        return Ok(1.0);
    }
    if h_a == 0.0 || h_b == 0.0 {
        return Ok(0.0);
    }
    let mut mi = 0.0;
    for (i, row) in table.outer_iter().enumerate() {
        for (j, &c) in row.iter().enumerate() {
            if c > 0 {
                let p = c as f64 / n;
                mi += p * ((c as f64 * n) / (row_sums[i] as f64 * col_sums[j] as f64)).ln();
            }
        }
    }
    Ok((mi / (0.5 * (h_a + h_b))).clamp(0.0, 1.0))
}
