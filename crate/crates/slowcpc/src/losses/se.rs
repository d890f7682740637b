//! Self-expressing regularizer: each feature frame should be close to
//! the affinity-weighted average of the other frames, so information is
//! shared across the sequence instead of being frame-local.
//!
//! The penalty is the mean squared residual between the features and
//! their self-expressed version; gradients flow through both the
//! features themselves and the cosine affinity weights.

use ndarray::{Array1, Array2};

/// Norms below this are treated as zero rows.
const NORM_EPS: f64 = 1e-8;
/// Row sums of the off-diagonal affinity below this fall back to the
/// identity (the frame expresses itself).
const ROWSUM_EPS: f64 = 1e-8;

/// Pairwise cosine similarity matrix. Rows with near-zero norm produce
/// zero entries, including on the diagonal.
pub fn affinity(z: &Array2<f64>) -> Array2<f64> {
    let l = z.nrows();
    let norms: Vec<f64> = z.outer_iter().map(|r| r.dot(&r).sqrt()).collect();
    let mut a = Array2::<f64>::zeros((l, l));
    for i in 0..l {
        if norms[i] < NORM_EPS {
            continue;
        }
        a[[i, i]] = 1.0;
        for j in (i + 1)..l {
            if norms[j] < NORM_EPS {
                continue;
            }
            let c = z.row(i).dot(&z.row(j)) / (norms[i] * norms[j]);
            a[[i, j]] = c;
            a[[j, i]] = c;
        }
    }
    a
}

/// Row-normalized off-diagonal affinity combination of the other frames.
/// Frames whose affinity row sums to (near) zero express themselves.
pub fn self_express(z: &Array2<f64>) -> Array2<f64> {
    let (l, d) = z.dim();
    let a = affinity(z);
    let mut out = Array2::<f64>::zeros((l, d));
    for i in 0..l {
        let mut rowsum = 0.0;
        for j in 0..l {
            if j != i {
                rowsum += a[[i, j]];
            }
        }
        if rowsum.abs() < ROWSUM_EPS {
            out.row_mut(i).assign(&z.row(i));
            continue;
        }
        for j in 0..l {
            if j == i {
                continue;
            }
            let w = a[[i, j]] / rowsum;
            if w != 0.0 {
                out.row_mut(i).scaled_add(w, &z.row(j));
            }
        }
    }
    out
}

/// Mean squared residual between the features and their self-expressed
/// version, over all `L * d` entries.
pub fn se_loss(z: &Array2<f64>) -> f64 {
    let (l, d) = z.dim();
    let zbar = self_express(z);
    let mut acc = 0.0;
    for (a, b) in z.iter().zip(zbar.iter()) {
        let r = a - b;
        acc += r * r;
    }
    acc / (l * d) as f64
}

/// Loss plus the exact gradient w.r.t. every feature entry (no stop
/// gradient anywhere: the affinity weights are differentiated too).
pub fn se_loss_grad(z: &Array2<f64>) -> (f64, Array2<f64>) {
    let (l, d) = z.dim();
    let norms: Vec<f64> = z.outer_iter().map(|r| r.dot(&r).sqrt()).collect();
    let a = affinity(z);

    // forward pieces: row sums and the normalized weights B
    let mut rowsum = vec![0.0f64; l];
    for i in 0..l {
        for j in 0..l {
            if j != i {
                rowsum[i] += a[[i, j]];
            }
        }
    }
    let degenerate: Vec<bool> = rowsum.iter().map(|r| r.abs() < ROWSUM_EPS).collect();
    let mut b = Array2::<f64>::zeros((l, l));
    for i in 0..l {
        if degenerate[i] {
            continue;
        }
        for j in 0..l {
            if j != i {
                b[[i, j]] = a[[i, j]] / rowsum[i];
            }
        }
    }
    let mut zbar = b.dot(z);
    for i in 0..l {
        if degenerate[i] {
            zbar.row_mut(i).assign(&z.row(i));
        }
    }

    let scale = 2.0 / (l * d) as f64;
    let mut loss = 0.0;
    // g = d loss / d zbar_residual: (2/(L d)) (z - zbar)
    let mut g = Array2::<f64>::zeros((l, d));
    for i in 0..l {
        for c in 0..d {
            let r = z[[i, c]] - zbar[[i, c]];
            loss += r * r;
            g[[i, c]] = scale * r;
        }
    }
    loss /= (l * d) as f64;

    // direct term: d loss / d z += g; degenerate rows cancel it exactly
    // through the identity fallback, so skip both contributions there.
    let mut dz = Array2::<f64>::zeros((l, d));
    for i in 0..l {
        if !degenerate[i] {
            dz.row_mut(i).scaled_add(1.0, &g.row(i));
        }
    }

    // right-factor term: zbar_i = sum_j B_ij z_j
    // dz_j -= sum_i B_ij g_i
    for i in 0..l {
        if degenerate[i] {
            continue;
        }
        for j in 0..l {
            let w = b[[i, j]];
            if w != 0.0 {
                dz.row_mut(j).scaled_add(-w, &g.row(i));
            }
        }
    }

    // affinity term: dE/dB_ij = -g_i . z_j, then through the row
    // normalization and the cosine similarity into z.
    //
    // dE/dA_ij = (dE/dB_ij - sum_k dE/dB_ik B_ik) / rowsum_i
    let mut d_a = Array2::<f64>::zeros((l, l));
    for i in 0..l {
        if degenerate[i] {
            continue;
        }
        let gi = g.row(i);
        let mut db_row = Array1::<f64>::zeros(l);
        let mut weighted = 0.0;
        for j in 0..l {
            if j == i {
                continue;
            }
            let db = -gi.dot(&z.row(j));
            db_row[j] = db;
            weighted += db * b[[i, j]];
        }
        for j in 0..l {
            if j == i {
                continue;
            }
            d_a[[i, j]] = (db_row[j] - weighted) / rowsum[i];
        }
    }

    // cosine backward for every ordered off-diagonal pair
    for i in 0..l {
        for j in 0..l {
            if i == j {
                continue;
            }
            let da = d_a[[i, j]];
            if da == 0.0 || norms[i] < NORM_EPS || norms[j] < NORM_EPS {
                continue;
            }
            let inv = 1.0 / (norms[i] * norms[j]);
            let aij = a[[i, j]];
            let inv_ni2 = 1.0 / (norms[i] * norms[i]);
            let inv_nj2 = 1.0 / (norms[j] * norms[j]);
            for c in 0..d {
                let zi = z[[i, c]];
                let zj = z[[j, c]];
                dz[[i, c]] += da * (zj * inv - aij * zi * inv_ni2);
                dz[[j, c]] += da * (zi * inv - aij * zj * inv_nj2);
            }
        }
    }

    (loss, dz)
}
