//! InfoNCE: softmax cross-entropy over one true future frame and K
//! uniformly sampled distractors, scored by dot product against the
//! per-step prediction.

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::LossError;

/// Negative sample indices for every (batch row, reference time,
/// prediction step) triple: K (row, frame) pairs each, never equal to
/// the positive `(b, t + m + 1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct NegativeSet {
    pub batch: usize,
    pub len: usize,
    /// Number of valid reference times `t` (i.e. `L - M`).
    pub valid_t: usize,
    pub m_steps: usize,
    pub k: usize,
    /// Flattened `[b][t][m][k]` of (row, frame) pairs.
    pub indices: Vec<(u32, u32)>,
}

impl NegativeSet {
    #[inline]
    pub fn at(&self, b: usize, t: usize, m: usize) -> &[(u32, u32)] {
        let base = (((b * self.valid_t) + t) * self.m_steps + m) * self.k;
        &self.indices[base..base + self.k]
    }
}

/// Draw K negatives per (b, t, m), uniform with replacement over every
/// (row, frame) position in the batch except the positive itself.
/// Deterministic for a fixed RNG stream.
pub fn sample_negatives(
    batch: usize,
    len: usize,
    m_steps: usize,
    k: usize,
    rng: &mut ChaCha8Rng,
) -> Result<NegativeSet, LossError> {
    if len <= m_steps {
        return Err(LossError::DegenerateRange { len, m_steps });
    }
    let valid_t = len - m_steps;
    let pool = batch * len;
    if k >= 1 && pool < 2 {
        return Err(LossError::DegenerateRange { len, m_steps });
    }
    let mut indices = Vec::with_capacity(batch * valid_t * m_steps * k);
    for b in 0..batch {
        for t in 0..valid_t {
            for m in 0..m_steps {
                let positive = b * len + (t + m + 1);
                for _ in 0..k {
                    let mut draw = rng.random_range(0..pool - 1);
                    if draw >= positive {
                        draw += 1;
                    }
                    indices.push(((draw / len) as u32, (draw % len) as u32));
                }
            }
        }
    }
    Ok(NegativeSet {
        batch,
        len,
        valid_t,
        m_steps,
        k,
        indices,
    })
}

fn check_shapes(
    z: &[Array2<f64>],
    predictions: &[Vec<Array2<f64>>],
    negatives: &NegativeSet,
) -> Result<(), LossError> {
    if z.len() != negatives.batch || predictions.len() != negatives.batch {
        return Err(LossError::ShapeMismatch(
            "batch size disagreement between features, predictions and negatives".into(),
        ));
    }
    for (zb, pb) in z.iter().zip(predictions) {
        if zb.nrows() != negatives.len || pb.len() != negatives.m_steps {
            return Err(LossError::ShapeMismatch(
                "sequence length or step count disagreement".into(),
            ));
        }
    }
    Ok(())
}

/// InfoNCE loss and per-step accuracy.
///
/// For every batch row, reference time `t` with `t + M <= L`, and step
/// `m`, the score of candidate `z` against prediction `p` is `z . p`;
/// the loss is the mean negative log softmax probability of the true
/// frame `z[t + m]`, and accuracy is the fraction of cases where the
/// positive score is strictly largest.
pub fn cpc_loss(
    z: &[Array2<f64>],
    predictions: &[Vec<Array2<f64>>],
    negatives: &NegativeSet,
) -> Result<(f64, Vec<f64>), LossError> {
    let (loss, acc, _, _) = cpc_loss_impl(z, predictions, negatives, false)?;
    Ok((loss, acc))
}

/// InfoNCE with gradients w.r.t. the candidate features and the
/// predictions.
#[allow(clippy::type_complexity)]
pub fn cpc_loss_grad(
    z: &[Array2<f64>],
    predictions: &[Vec<Array2<f64>>],
    negatives: &NegativeSet,
) -> Result<(f64, Vec<f64>, Vec<Array2<f64>>, Vec<Vec<Array2<f64>>>), LossError> {
    let (loss, acc, dz, dp) = cpc_loss_impl(z, predictions, negatives, true)?;
    Ok((loss, acc, dz.unwrap(), dp.unwrap()))
}

#[allow(clippy::type_complexity)]
fn cpc_loss_impl(
    z: &[Array2<f64>],
    predictions: &[Vec<Array2<f64>>],
    negatives: &NegativeSet,
    want_grad: bool,
) -> Result<
    (
        f64,
        Vec<f64>,
        Option<Vec<Array2<f64>>>,
        Option<Vec<Vec<Array2<f64>>>>,
    ),
    LossError,
> {
    check_shapes(z, predictions, negatives)?;
    let (batch, m_steps, k, valid_t) = (
        negatives.batch,
        negatives.m_steps,
        negatives.k,
        negatives.valid_t,
    );
    if valid_t == 0 {
        return Err(LossError::DegenerateRange {
            len: negatives.len,
            m_steps,
        });
    }

    let mut dz: Option<Vec<Array2<f64>>> = want_grad.then(|| {
        z.iter()
            .map(|zb| Array2::zeros(zb.raw_dim()))
            .collect::<Vec<_>>()
    });
    let mut dp: Option<Vec<Vec<Array2<f64>>>> = want_grad.then(|| {
        predictions
            .iter()
            .map(|pb| {
                pb.iter()
                    .map(|pm| Array2::zeros(pm.raw_dim()))
                    .collect::<Vec<_>>()
            })
            .collect::<Vec<_>>()
    });

    let per_case = 1.0 / (batch * valid_t * m_steps) as f64;
    let mut loss = 0.0;
    let mut correct = vec![0usize; m_steps];
    let mut scores = Vec::with_capacity(k + 1);
    for b in 0..batch {
        for t in 0..valid_t {
            for m in 0..m_steps {
                let pred = &predictions[b][m];
                let p = pred.row(t);
                let pos_frame = t + m + 1;
                let negs = negatives.at(b, t, m);

                scores.clear();
                scores.push(z[b].row(pos_frame).dot(&p));
                for &(nb, nf) in negs {
                    scores.push(z[nb as usize].row(nf as usize).dot(&p));
                }

                let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let denom: f64 = scores.iter().map(|s| (s - max).exp()).sum();
                loss -= (scores[0] - max) - denom.ln();
                if scores[1..].iter().all(|&s| s < scores[0]) {
                    correct[m] += 1;
                }

                if let (Some(dz), Some(dp)) = (dz.as_mut(), dp.as_mut()) {
                    // softmax probabilities; d loss / d score_c = (q_c - [c=pos]) / N
                    for (c, &s) in scores.iter().enumerate() {
                        let q = (s - max).exp() / denom;
                        let coeff = (q - if c == 0 { 1.0 } else { 0.0 }) * per_case;
                        let (cb, cf) = if c == 0 {
                            (b, pos_frame)
                        } else {
                            let (nb, nf) = negs[c - 1];
                            (nb as usize, nf as usize)
                        };
                        let zrow = z[cb].row(cf);
                        dz[cb]
                            .row_mut(cf)
                            .iter_mut()
                            .zip(&p)
                            .for_each(|(g, &pv)| *g += coeff * pv);
                        dp[b][m]
                            .row_mut(t)
                            .iter_mut()
                            .zip(&zrow)
                            .for_each(|(g, &zv)| *g += coeff * zv);
                    }
                }
            }
        }
    }

    let loss = loss * per_case;
    let acc = correct
        .iter()
        .map(|&c| c as f64 / (batch * valid_t) as f64)
        .collect();
    Ok((loss, acc, dz, dp))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::derive_rng;
    use ndarray::Array2;

    /// All-equal scores: uniform softmax gives ln(K+1) for any M, t.
    fn uniform_case(k: usize) -> f64 {
        let l = 4;
        let z = vec![Array2::<f64>::ones((l, 2))];
        let preds = vec![vec![Array2::<f64>::ones((l, 2)); 2]];
        let negs = sample_negatives(1, l, 2, k, &mut derive_rng(1, &[])).unwrap();
        let (loss, acc) = cpc_loss(&z, &preds, &negs).unwrap();
        assert!(acc.iter().all(|&a| a == 0.0), "ties are never correct");
        loss
    }

    #[test]
    fn equal_scores_k1_is_ln2() {
        assert!((uniform_case(1) - (2.0f64).ln()).abs() < 1e-9);
    }

    #[test]
    fn equal_scores_k128_is_ln129() {
        assert!((uniform_case(128) - (129.0f64).ln()).abs() < 1e-9);
    }

    #[test]
    fn single_case_softmax_value() {
        // one t, one m, positive score 1, single negative score 0
        let mut z = Array2::<f64>::zeros((2, 1));
        z[[1, 0]] = 1.0; // positive frame
        let preds = vec![vec![Array2::<f64>::ones((2, 1))]];
        let negs = NegativeSet {
            batch: 1,
            len: 2,
            valid_t: 1,
            m_steps: 1,
            k: 1,
            indices: vec![(0, 0)],
        };
        let (loss, acc) = cpc_loss(&[z], &preds, &negs).unwrap();
        assert!((loss - (1.0 + (-1.0f64).exp()).ln()).abs() < 1e-12);
        assert_eq!(acc, vec![1.0]);
    }

    #[test]
    fn degenerate_range_rejected() {
        assert!(matches!(
            sample_negatives(1, 3, 3, 2, &mut derive_rng(0, &[])),
            Err(LossError::DegenerateRange { .. })
        ));
    }

    #[test]
    fn forced_negative_draw() {
        // one sequence of length 2, K = 1, positive (0, 1): only (0, 0) legal
        let negs = sample_negatives(1, 2, 1, 1, &mut derive_rng(3, &[])).unwrap();
        assert_eq!(negs.indices, vec![(0, 0)]);
    }

    #[test]
    fn k_zero_gives_empty_sets_and_zero_loss() {
        let negs = sample_negatives(1, 4, 1, 0, &mut derive_rng(4, &[])).unwrap();
        assert!(negs.indices.is_empty());
        let z = vec![Array2::<f64>::ones((4, 2))];
        let preds = vec![vec![Array2::<f64>::ones((4, 2))]];
        // candidate pool is the positive alone: softmax certainty
        let (loss, _) = cpc_loss(&z, &preds, &negs).unwrap();
        assert!(loss.abs() < 1e-12);
    }

    #[test]
    fn negatives_never_hit_positive() {
        let negs = sample_negatives(3, 6, 2, 16, &mut derive_rng(5, &[])).unwrap();
        for b in 0..3 {
            for t in 0..negs.valid_t {
                for m in 0..2 {
                    for &(nb, nf) in negs.at(b, t, m) {
                        assert!(!(nb as usize == b && nf as usize == t + m + 1));
                    }
                }
            }
        }
    }

    #[test]
    fn sampling_deterministic() {
        let a = sample_negatives(2, 8, 3, 4, &mut derive_rng(6, &[7])).unwrap();
        let b = sample_negatives(2, 8, 3, 4, &mut derive_rng(6, &[7])).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn matches_brute_force_enumeration() {
        // direct per-(b,t,m) cross-entropy, no log-sum-exp tricks
        let mut rng = derive_rng(8, &[]);
        for _ in 0..10 {
            use rand::Rng;
            let b = rng.random_range(1..3usize);
            let l = rng.random_range(3..8usize);
            let m_steps = rng.random_range(1..l.min(4));
            let k = rng.random_range(1..5usize);
            let d = rng.random_range(1..4usize);
            let z: Vec<Array2<f64>> = (0..b)
                .map(|_| Array2::from_shape_fn((l, d), |_| rng.random::<f64>() - 0.5))
                .collect();
            let preds: Vec<Vec<Array2<f64>>> = (0..b)
                .map(|_| {
                    (0..m_steps)
                        .map(|_| Array2::from_shape_fn((l, d), |_| rng.random::<f64>() - 0.5))
                        .collect()
                })
                .collect();
            let negs = sample_negatives(b, l, m_steps, k, &mut rng).unwrap();

            let mut expect = 0.0;
            let valid_t = l - m_steps;
            for bi in 0..b {
                for t in 0..valid_t {
                    for m in 0..m_steps {
                        let p = preds[bi][m].row(t);
                        let pos = z[bi].row(t + m + 1).dot(&p).exp();
                        let mut denom = pos;
                        for &(nb, nf) in negs.at(bi, t, m) {
                            denom += z[nb as usize].row(nf as usize).dot(&p).exp();
                        }
                        expect -= (pos / denom).ln();
                    }
                }
            }
            expect /= (b * valid_t * m_steps) as f64;
            let (loss, _) = cpc_loss(&z, &preds, &negs).unwrap();
            assert!((loss - expect).abs() < 1e-12, "{loss} vs {expect}");
        }
    }
}
