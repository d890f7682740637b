//! Future prediction heads. Either M independent linear maps from the
//! context vector, or one shared causal self-attention block (residual,
//! 4 heads) followed by M linear output projections.

use ndarray::{s, Array1, Array2};

use super::{AttentionParams, HeadParams, ModelConfig, Parameters, ATTENTION_HEADS};

/// Attention internals for one sequence, kept for the backward pass.
struct AttnSeqCache {
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    /// Softmax weights per head, `(heads, L, L)` flattened as Vec of (L, L).
    attn: Vec<Array2<f64>>,
    /// Concatenated attended values, `(L, d_c)`.
    concat: Array2<f64>,
    /// Block output including the residual, `(L, d_c)`.
    out: Array2<f64>,
}

pub struct HeadCache {
    attn: Vec<AttnSeqCache>,
}

fn linear_map(x: &Array2<f64>, w: &Array2<f64>, b: &Array1<f64>) -> Array2<f64> {
    let mut y = x.dot(&w.t());
    for mut row in y.outer_iter_mut() {
        row += b;
    }
    y
}

fn attention_forward(a: &AttentionParams, c: &Array2<f64>) -> AttnSeqCache {
    let (l, dc) = c.dim();
    let heads = ATTENTION_HEADS;
    let dh = dc / heads;
    let scale = 1.0 / (dh as f64).sqrt();

    let q = linear_map(c, &a.wq, &a.bq);
    let k = linear_map(c, &a.wk, &a.bk);
    let v = linear_map(c, &a.wv, &a.bv);

    let mut attn = Vec::with_capacity(heads);
    let mut concat = Array2::<f64>::zeros((l, dc));
    for h in 0..heads {
        let cols = s![.., h * dh..(h + 1) * dh];
        let qh = q.slice(cols);
        let kh = k.slice(cols);
        let vh = v.slice(cols);
        let mut weights = Array2::<f64>::zeros((l, l));
        for i in 0..l {
            // causal: only positions 0..=i participate
            let mut row = weights.row_mut(i);
            let mut max = f64::NEG_INFINITY;
            for j in 0..=i {
                let sc = qh.row(i).dot(&kh.row(j)) * scale;
                row[j] = sc;
                max = max.max(sc);
            }
            let mut denom = 0.0;
            for j in 0..=i {
                let e = (row[j] - max).exp();
                row[j] = e;
                denom += e;
            }
            for j in 0..=i {
                row[j] /= denom;
            }
        }
        let oh = weights.dot(&vh);
        concat.slice_mut(cols).assign(&oh);
        attn.push(weights);
    }
    let mut out = linear_map(&concat, &a.wo, &a.bo);
    out += c;
    AttnSeqCache {
        q,
        k,
        v,
        attn,
        concat,
        out,
    }
}

/// Predictions for a batch of context sequences: `result[b][m]` is the
/// `(L, d)` prediction of frame `t+m+1` from context row `t`.
pub fn predict_future_with_cache(
    params: &Parameters,
    cfg: &ModelConfig,
    contexts: &[Array2<f64>],
) -> (Vec<Vec<Array2<f64>>>, HeadCache) {
    let m_steps = cfg.prediction_steps;
    match &params.heads {
        HeadParams::Linear(heads) => {
            assert_eq!(heads.len(), m_steps);
            let preds = contexts
                .iter()
                .map(|c| {
                    heads
                        .iter()
                        .map(|hd| linear_map(c, &hd.weight, &hd.bias))
                        .collect()
                })
                .collect();
            (preds, HeadCache { attn: Vec::new() })
        }
        HeadParams::Attention(a) => {
            assert_eq!(a.out.len(), m_steps);
            let mut caches = Vec::with_capacity(contexts.len());
            let mut preds = Vec::with_capacity(contexts.len());
            for c in contexts {
                let cache = attention_forward(a, c);
                preds.push(
                    a.out
                        .iter()
                        .map(|hd| linear_map(&cache.out, &hd.weight, &hd.bias))
                        .collect(),
                );
                caches.push(cache);
            }
            (preds, HeadCache { attn: caches })
        }
    }
}

/// Predictions for a single context sequence.
pub fn predict_future(
    params: &Parameters,
    cfg: &ModelConfig,
    context: &Array2<f64>,
) -> Vec<Array2<f64>> {
    let (mut preds, _) = predict_future_with_cache(params, cfg, std::slice::from_ref(context));
    preds.pop().unwrap()
}

/// Backward through the heads. `d_preds[b][m]` matches the forward
/// output; returns the gradient on each context sequence.
pub fn heads_backward(
    params: &Parameters,
    cfg: &ModelConfig,
    cache: &HeadCache,
    contexts: &[Array2<f64>],
    d_preds: &[Vec<Array2<f64>>],
    grads: &mut Parameters,
) -> Vec<Array2<f64>> {
    let m_steps = cfg.prediction_steps;
    match (&params.heads, &mut grads.heads) {
        (HeadParams::Linear(heads), HeadParams::Linear(gheads)) => contexts
            .iter()
            .zip(d_preds)
            .map(|(c, dp)| {
                let mut dc = Array2::<f64>::zeros(c.raw_dim());
                for m in 0..m_steps {
                    gheads[m].weight += &dp[m].t().dot(c);
                    for row in dp[m].outer_iter() {
                        gheads[m].bias += &row;
                    }
                    dc += &dp[m].dot(&heads[m].weight);
                }
                dc
            })
            .collect(),
        (HeadParams::Attention(a), HeadParams::Attention(ga)) => {
            let heads = ATTENTION_HEADS;
            let mut out = Vec::with_capacity(contexts.len());
            for (bi, (c, dp)) in contexts.iter().zip(d_preds).enumerate() {
                let sc = &cache.attn[bi];
                let (l, dc_dim) = c.dim();
                let dh = dc_dim / heads;
                let scale = 1.0 / (dh as f64).sqrt();

                // output projections
                let mut d_out = Array2::<f64>::zeros((l, dc_dim));
                for m in 0..m_steps {
                    ga.out[m].weight += &dp[m].t().dot(&sc.out);
                    for row in dp[m].outer_iter() {
                        ga.out[m].bias += &row;
                    }
                    d_out += &dp[m].dot(&a.out[m].weight);
                }

                // out = concat . Wo^T + bo + c
                ga.wo += &d_out.t().dot(&sc.concat);
                for row in d_out.outer_iter() {
                    ga.bo += &row;
                }
                let mut d_c = d_out.clone(); // residual path
                let d_concat = d_out.dot(&a.wo);

                let mut d_q = Array2::<f64>::zeros((l, dc_dim));
                let mut d_k = Array2::<f64>::zeros((l, dc_dim));
                let mut d_v = Array2::<f64>::zeros((l, dc_dim));
                for h in 0..heads {
                    let cols = s![.., h * dh..(h + 1) * dh];
                    let qh = sc.q.slice(cols);
                    let kh = sc.k.slice(cols);
                    let vh = sc.v.slice(cols);
                    let weights = &sc.attn[h];
                    let d_oh = d_concat.slice(cols);

                    let d_attn = d_oh.dot(&vh.t()); // (L, L)
                    d_v.slice_mut(cols).assign(&weights.t().dot(&d_oh));

                    // masked softmax backward, row by row
                    let mut d_scores = Array2::<f64>::zeros((l, l));
                    for i in 0..l {
                        let wrow = weights.row(i);
                        let drow = d_attn.row(i);
                        let dot: f64 = (0..=i).map(|j| wrow[j] * drow[j]).sum();
                        for j in 0..=i {
                            d_scores[[i, j]] = wrow[j] * (drow[j] - dot);
                        }
                    }
                    let mut dqh = d_scores.dot(&kh);
                    dqh *= scale;
                    let mut dkh = d_scores.t().dot(&qh);
                    dkh *= scale;
                    d_q.slice_mut(cols).assign(&dqh);
                    d_k.slice_mut(cols).assign(&dkh);
                }

                for (w, b, d_proj) in [
                    (&a.wq, "q", &d_q),
                    (&a.wk, "k", &d_k),
                    (&a.wv, "v", &d_v),
                ] {
                    let (gw, gb) = match b {
                        "q" => (&mut ga.wq, &mut ga.bq),
                        "k" => (&mut ga.wk, &mut ga.bk),
                        _ => (&mut ga.wv, &mut ga.bv),
                    };
                    *gw += &d_proj.t().dot(c);
                    for row in d_proj.outer_iter() {
                        *gb += &row;
                    }
                    d_c += &d_proj.dot(w);
                }
                out.push(d_c);
            }
            out
        }
        _ => unreachable!("gradient structure must match parameter structure"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_model, HeadType, ModelConfig};
    use crate::rng::derive_rng;
    use ndarray::Array2;
    use rand::Rng;

    fn cfg(head_type: HeadType) -> ModelConfig {
        ModelConfig {
            channels: 3,
            context_dim: 8,
            context_layers: 1,
            prediction_steps: 2,
            negatives: 1,
            head_type,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn identity_linear_head_reproduces_context() {
        let c = ModelConfig {
            channels: 4,
            context_dim: 4,
            prediction_steps: 1,
            ..cfg(HeadType::Linear)
        };
        let mut p = Parameters::zeros(&c);
        if let HeadParams::Linear(hs) = &mut p.heads {
            hs[0].weight.assign(&Array2::eye(4));
        }
        let ctx = Array2::from_shape_fn((5, 4), |(i, j)| (i * 4 + j) as f64 * 0.1);
        let preds = predict_future(&p, &c, &ctx);
        assert_eq!(preds[0], ctx);
    }

    #[test]
    fn zero_weight_linear_head_repeats_bias() {
        let c = ModelConfig {
            channels: 4,
            context_dim: 4,
            prediction_steps: 1,
            ..cfg(HeadType::Linear)
        };
        let mut p = Parameters::zeros(&c);
        if let HeadParams::Linear(hs) = &mut p.heads {
            hs[0].bias.fill(0.75);
        }
        let ctx = Array2::from_shape_fn((3, 4), |(i, j)| (i + j) as f64);
        let preds = predict_future(&p, &c, &ctx);
        assert!(preds[0].iter().all(|&v| v == 0.75));
    }

    #[test]
    fn attention_is_causal() {
        let c = cfg(HeadType::Attention);
        let p = init_model(&c, &mut derive_rng(10, &[]));
        let mut rng = derive_rng(11, &[]);
        let ctx = Array2::from_shape_fn((6, 8), |_| rng.random::<f64>() - 0.5);
        let base = predict_future(&p, &c, &ctx);
        for t in 0..5 {
            let mut bumped = ctx.clone();
            for j in 0..8 {
                bumped[[t + 1, j]] += 0.37 + j as f64;
            }
            let after = predict_future(&p, &c, &bumped);
            for m in 0..2 {
                for i in 0..=t {
                    for j in 0..3 {
                        assert!(
                            (base[m][[i, j]] - after[m][[i, j]]).abs() < 1e-14,
                            "row {i} changed when perturbing {t}+1"
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        for head_type in [HeadType::Linear, HeadType::Attention] {
            let c = cfg(head_type);
            let mut p = init_model(&c, &mut derive_rng(12, &[]));
            let mut rng = derive_rng(13, &[]);
            let contexts: Vec<Array2<f64>> = (0..2)
                .map(|_| Array2::from_shape_fn((4, 8), |_| rng.random::<f64>() - 0.5))
                .collect();
            let readout: Vec<Vec<Array2<f64>>> = (0..2)
                .map(|_| {
                    (0..2)
                        .map(|_| Array2::from_shape_fn((4, 3), |_| rng.random::<f64>() - 0.5))
                        .collect()
                })
                .collect();

            let loss = |p: &Parameters, contexts: &[Array2<f64>]| -> f64 {
                let (preds, _) = predict_future_with_cache(p, &c, contexts);
                preds
                    .iter()
                    .zip(&readout)
                    .map(|(pm, rm)| {
                        pm.iter()
                            .zip(rm)
                            .map(|(a, b)| (a * b).sum())
                            .sum::<f64>()
                    })
                    .sum()
            };

            let (_, cache) = predict_future_with_cache(&p, &c, &contexts);
            let mut grads = Parameters::zeros(&c);
            let dc = heads_backward(&p, &c, &cache, &contexts, &readout, &mut grads);

            let h = 1e-6;
            for ti in 0..p.tensors().len() {
                let name = p.tensors()[ti].0.clone();
                if !(name.starts_with("head") || name.starts_with("attn")) {
                    continue;
                }
                let n = p.tensors()[ti].2.len();
                for ei in (0..n).step_by((n / 9).max(1)) {
                    let orig = p.tensors()[ti].2[ei];
                    p.tensors_mut()[ti].2[ei] = orig + h;
                    let up = loss(&p, &contexts);
                    p.tensors_mut()[ti].2[ei] = orig - h;
                    let dn = loss(&p, &contexts);
                    p.tensors_mut()[ti].2[ei] = orig;
                    let num = (up - dn) / (2.0 * h);
                    let ana = grads.tensors()[ti].2[ei];
                    let denom = num.abs().max(ana.abs());
                    if denom > 1e-7 {
                        assert!(
                            ((num - ana).abs() / denom) < 1e-4,
                            "{name}[{ei}] {head_type:?}: {ana} vs {num}"
                        );
                    }
                }
            }
            // context gradients
            let mut ctx2 = contexts.clone();
            for b in 0..2 {
                for t in 0..4 {
                    for j in 0..8 {
                        let orig = ctx2[b][[t, j]];
                        ctx2[b][[t, j]] = orig + h;
                        let up = loss(&p, &ctx2);
                        ctx2[b][[t, j]] = orig - h;
                        let dn = loss(&p, &ctx2);
                        ctx2[b][[t, j]] = orig;
                        let num = (up - dn) / (2.0 * h);
                        let ana = dc[b][[t, j]];
                        let denom = num.abs().max(ana.abs());
                        if denom > 1e-7 {
                            assert!(
                                ((num - ana).abs() / denom) < 1e-4,
                                "dc[{b}][{t},{j}] {head_type:?}: {ana} vs {num}"
                            );
                        }
                    }
                }
            }
        }
    }
}
