//! Stacked LSTM context network (1 or 2 layers), causal, zero initial
//! state. Forward runs all batch rows per timestep; backward is plain
//! truncated-nothing BPTT over the full window.

use ndarray::{s, Array2, Array3};

use super::Parameters;

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

struct LayerCache {
    /// Layer input, `(L, B, D_in)`.
    x: Array3<f64>,
    /// Gate activations and cell state, each `(L, B, H)`.
    i: Array3<f64>,
    f: Array3<f64>,
    g: Array3<f64>,
    o: Array3<f64>,
    c: Array3<f64>,
    tc: Array3<f64>,
    h: Array3<f64>,
}

pub struct LstmCache {
    pub batch: usize,
    pub len: usize,
    layers: Vec<LayerCache>,
}

impl LstmCache {
    /// Top-layer hidden sequence of row `b` as `(L, H)`.
    pub fn context_of_row(&self, b: usize) -> Array2<f64> {
        let top = self.layers.last().unwrap();
        top.h
            .slice(s![.., b, ..])
            .as_standard_layout()
            .into_owned()
    }
}

/// Run the stacked LSTM over a batch of equal-length `(L, d)` sequences.
pub fn lstm_forward_with_cache(params: &Parameters, sequences: &[Array2<f64>]) -> LstmCache {
    let batch = sequences.len();
    assert!(batch > 0);
    let len = sequences[0].nrows();
    let mut x = Array3::<f64>::zeros((len, batch, sequences[0].ncols()));
    for (b, seq) in sequences.iter().enumerate() {
        assert_eq!(seq.nrows(), len, "all batch rows must share a length");
        x.slice_mut(s![.., b, ..]).assign(seq);
    }

    let mut layers = Vec::with_capacity(params.lstm.len());
    for layer in &params.lstm {
        let d_in = layer.wx.ncols();
        let h4 = layer.wx.nrows();
        let h = h4 / 4;
        // gates from the input for all timesteps in one GEMM
        let x2 = x
            .view()
            .into_shape_with_order((len * batch, d_in))
            .expect("lstm input is standard layout");
        let from_x = x2.dot(&layer.wx.t()); // (L*B, 4H)

        let mut cache = LayerCache {
            x,
            i: Array3::zeros((len, batch, h)),
            f: Array3::zeros((len, batch, h)),
            g: Array3::zeros((len, batch, h)),
            o: Array3::zeros((len, batch, h)),
            c: Array3::zeros((len, batch, h)),
            tc: Array3::zeros((len, batch, h)),
            h: Array3::zeros((len, batch, h)),
        };
        let mut h_prev = Array2::<f64>::zeros((batch, h));
        let mut c_prev = Array2::<f64>::zeros((batch, h));
        for t in 0..len {
            let mut gates = h_prev.dot(&layer.wh.t()); // (B, 4H)
            gates += &from_x.slice(s![t * batch..(t + 1) * batch, ..]);
            for b in 0..batch {
                for j in 0..h {
                    let pre_i = gates[[b, j]] + layer.bias[j];
                    let pre_f = gates[[b, h + j]] + layer.bias[h + j];
                    let pre_g = gates[[b, 2 * h + j]] + layer.bias[2 * h + j];
                    let pre_o = gates[[b, 3 * h + j]] + layer.bias[3 * h + j];
                    let iv = sigmoid(pre_i);
                    let fv = sigmoid(pre_f);
                    let gv = pre_g.tanh();
                    let ov = sigmoid(pre_o);
                    let cv = fv * c_prev[[b, j]] + iv * gv;
                    let tcv = cv.tanh();
                    let hv = ov * tcv;
                    cache.i[[t, b, j]] = iv;
                    cache.f[[t, b, j]] = fv;
                    cache.g[[t, b, j]] = gv;
                    cache.o[[t, b, j]] = ov;
                    cache.c[[t, b, j]] = cv;
                    cache.tc[[t, b, j]] = tcv;
                    cache.h[[t, b, j]] = hv;
                    h_prev[[b, j]] = hv;
                    c_prev[[b, j]] = cv;
                }
            }
        }
        x = cache.h.clone();
        layers.push(cache);
    }
    LstmCache { batch, len, layers }
}

/// Contextualize one feature sequence; returns the top hidden sequence.
pub fn contextualize(params: &Parameters, z: &Array2<f64>) -> Array2<f64> {
    let cache = lstm_forward_with_cache(params, std::slice::from_ref(z));
    cache.context_of_row(0)
}

/// BPTT. `d_context` is the gradient on the top hidden sequence,
/// `(L, B, H)`. Parameter gradients accumulate into `grads`; the return
/// value is the gradient w.r.t. the bottom-layer input sequences,
/// one `(L, d)` matrix per batch row.
pub fn lstm_backward(
    params: &Parameters,
    cache: &LstmCache,
    d_context: &Array3<f64>,
    grads: &mut Parameters,
) -> Vec<Array2<f64>> {
    let (len, batch) = (cache.len, cache.batch);
    let mut d_upper = d_context.clone();

    for (li, layer) in params.lstm.iter().enumerate().rev() {
        let lc = &cache.layers[li];
        let h = layer.wh.ncols();
        let d_in = layer.wx.ncols();
        let glayer = &mut grads.lstm[li];

        let mut d_x = Array3::<f64>::zeros((len, batch, d_in));
        let mut dh_next = Array2::<f64>::zeros((batch, h));
        let mut dc_next = Array2::<f64>::zeros((batch, h));
        for t in (0..len).rev() {
            let mut dpre = Array2::<f64>::zeros((batch, 4 * h));
            for b in 0..batch {
                for j in 0..h {
                    let dh = d_upper[[t, b, j]] + dh_next[[b, j]];
                    let (iv, fv, gv, ov) = (
                        lc.i[[t, b, j]],
                        lc.f[[t, b, j]],
                        lc.g[[t, b, j]],
                        lc.o[[t, b, j]],
                    );
                    let tcv = lc.tc[[t, b, j]];
                    let d_o = dh * tcv;
                    let dc = dh * ov * (1.0 - tcv * tcv) + dc_next[[b, j]];
                    let c_prev = if t == 0 { 0.0 } else { lc.c[[t - 1, b, j]] };
                    let d_i = dc * gv;
                    let d_g = dc * iv;
                    let d_f = dc * c_prev;
                    dc_next[[b, j]] = dc * fv;
                    dpre[[b, j]] = d_i * iv * (1.0 - iv);
                    dpre[[b, h + j]] = d_f * fv * (1.0 - fv);
                    dpre[[b, 2 * h + j]] = d_g * (1.0 - gv * gv);
                    dpre[[b, 3 * h + j]] = d_o * ov * (1.0 - ov);
                }
            }
            let x_t = lc.x.slice(s![t, .., ..]);
            glayer.wx += &dpre.t().dot(&x_t);
            if t > 0 {
                let h_prev = lc.h.slice(s![t - 1, .., ..]);
                glayer.wh += &dpre.t().dot(&h_prev);
                dh_next = dpre.dot(&layer.wh);
            } else {
                dh_next.fill(0.0);
            }
            for b in 0..batch {
                glayer.bias += &dpre.row(b);
            }
            d_x.slice_mut(s![t, .., ..]).assign(&dpre.dot(&layer.wx));
        }
        d_upper = d_x;
    }

    (0..batch)
        .map(|b| {
            d_upper
                .slice(s![.., b, ..])
                .as_standard_layout()
                .into_owned()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_model, HeadType, ModelConfig};
    use crate::rng::derive_rng;
    use rand::Rng;

    fn cfg(layers: usize) -> ModelConfig {
        ModelConfig {
            channels: 3,
            context_dim: 5,
            context_layers: layers,
            prediction_steps: 1,
            negatives: 1,
            head_type: HeadType::Linear,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn zero_parameters_give_zero_output() {
        let c = cfg(1);
        let p = Parameters::zeros(&c);
        let z = Array2::from_shape_fn((4, 3), |(i, j)| (i + j) as f64);
        let ctx = contextualize(&p, &z);
        assert_eq!(ctx.dim(), (4, 5));
        assert!(ctx.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_frame_single_row() {
        let c = cfg(2);
        let p = init_model(&c, &mut derive_rng(1, &[]));
        let z = Array2::from_shape_fn((1, 3), |(_, j)| j as f64 * 0.1);
        let ctx = contextualize(&p, &z);
        assert_eq!(ctx.dim(), (1, 5));
    }

    #[test]
    fn prefix_property() {
        let c = cfg(2);
        let p = init_model(&c, &mut derive_rng(2, &[]));
        let mut rng = derive_rng(3, &[]);
        let z = Array2::from_shape_fn((9, 3), |_| rng.random::<f64>() - 0.5);
        let full = contextualize(&p, &z);
        for t in 1..=9 {
            let prefix = contextualize(&p, &z.slice(s![0..t, ..]).to_owned());
            for tt in 0..t {
                for j in 0..5 {
                    assert!((full[[tt, j]] - prefix[[tt, j]]).abs() < 1e-14);
                }
            }
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        for layers in [1usize, 2] {
            let c = cfg(layers);
            let mut p = init_model(&c, &mut derive_rng(4, &[]));
            let mut rng = derive_rng(5, &[]);
            let seqs: Vec<Array2<f64>> = (0..2)
                .map(|_| Array2::from_shape_fn((5, 3), |_| rng.random::<f64>() - 0.5))
                .collect();
            let r = Array3::from_shape_fn((5, 2, 5), |_| rng.random::<f64>() - 0.5);

            let cache = lstm_forward_with_cache(&p, &seqs);
            let mut grads = Parameters::zeros(&c);
            let dz = lstm_backward(&p, &cache, &r, &mut grads);

            let loss = |p: &Parameters, seqs: &[Array2<f64>]| -> f64 {
                let cache = lstm_forward_with_cache(p, seqs);
                let mut acc = 0.0;
                for b in 0..seqs.len() {
                    let ctx = cache.context_of_row(b);
                    for t in 0..5 {
                        for j in 0..5 {
                            acc += ctx[[t, j]] * r[[t, b, j]];
                        }
                    }
                }
                acc
            };

            let h = 1e-6;
            // parameter gradients
            for ti in 0..p.tensors().len() {
                let name = p.tensors()[ti].0.clone();
                if !name.starts_with("lstm") {
                    continue;
                }
                let n = p.tensors()[ti].2.len();
                for ei in (0..n).step_by((n / 11).max(1)) {
                    let orig = p.tensors()[ti].2[ei];
                    p.tensors_mut()[ti].2[ei] = orig + h;
                    let up = loss(&p, &seqs);
                    p.tensors_mut()[ti].2[ei] = orig - h;
                    let dn = loss(&p, &seqs);
                    p.tensors_mut()[ti].2[ei] = orig;
                    let num = (up - dn) / (2.0 * h);
                    let ana = grads.tensors()[ti].2[ei];
                    let denom = num.abs().max(ana.abs());
                    if denom > 1e-7 {
                        assert!(
                            ((num - ana).abs() / denom) < 1e-4,
                            "{name}[{ei}] layers={layers}: {ana} vs {num}"
                        );
                    }
                }
            }
            // input gradients
            let mut seqs2 = seqs.clone();
            for b in 0..2 {
                for t in 0..5 {
                    for j in 0..3 {
                        let orig = seqs2[b][[t, j]];
                        seqs2[b][[t, j]] = orig + h;
                        let up = loss(&p, &seqs2);
                        seqs2[b][[t, j]] = orig - h;
                        let dn = loss(&p, &seqs2);
                        seqs2[b][[t, j]] = orig;
                        let num = (up - dn) / (2.0 * h);
                        let ana = dz[b][[t, j]];
                        let denom = num.abs().max(ana.abs());
                        if denom > 1e-7 {
                            assert!(
                                ((num - ana).abs() / denom) < 1e-4,
                                "dz[{b}][{t},{j}] layers={layers}: {ana} vs {num}"
                            );
                        }
                    }
                }
            }
        }
    }
}
