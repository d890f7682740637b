//! Strided 1-D convolutional encoder with per-frame channel normalization.
//!
//! Activations are kept channel-major with batch rows folded into the
//! time axis, `(channels, batch * len)`, so each convolution becomes one
//! GEMM over an im2col matrix. Batch rows never leak into each other:
//! the im2col gather respects per-row boundaries and pads with zeros.

use ndarray::{s, Array1, Array2, ArrayView2};

use super::{ModelConfig, ModelError, Parameters, CHANNEL_NORM_EPS};
use crate::audio::ENCODER_STRIDE;

/// Output length of one conv layer.
fn conv_out_len(l_in: usize, k: usize, stride: usize, pad: usize) -> usize {
    (l_in + 2 * pad - k) / stride + 1
}

/// Per-layer activations the backward pass needs.
pub struct EncoderCache {
    pub batch: usize,
    in_lens: Vec<usize>,
    out_lens: Vec<usize>,
    /// Input of each layer, `(C_in, B * L_in)`.
    inputs: Vec<Array2<f64>>,
    /// Normalized pre-affine activations, `(C_out, B * L_out)`.
    xhat: Vec<Array2<f64>>,
    /// `1 / sqrt(var + eps)` per folded frame.
    inv_sigma: Vec<Array1<f64>>,
    /// Final post-ReLU activations, `(d, B * L)`.
    pub output: Array2<f64>,
}

impl EncoderCache {
    /// Frames per sequence of the final feature map.
    pub fn frames(&self) -> usize {
        *self.out_lens.last().unwrap()
    }

    /// Copy the final features of row `b` as an `(L, d)` matrix.
    pub fn features_of_row(&self, b: usize) -> Array2<f64> {
        let l = self.frames();
        self.output
            .slice(s![.., b * l..(b + 1) * l])
            .t()
            .as_standard_layout()
            .into_owned()
    }
}

/// Gather the im2col matrix `(B * L_out, C_in * k)` for one layer.
/// Entries outside a row's time range are zero (zero padding).
fn im2col(
    input: &Array2<f64>,
    batch: usize,
    l_in: usize,
    l_out: usize,
    k: usize,
    stride: usize,
    pad: usize,
) -> Array2<f64> {
    let c_in = input.nrows();
    let mut col = Array2::<f64>::zeros((batch * l_out, c_in * k));
    for b in 0..batch {
        for j in 0..l_out {
            let mut row = col.row_mut(b * l_out + j);
            let t0 = (j * stride) as isize - pad as isize;
            for c in 0..c_in {
                let src = input.row(c);
                for tau in 0..k {
                    let t = t0 + tau as isize;
                    if t >= 0 && (t as usize) < l_in {
                        row[c * k + tau] = src[b * l_in + t as usize];
                    }
                }
            }
        }
    }
    col
}

/// Scatter-add the im2col gradient back onto the layer input.
fn col2im_add(
    dcol: &Array2<f64>,
    d_input: &mut Array2<f64>,
    batch: usize,
    l_in: usize,
    l_out: usize,
    k: usize,
    stride: usize,
    pad: usize,
) {
    let c_in = d_input.nrows();
    for b in 0..batch {
        for j in 0..l_out {
            let row = dcol.row(b * l_out + j);
            let t0 = (j * stride) as isize - pad as isize;
            for c in 0..c_in {
                let mut dst = d_input.row_mut(c);
                for tau in 0..k {
                    let t = t0 + tau as isize;
                    if t >= 0 && (t as usize) < l_in {
                        dst[b * l_in + t as usize] += row[c * k + tau];
                    }
                }
            }
        }
    }
}

/// One conv block forward on folded activations. Returns
/// (post-ReLU output, xhat, inv_sigma).
fn conv_block_forward(
    input: &Array2<f64>,
    weight2: ArrayView2<f64>,
    bias: &Array1<f64>,
    gain: &Array1<f64>,
    shift: &Array1<f64>,
    batch: usize,
    l_in: usize,
    k: usize,
    stride: usize,
    pad: usize,
) -> (Array2<f64>, Array2<f64>, Array1<f64>) {
    let l_out = conv_out_len(l_in, k, stride, pad);
    let c_out = weight2.nrows();
    let cols = batch * l_out;

    let col = im2col(input, batch, l_in, l_out, k, stride, pad);
    // (C_out, B*L_out)
    let mut y = weight2.dot(&col.t());
    for (c, mut row) in y.outer_iter_mut().enumerate() {
        let b = bias[c];
        row.iter_mut().for_each(|v| *v += b);
    }

    // channel stats per folded frame, accumulated row-wise
    let mut mean = Array1::<f64>::zeros(cols);
    for row in y.outer_iter() {
        mean.iter_mut().zip(row).for_each(|(m, &v)| *m += v);
    }
    mean.mapv_inplace(|v| v / c_out as f64);
    let mut var = Array1::<f64>::zeros(cols);
    for row in y.outer_iter() {
        var.iter_mut()
            .zip(row)
            .zip(&mean)
            .for_each(|((s, &v), &m)| *s += (v - m) * (v - m));
    }
    var.mapv_inplace(|v| v / c_out as f64);
    let inv_sigma = var.mapv(|v| 1.0 / (v + CHANNEL_NORM_EPS).sqrt());

    let mut xhat = y;
    for mut row in xhat.outer_iter_mut() {
        row.iter_mut()
            .zip(&mean)
            .zip(&inv_sigma)
            .for_each(|((v, &m), &is)| *v = (*v - m) * is);
    }
    let mut out = Array2::<f64>::zeros((c_out, cols));
    for c in 0..c_out {
        let (g, sh) = (gain[c], shift[c]);
        out.row_mut(c)
            .iter_mut()
            .zip(xhat.row(c))
            .for_each(|(o, &xh)| *o = (g * xh + sh).max(0.0));
    }
    (out, xhat, inv_sigma)
}

/// Run the 5-block encoder, keeping everything the backward pass needs.
/// `windows` is `(B, T)`; fails unless `T` is a multiple of the total
/// stride so that the length law `L = T / 160` holds exactly.
pub fn encode_with_cache(
    params: &Parameters,
    cfg: &ModelConfig,
    windows: &Array2<f64>,
) -> Result<EncoderCache, ModelError> {
    let (batch, t) = windows.dim();
    if t == 0 || t % ENCODER_STRIDE != 0 {
        return Err(ModelError::ShapeError(format!(
            "window length {t} is not a positive multiple of {ENCODER_STRIDE}"
        )));
    }

    // fold (B, T) -> (1, B*T)
    let mut x = Array2::<f64>::zeros((1, batch * t));
    x.row_mut(0)
        .iter_mut()
        .zip(windows.iter())
        .for_each(|(dst, &src)| *dst = src);

    let mut cache = EncoderCache {
        batch,
        in_lens: Vec::new(),
        out_lens: Vec::new(),
        inputs: Vec::new(),
        xhat: Vec::new(),
        inv_sigma: Vec::new(),
        output: Array2::zeros((0, 0)),
    };

    let mut l_in = t;
    for (layer, block) in params.conv.iter().enumerate() {
        let (k, stride, pad) = (
            cfg.kernel_sizes[layer],
            cfg.strides[layer],
            cfg.paddings[layer],
        );
        let (c_out, c_in, kk) = block.weight.dim();
        debug_assert_eq!(kk, k);
        let w2 = block
            .weight
            .view()
            .into_shape_with_order((c_out, c_in * k))
            .expect("conv weight is standard layout");
        let (out, xhat, inv_sigma) = conv_block_forward(
            &x, w2, &block.bias, &block.gain, &block.shift, batch, l_in, k, stride, pad,
        );
        let l_out = conv_out_len(l_in, k, stride, pad);
        cache.in_lens.push(l_in);
        cache.out_lens.push(l_out);
        cache.inputs.push(std::mem::replace(&mut x, out));
        cache.xhat.push(xhat);
        cache.inv_sigma.push(inv_sigma);
        l_in = l_out;
    }
    debug_assert_eq!(l_in, t / ENCODER_STRIDE);
    cache.output = x;
    Ok(cache)
}

/// Encode a batch of windows into per-sequence `(L, d)` feature matrices.
pub fn encode(
    params: &Parameters,
    cfg: &ModelConfig,
    windows: &Array2<f64>,
) -> Result<Vec<Array2<f64>>, ModelError> {
    let cache = encode_with_cache(params, cfg, windows)?;
    Ok((0..cache.batch).map(|b| cache.features_of_row(b)).collect())
}

/// Backpropagate `d_output` (gradient w.r.t. the final post-ReLU features,
/// `(d, B*L)` folded layout) through the encoder, accumulating parameter
/// gradients into `grads`. The gradient w.r.t. the raw waveform is not
/// needed by any caller and is not produced for the first layer.
pub fn encoder_backward(
    params: &Parameters,
    cfg: &ModelConfig,
    cache: &EncoderCache,
    d_output: &Array2<f64>,
    grads: &mut Parameters,
) {
    let batch = cache.batch;
    let mut d_out = d_output.clone();

    for layer in (0..5).rev() {
        let block = &params.conv[layer];
        let (k, stride, pad) = (
            cfg.kernel_sizes[layer],
            cfg.strides[layer],
            cfg.paddings[layer],
        );
        let (c_out, c_in, _) = block.weight.dim();
        let (l_in, l_out) = (cache.in_lens[layer], cache.out_lens[layer]);
        let cols = batch * l_out;
        let xhat = &cache.xhat[layer];
        let inv_sigma = &cache.inv_sigma[layer];
        // ReLU mask from the post-activation values
        let post: &Array2<f64> = if layer == 4 {
            &cache.output
        } else {
            &cache.inputs[layer + 1]
        };
        let mut dy = d_out;
        dy.zip_mut_with(post, |g, &o| {
            if o <= 0.0 {
                *g = 0.0;
            }
        });

        // channel-norm backward
        let gblock = &mut grads.conv[layer];
        let mut m1 = Array1::<f64>::zeros(cols); // mean_c of gain*dy
        let mut m2 = Array1::<f64>::zeros(cols); // mean_c of gain*dy*xhat
        for c in 0..c_out {
            let g = block.gain[c];
            let dyr = dy.row(c);
            let xr = xhat.row(c);
            let mut dgain = 0.0;
            let mut dshift = 0.0;
            for j in 0..cols {
                let dyv = dyr[j];
                let dyh = g * dyv;
                m1[j] += dyh;
                m2[j] += dyh * xr[j];
                dgain += dyv * xr[j];
                dshift += dyv;
            }
            gblock.gain[c] += dgain;
            gblock.shift[c] += dshift;
        }
        let inv_c = 1.0 / c_out as f64;
        m1.mapv_inplace(|v| v * inv_c);
        m2.mapv_inplace(|v| v * inv_c);
        let mut dconv = Array2::<f64>::zeros((c_out, cols));
        for c in 0..c_out {
            let g = block.gain[c];
            let dyr = dy.row(c);
            let xr = xhat.row(c);
            let mut dr = dconv.row_mut(c);
            for j in 0..cols {
                dr[j] = inv_sigma[j] * (g * dyr[j] - m1[j] - xr[j] * m2[j]);
            }
        }

        // conv backward
        let input = &cache.inputs[layer];
        let col = im2col(input, batch, l_in, l_out, k, stride, pad);
        let dw2 = dconv.dot(&col); // (C_out, C_in*k)
        {
            let mut gw = gblock
                .weight
                .view_mut()
                .into_shape_with_order((c_out, c_in * k))
                .expect("conv weight grad is standard layout");
            gw += &dw2;
        }
        for c in 0..c_out {
            gblock.bias[c] += dconv.row(c).sum();
        }

        if layer > 0 {
            let w2 = block
                .weight
                .view()
                .into_shape_with_order((c_out, c_in * k))
                .expect("conv weight is standard layout");
            let dcol_t = dconv.t().dot(&w2); // (B*L_out, C_in*k)
            let mut d_in = Array2::<f64>::zeros((c_in, batch * l_in));
            col2im_add(&dcol_t, &mut d_in, batch, l_in, l_out, k, stride, pad);
            d_out = d_in;
        } else {
            d_out = Array2::zeros((0, 0));
        }
    }
}

/// Per-frame channel normalization over the feature axis of an `(L, d)`
/// matrix: subtract the frame mean, divide by the frame's population
/// standard deviation (stabilized by an epsilon), then apply the affine.
pub fn channel_norm(x: &Array2<f64>, gain: &Array1<f64>, bias: &Array1<f64>) -> Array2<f64> {
    let d = x.ncols();
    assert!(d >= 2, "channel norm needs at least two channels");
    assert_eq!(gain.len(), d);
    assert_eq!(bias.len(), d);
    let mut out = Array2::<f64>::zeros(x.raw_dim());
    for (xr, mut or) in x.outer_iter().zip(out.outer_iter_mut()) {
        let mean = xr.sum() / d as f64;
        let var = xr.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let inv = 1.0 / (var + CHANNEL_NORM_EPS).sqrt();
        for c in 0..d {
            or[c] = gain[c] * (xr[c] - mean) * inv + bias[c];
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_model, HeadType};
    use crate::rng::derive_rng;
    use ndarray::array;
    use rand::Rng;

    fn cfg(channels: usize) -> ModelConfig {
        ModelConfig {
            channels,
            context_dim: channels,
            prediction_steps: 2,
            negatives: 2,
            head_type: HeadType::Linear,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn channel_norm_two_channel_frame() {
        let x = array![[1.0, 3.0]];
        let gain = Array1::ones(2);
        let bias = Array1::zeros(2);
        let y = channel_norm(&x, &gain, &bias);
        let expect = 1.0 / (1.0 + CHANNEL_NORM_EPS).sqrt();
        assert!((y[[0, 0]] + expect).abs() < 1e-12);
        assert!((y[[0, 1]] - expect).abs() < 1e-12);
    }

    #[test]
    fn channel_norm_constant_frame_zeroed_by_eps() {
        let x = array![[5.0, 5.0, 5.0, 5.0]];
        let y = channel_norm(&x, &Array1::ones(4), &Array1::zeros(4));
        assert!(y.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn channel_norm_zero_gain_gives_bias() {
        let x = array![[1.0, 3.0], [2.0, -1.0]];
        let bias = array![0.5, -0.25];
        let y = channel_norm(&x, &Array1::zeros(2), &bias);
        for row in y.outer_iter() {
            assert_eq!(row[0], 0.5);
            assert_eq!(row[1], -0.25);
        }
    }

    #[test]
    fn channel_norm_statistics() {
        let mut rng = derive_rng(3, &[]);
        let x = Array2::from_shape_fn((20, 16), |_| rng.random::<f64>() * 4.0 - 2.0);
        let y = channel_norm(&x, &Array1::ones(16), &Array1::zeros(16));
        for row in y.outer_iter() {
            let mean = row.sum() / 16.0;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / 16.0;
            assert!(mean.abs() <= 1e-6);
            assert!((var - 1.0).abs() <= 1e-3);
        }
    }

    #[test]
    fn length_law() {
        let c = cfg(8);
        let p = init_model(&c, &mut derive_rng(0, &[]));
        for t in [160usize, 320, 1600, 20480] {
            let w = Array2::from_shape_fn((1, t), |(_, i)| ((i as f64) * 0.01).sin());
            let z = encode(&p, &c, &w).unwrap();
            assert_eq!(z[0].nrows(), t / 160, "T={t}");
            assert_eq!(z[0].ncols(), 8);
        }
    }

    #[test]
    fn non_multiple_window_rejected() {
        let c = cfg(4);
        let p = init_model(&c, &mut derive_rng(0, &[]));
        let w = Array2::zeros((1, 161));
        assert!(matches!(
            encode(&p, &c, &w),
            Err(ModelError::ShapeError(_))
        ));
    }

    #[test]
    fn zero_input_zero_biases_gives_zero_output() {
        let c = cfg(4);
        let p = init_model(&c, &mut derive_rng(0, &[]));
        let w = Array2::zeros((2, 320));
        let z = encode(&p, &c, &w).unwrap();
        for zb in &z {
            assert!(zb.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn outputs_non_negative() {
        let c = cfg(6);
        let p = init_model(&c, &mut derive_rng(7, &[]));
        let mut rng = derive_rng(8, &[]);
        let w = Array2::from_shape_fn((3, 1600), |_| rng.random::<f64>() * 2.0 - 1.0);
        let z = encode(&p, &c, &w).unwrap();
        for zb in &z {
            assert!(zb.iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn batch_rows_independent() {
        // encoding [x; y] must equal encoding x and y separately
        let c = cfg(5);
        let p = init_model(&c, &mut derive_rng(11, &[]));
        let mut rng = derive_rng(12, &[]);
        let w = Array2::from_shape_fn((2, 480), |_| rng.random::<f64>() * 2.0 - 1.0);
        let both = encode(&p, &c, &w).unwrap();
        let first = encode(&p, &c, &w.slice(s![0..1, ..]).to_owned()).unwrap();
        let second = encode(&p, &c, &w.slice(s![1..2, ..]).to_owned()).unwrap();
        assert_eq!(both[0], first[0]);
        assert_eq!(both[1], second[0]);
    }

    #[test]
    fn parameter_gradients_match_finite_differences() {
        let c = cfg(3);
        let mut p = init_model(&c, &mut derive_rng(21, &[]));
        let mut rng = derive_rng(22, &[]);
        let w = Array2::from_shape_fn((2, 320), |_| rng.random::<f64>() * 2.0 - 1.0);
        // random linear readout defines the scalar loss
        let cache = encode_with_cache(&p, &c, &w).unwrap();
        let r = Array2::from_shape_fn(cache.output.raw_dim(), |_| rng.random::<f64>() - 0.5);

        let mut grads = Parameters::zeros(&c);
        encoder_backward(&p, &c, &cache, &r, &mut grads);

        let loss = |p: &Parameters| -> f64 {
            let cache = encode_with_cache(p, &c, &w).unwrap();
            (&cache.output * &r).sum()
        };

        let mut central = |p: &mut Parameters, ti: usize, ei: usize, h: f64| -> f64 {
            let orig = p.tensors()[ti].2[ei];
            p.tensors_mut()[ti].2[ei] = orig + h;
            let up = loss(p);
            p.tensors_mut()[ti].2[ei] = orig - h;
            let dn = loss(p);
            p.tensors_mut()[ti].2[ei] = orig;
            (up - dn) / (2.0 * h)
        };

        let h = 1e-5;
        let mut checked = 0usize;
        for ti in 0..p.tensors().len() {
            let n = p.tensors()[ti].2.len();
            let stride = (n / 7).max(1);
            for ei in (0..n).step_by(stride) {
                let num = central(&mut p, ti, ei, h);
                let num_half = central(&mut p, ti, ei, h / 2.0);
                // a ReLU kink inside the step makes the central difference
                // itself invalid; detect it by step-size inconsistency
                let kink = (num - num_half).abs() > 1e-6 * num.abs().max(num_half.abs()).max(1e-3);
                if kink {
                    continue;
                }
                let ana = grads.tensors()[ti].2[ei];
                let denom = num.abs().max(ana.abs());
                if denom > 1e-7 {
                    let rel = (num - ana).abs() / denom;
                    assert!(
                        rel < 1e-5,
                        "tensor {} entry {ei}: analytic {ana} vs numeric {num}",
                        p.tensors()[ti].0
                    );
                }
                checked += 1;
            }
        }
        assert!(checked > 50);
    }
}
