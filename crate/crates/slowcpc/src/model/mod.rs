//! The predictive coding network: a strided convolutional encoder with
//! per-frame channel normalization, a stacked LSTM context network, and
//! per-step future prediction heads (independent linear maps, or one
//! shared causal attention block with per-step output projections).
//!
//! Forward passes are pure functions of `Parameters`; the `*_with_cache`
//! variants additionally return what the hand-written backward passes
//! need. All arithmetic is `f64`.

mod checkpoint;
mod encoder;
mod heads;
mod lstm;

pub use checkpoint::{load_checkpoint, save_checkpoint, ModelState, CHECKPOINT_MAGIC};
pub(crate) use checkpoint::{apply_model_config_kv, model_config_kv};
pub use encoder::{channel_norm, encode, encode_with_cache, encoder_backward, EncoderCache};
pub use heads::{predict_future, predict_future_with_cache, heads_backward, HeadCache};
pub use lstm::{contextualize, lstm_forward_with_cache, lstm_backward, LstmCache};

use std::path::PathBuf;

use ndarray::{Array1, Array2, Array3};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::audio::ENCODER_STRIDE;

/// Heads of the causal self-attention block used by [`HeadType::Attention`].
pub const ATTENTION_HEADS: usize = 4;
/// Epsilon inside the channel-norm variance square root.
pub const CHANNEL_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("shape error: {0}")]
    ShapeError(String),
    #[error("invalid model config: {0}")]
    BadConfig(String),
    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),
    #[error("checkpoint config mismatch: {0}")]
    ConfigMismatch(String),
    #[error("{path}: io error: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeadType {
    Linear,
    Attention,
}

impl HeadType {
    pub fn as_str(&self) -> &'static str {
        match self {
            HeadType::Linear => "linear",
            HeadType::Attention => "attention",
        }
    }

    pub fn parse(s: &str) -> Result<Self, ModelError> {
        match s {
            "linear" => Ok(HeadType::Linear),
            "attention" => Ok(HeadType::Attention),
            other => Err(ModelError::BadConfig(format!(
                "unknown head type {other:?}"
            ))),
        }
    }
}

/// Architecture hyperparameters. `channels` doubles as the feature
/// dimension `d` of the encoder output.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub channels: usize,
    pub kernel_sizes: [usize; 5],
    pub strides: [usize; 5],
    pub paddings: [usize; 5],
    pub context_dim: usize,
    pub context_layers: usize,
    pub prediction_steps: usize,
    pub negatives: usize,
    pub head_type: HeadType,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            channels: 256,
            kernel_sizes: [10, 8, 4, 4, 4],
            strides: [5, 4, 2, 2, 2],
            paddings: [3, 2, 1, 1, 1],
            context_dim: 256,
            context_layers: 1,
            prediction_steps: 12,
            negatives: 128,
            head_type: HeadType::Linear,
        }
    }
}

impl ModelConfig {
    pub fn feature_dim(&self) -> usize {
        self.channels
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let stride_product: usize = self.strides.iter().product();
        if stride_product != ENCODER_STRIDE {
            return Err(ModelError::BadConfig(format!(
                "strides multiply to {stride_product}, expected {ENCODER_STRIDE}"
            )));
        }
        if self.prediction_steps < 1 {
            return Err(ModelError::BadConfig("prediction_steps must be >= 1".into()));
        }
        if self.channels == 0 || self.context_dim == 0 {
            return Err(ModelError::BadConfig("zero-sized layer".into()));
        }
        if !(self.context_layers == 1 || self.context_layers == 2) {
            return Err(ModelError::BadConfig(format!(
                "context_layers must be 1 or 2, got {}",
                self.context_layers
            )));
        }
        if self.head_type == HeadType::Attention && self.context_dim % ATTENTION_HEADS != 0 {
            return Err(ModelError::BadConfig(format!(
                "context_dim {} not divisible by {ATTENTION_HEADS} attention heads",
                self.context_dim
            )));
        }
        Ok(())
    }
}

/// One encoder block: convolution weights plus channel-norm affine.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvBlock {
    /// (out channels, in channels, kernel)
    pub weight: Array3<f64>,
    pub bias: Array1<f64>,
    pub gain: Array1<f64>,
    pub shift: Array1<f64>,
}

/// One LSTM layer; gate order within the `4H` axis is `[i, f, g, o]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmLayer {
    /// (4H, input dim)
    pub wx: Array2<f64>,
    /// (4H, H)
    pub wh: Array2<f64>,
    pub bias: Array1<f64>,
}

/// A single linear projection context -> feature space.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearHead {
    /// (feature dim, context dim)
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

/// Shared causal self-attention block followed by per-step projections.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams {
    pub wq: Array2<f64>,
    pub bq: Array1<f64>,
    pub wk: Array2<f64>,
    pub bk: Array1<f64>,
    pub wv: Array2<f64>,
    pub bv: Array1<f64>,
    pub wo: Array2<f64>,
    pub bo: Array1<f64>,
    pub out: Vec<LinearHead>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum HeadParams {
    Linear(Vec<LinearHead>),
    Attention(AttentionParams),
}

/// Every learnable array of the model, in a fixed canonical order.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameters {
    pub conv: Vec<ConvBlock>,
    pub lstm: Vec<LstmLayer>,
    pub heads: HeadParams,
}

/// Borrowed view of one named parameter tensor.
pub type TensorView<'a> = (String, Vec<usize>, &'a [f64]);
/// Mutable borrowed view of one named parameter tensor.
pub type TensorViewMut<'a> = (String, Vec<usize>, &'a mut [f64]);

macro_rules! push_tensor {
    ($vec:expr, $name:expr, $arr:expr, $slice_fn:ident) => {
        $vec.push((
            $name,
            $arr.shape().to_vec(),
            $arr.$slice_fn().expect("parameter arrays are standard layout"),
        ))
    };
}

impl Parameters {
    /// Named tensors in canonical (construction) order. The order is part
    /// of the determinism contract: the optimizer zips moment arrays with
    /// gradients positionally.
    pub fn tensors(&self) -> Vec<TensorView<'_>> {
        let mut out = Vec::new();
        for (i, c) in self.conv.iter().enumerate() {
            push_tensor!(out, format!("conv{i}.weight"), c.weight, as_slice);
            push_tensor!(out, format!("conv{i}.bias"), c.bias, as_slice);
            push_tensor!(out, format!("conv{i}.gain"), c.gain, as_slice);
            push_tensor!(out, format!("conv{i}.shift"), c.shift, as_slice);
        }
        for (i, l) in self.lstm.iter().enumerate() {
            push_tensor!(out, format!("lstm{i}.wx"), l.wx, as_slice);
            push_tensor!(out, format!("lstm{i}.wh"), l.wh, as_slice);
            push_tensor!(out, format!("lstm{i}.bias"), l.bias, as_slice);
        }
        match &self.heads {
            HeadParams::Linear(heads) => {
                for (m, h) in heads.iter().enumerate() {
                    push_tensor!(out, format!("head{m}.weight"), h.weight, as_slice);
                    push_tensor!(out, format!("head{m}.bias"), h.bias, as_slice);
                }
            }
            HeadParams::Attention(a) => {
                push_tensor!(out, "attn.wq".to_string(), a.wq, as_slice);
                push_tensor!(out, "attn.bq".to_string(), a.bq, as_slice);
                push_tensor!(out, "attn.wk".to_string(), a.wk, as_slice);
                push_tensor!(out, "attn.bk".to_string(), a.bk, as_slice);
                push_tensor!(out, "attn.wv".to_string(), a.wv, as_slice);
                push_tensor!(out, "attn.bv".to_string(), a.bv, as_slice);
                push_tensor!(out, "attn.wo".to_string(), a.wo, as_slice);
                push_tensor!(out, "attn.bo".to_string(), a.bo, as_slice);
                for (m, h) in a.out.iter().enumerate() {
                    push_tensor!(out, format!("attn.out{m}.weight"), h.weight, as_slice);
                    push_tensor!(out, format!("attn.out{m}.bias"), h.bias, as_slice);
                }
            }
        }
        out
    }

    /// Mutable variant of [`Parameters::tensors`], same order.
    pub fn tensors_mut(&mut self) -> Vec<TensorViewMut<'_>> {
        let mut out = Vec::new();
        for (i, c) in self.conv.iter_mut().enumerate() {
            push_tensor!(out, format!("conv{i}.weight"), c.weight, as_slice_mut);
            push_tensor!(out, format!("conv{i}.bias"), c.bias, as_slice_mut);
            push_tensor!(out, format!("conv{i}.gain"), c.gain, as_slice_mut);
            push_tensor!(out, format!("conv{i}.shift"), c.shift, as_slice_mut);
        }
        for (i, l) in self.lstm.iter_mut().enumerate() {
            push_tensor!(out, format!("lstm{i}.wx"), l.wx, as_slice_mut);
            push_tensor!(out, format!("lstm{i}.wh"), l.wh, as_slice_mut);
            push_tensor!(out, format!("lstm{i}.bias"), l.bias, as_slice_mut);
        }
        match &mut self.heads {
            HeadParams::Linear(heads) => {
                for (m, h) in heads.iter_mut().enumerate() {
                    push_tensor!(out, format!("head{m}.weight"), h.weight, as_slice_mut);
                    push_tensor!(out, format!("head{m}.bias"), h.bias, as_slice_mut);
                }
            }
            HeadParams::Attention(a) => {
                push_tensor!(out, "attn.wq".to_string(), a.wq, as_slice_mut);
                push_tensor!(out, "attn.bq".to_string(), a.bq, as_slice_mut);
                push_tensor!(out, "attn.wk".to_string(), a.wk, as_slice_mut);
                push_tensor!(out, "attn.bk".to_string(), a.bk, as_slice_mut);
                push_tensor!(out, "attn.wv".to_string(), a.wv, as_slice_mut);
                push_tensor!(out, "attn.bv".to_string(), a.bv, as_slice_mut);
                push_tensor!(out, "attn.wo".to_string(), a.wo, as_slice_mut);
                push_tensor!(out, "attn.bo".to_string(), a.bo, as_slice_mut);
                for (m, h) in a.out.iter_mut().enumerate() {
                    push_tensor!(out, format!("attn.out{m}.weight"), h.weight, as_slice_mut);
                    push_tensor!(out, format!("attn.out{m}.bias"), h.bias, as_slice_mut);
                }
            }
        }
        out
    }

    /// All-zero parameters with the same shapes; used for gradients and
    /// optimizer moments.
    pub fn zeros(cfg: &ModelConfig) -> Parameters {
        build_parameters(
            cfg,
            |_fan_in, _rng: &mut Option<&mut ChaCha8Rng>| 0.0,
            &mut None,
            false,
        )
    }

    /// Number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.tensors().iter().map(|(_, _, s)| s.len()).sum()
    }

    /// True if every entry of every tensor is finite.
    pub fn all_finite(&self) -> bool {
        self.tensors()
            .iter()
            .all(|(_, _, s)| s.iter().all(|v| v.is_finite()))
    }

    /// Scale every tensor in place.
    pub fn scale(&mut self, factor: f64) {
        for (_, _, s) in self.tensors_mut() {
            for v in s {
                *v *= factor;
            }
        }
    }

    /// Euclidean norm over all tensors.
    pub fn global_norm(&self) -> f64 {
        self.tensors()
            .iter()
            .map(|(_, _, s)| s.iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }
}

/// Build a parameter set, drawing each weight via `draw(fan_in, rng)`.
/// With `init_constants` the channel-norm gains and LSTM forget-gate
/// biases start at one; without it every non-weight array is zero, which
/// is what gradient and moment buffers need.
fn build_parameters(
    cfg: &ModelConfig,
    draw: impl Fn(usize, &mut Option<&mut ChaCha8Rng>) -> f64,
    rng: &mut Option<&mut ChaCha8Rng>,
    init_constants: bool,
) -> Parameters {
    let d = cfg.channels;
    let mut conv = Vec::with_capacity(5);
    let mut in_ch = 1usize;
    for layer in 0..5 {
        let k = cfg.kernel_sizes[layer];
        let fan_in = in_ch * k;
        let mut weight = Array3::<f64>::zeros((d, in_ch, k));
        for v in weight.iter_mut() {
            *v = draw(fan_in, rng);
        }
        conv.push(ConvBlock {
            weight,
            bias: Array1::zeros(d),
            gain: if init_constants {
                Array1::ones(d)
            } else {
                Array1::zeros(d)
            },
            shift: Array1::zeros(d),
        });
        in_ch = d;
    }

    let h = cfg.context_dim;
    let mut lstm = Vec::with_capacity(cfg.context_layers);
    let mut input_dim = d;
    for _ in 0..cfg.context_layers {
        let mut wx = Array2::<f64>::zeros((4 * h, input_dim));
        for v in wx.iter_mut() {
            *v = draw(input_dim, rng);
        }
        let mut wh = Array2::<f64>::zeros((4 * h, h));
        for v in wh.iter_mut() {
            *v = draw(h, rng);
        }
        let mut bias = Array1::<f64>::zeros(4 * h);
        if init_constants {
            // forget-gate chunk starts at one
            bias.slice_mut(ndarray::s![h..2 * h]).fill(1.0);
        }
        lstm.push(LstmLayer { wx, wh, bias });
        input_dim = h;
    }

    let linear_head = |in_dim: usize, rng: &mut Option<&mut ChaCha8Rng>| {
        let mut weight = Array2::<f64>::zeros((d, in_dim));
        for v in weight.iter_mut() {
            *v = draw(in_dim, rng);
        }
        LinearHead {
            weight,
            bias: Array1::zeros(d),
        }
    };

    let heads = match cfg.head_type {
        HeadType::Linear => HeadParams::Linear(
            (0..cfg.prediction_steps)
                .map(|_| linear_head(h, rng))
                .collect(),
        ),
        HeadType::Attention => {
            let proj = |rng: &mut Option<&mut ChaCha8Rng>| {
                let mut w = Array2::<f64>::zeros((h, h));
                for v in w.iter_mut() {
                    *v = draw(h, rng);
                }
                (w, Array1::<f64>::zeros(h))
            };
            let (wq, bq) = proj(rng);
            let (wk, bk) = proj(rng);
            let (wv, bv) = proj(rng);
            let (wo, bo) = proj(rng);
            let out = (0..cfg.prediction_steps)
                .map(|_| linear_head(h, rng))
                .collect();
            HeadParams::Attention(AttentionParams {
                wq,
                bq,
                wk,
                bk,
                wv,
                bv,
                wo,
                bo,
                out,
            })
        }
    };

    Parameters { conv, lstm, heads }
}

/// Initialize parameters: weights uniform in `(-a, a)` with
/// `a = sqrt(1/fan_in)`, zero biases, unit norm gains, forget-gate
/// biases one. Deterministic for a fixed RNG stream.
pub fn init_model(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Parameters {
    build_parameters(
        cfg,
        |fan_in, rng| {
            let a = (1.0 / fan_in as f64).sqrt();
            let r = rng
                .as_mut()
                .expect("init_model always passes an rng")
                .random::<f64>();
            (2.0 * r - 1.0) * a
        },
        &mut Some(rng),
        true,
    )
}
