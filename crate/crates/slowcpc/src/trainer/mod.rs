//! The optimization loop: Adam with global-norm gradient clipping, one
//! full forward/backward per step, a tab-separated metrics log, and
//! periodic checkpointing. Every random decision derives from
//! (seed, step index), so a run is reproducible bit for bit and a
//! resumed run replays exactly the batches it would have seen.

mod config;

pub use config::TrainConfig;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::audio::{sample_training_windows, AudioError, CpcBatch, Dataset};
use crate::augment::{augment_future, AugmentError, NoiseCache};
use crate::losses::{
    combine, component_weights, cpc_loss_grad, lorr_loss_grad, sample_negatives, se_loss_grad,
    LossError,
};
use crate::model::{
    encode_with_cache, encoder_backward, heads_backward, init_model, load_checkpoint,
    lstm_backward, lstm_forward_with_cache, predict_future_with_cache, save_checkpoint,
    ModelError, ModelState, Parameters,
};
use crate::rng::{derive_rng, stream};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Audio(#[from] AudioError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Augment(#[from] AugmentError),
    #[error("non-finite gradient; step aborted, parameters unchanged")]
    NonFiniteGradient,
    #[error("config: {0}")]
    Config(String),
    #[error("{path}: io error: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Per-step training metrics; one log line each.
#[derive(Debug, Clone, PartialEq)]
pub struct StepMetrics {
    pub step: u64,
    pub total: f64,
    pub cpc: f64,
    pub se: f64,
    pub lorr: f64,
    pub mean_accuracy: f64,
    pub grad_norm: f64,
}

impl StepMetrics {
    pub fn log_line(&self) -> String {
        format!(
            "{}\t{:.10e}\t{:.10e}\t{:.10e}\t{:.10e}\t{:.10e}\t{:.10e}",
            self.step, self.total, self.cpc, self.se, self.lorr, self.mean_accuracy, self.grad_norm
        )
    }
}

/// Scale all gradients so the global Euclidean norm is at most
/// `max_norm`; returns the pre-clip norm.
pub fn clip_global_norm(grads: &mut Parameters, max_norm: f64) -> f64 {
    let norm = grads.global_norm();
    if norm > max_norm && norm > 0.0 {
        grads.scale(max_norm / norm);
    }
    norm
}

/// One Adam update with bias correction. Rejects non-finite gradients
/// without touching the state; otherwise clips, updates the moments and
/// parameters, and increments the step counter. Returns the pre-clip
/// gradient norm.
pub fn adam_update(
    state: &mut ModelState,
    mut grads: Parameters,
    cfg: &TrainConfig,
) -> Result<f64, TrainError> {
    if !grads.all_finite() {
        return Err(TrainError::NonFiniteGradient);
    }
    let pre_norm = clip_global_norm(&mut grads, cfg.grad_clip_norm);
    let t = state.step + 1;
    let (b1, b2, eps, lr) = (cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps, cfg.learning_rate);
    let bc1 = 1.0 - b1.powi(t as i32);
    let bc2 = 1.0 - b2.powi(t as i32);

    let mut theta = state.params.tensors_mut();
    let mut ms = state.adam_m.tensors_mut();
    let mut vs = state.adam_v.tensors_mut();
    let gs = grads.tensors();
    for i in 0..theta.len() {
        let (t_slice, m_slice, v_slice, g_slice) =
            (&mut theta[i].2, &mut ms[i].2, &mut vs[i].2, &gs[i].2);
        for j in 0..t_slice.len() {
            let g = g_slice[j];
            let m = b1 * m_slice[j] + (1.0 - b1) * g;
            let v = b2 * v_slice[j] + (1.0 - b2) * g * g;
            m_slice[j] = m;
            v_slice[j] = v;
            let m_hat = m / bc1;
            let v_hat = v / bc2;
            t_slice[j] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    drop(theta);
    drop(ms);
    drop(vs);
    state.step = t;
    Ok(pre_norm)
}

/// Fold per-row `(L, d)` gradients into the encoder's `(d, B*L)` layout.
fn fold_feature_grads(rows: &[Array2<f64>]) -> Array2<f64> {
    let b = rows.len();
    let (l, d) = rows[0].dim();
    let mut folded = Array2::<f64>::zeros((d, b * l));
    for (bi, row) in rows.iter().enumerate() {
        folded
            .slice_mut(ndarray::s![.., bi * l..(bi + 1) * l])
            .assign(&row.t());
    }
    folded
}

/// One optimization step over a batch.
///
/// The past windows feed the context network; the future source provides
/// prediction targets and negatives. When the two are identical (no
/// augmentation) the encoder runs once and the gradients add. Slowness
/// regularizers always act on the past-path features.
pub fn train_step(
    state: &mut ModelState,
    batch: &CpcBatch,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<StepMetrics, TrainError> {
    let model_cfg = state.cfg.clone();
    let batch_rows = batch.past_windows.nrows();
    let shared = batch.future_source == batch.past_windows;

    let enc_past = encode_with_cache(&state.params, &model_cfg, &batch.past_windows)?;
    let z_past: Vec<Array2<f64>> = (0..batch_rows).map(|b| enc_past.features_of_row(b)).collect();
    let (enc_future, z_future) = if shared {
        (None, z_past.clone())
    } else {
        let cache = encode_with_cache(&state.params, &model_cfg, &batch.future_source)?;
        let z = (0..batch_rows).map(|b| cache.features_of_row(b)).collect();
        (Some(cache), z)
    };

    let lstm_cache = lstm_forward_with_cache(&state.params, &z_past);
    let contexts: Vec<Array2<f64>> = (0..batch_rows).map(|b| lstm_cache.context_of_row(b)).collect();
    let (predictions, head_cache) =
        predict_future_with_cache(&state.params, &model_cfg, &contexts);

    let negatives = sample_negatives(
        batch_rows,
        z_future[0].nrows(),
        model_cfg.prediction_steps,
        model_cfg.negatives,
        rng,
    )?;
    let (cpc, accuracies, mut d_z_future, d_preds) =
        cpc_loss_grad(&z_future, &predictions, &negatives)?;

    // regularizers on the clean (past-path) features, averaged over rows
    let (w_se, w_lorr) = component_weights(&cfg.reg);
    let inv_rows = 1.0 / batch_rows as f64;
    let mut d_z_reg: Vec<Array2<f64>> = z_past
        .iter()
        .map(|z| Array2::zeros(z.raw_dim()))
        .collect();
    let mut se_total = 0.0;
    let mut lorr_total = 0.0;
    for (b, z) in z_past.iter().enumerate() {
        let (se_b, d_se) = se_loss_grad(z);
        let (lorr_b, d_lorr) = lorr_loss_grad(z, cfg.reg.window);
        se_total += se_b;
        lorr_total += lorr_b;
        if w_se != 0.0 {
            d_z_reg[b].scaled_add(w_se * inv_rows, &d_se);
        }
        if w_lorr != 0.0 {
            d_z_reg[b].scaled_add(w_lorr * inv_rows, &d_lorr);
        }
    }
    let se = se_total * inv_rows;
    let lorr = lorr_total * inv_rows;
    let total = combine(&cfg.reg, cpc, se, lorr);

    // backward
    let mut grads = Parameters::zeros(&model_cfg);
    let d_contexts = heads_backward(
        &state.params,
        &model_cfg,
        &head_cache,
        &contexts,
        &d_preds,
        &mut grads,
    );
    let mut d_ctx3 = Array3::<f64>::zeros((contexts[0].nrows(), batch_rows, contexts[0].ncols()));
    for (b, dc) in d_contexts.iter().enumerate() {
        d_ctx3.slice_mut(ndarray::s![.., b, ..]).assign(dc);
    }
    let d_z_from_ctx = lstm_backward(&state.params, &lstm_cache, &d_ctx3, &mut grads);

    if shared {
        for b in 0..batch_rows {
            d_z_future[b] += &d_z_from_ctx[b];
            d_z_future[b] += &d_z_reg[b];
        }
        let folded = fold_feature_grads(&d_z_future);
        encoder_backward(&state.params, &model_cfg, &enc_past, &folded, &mut grads);
    } else {
        let folded_future = fold_feature_grads(&d_z_future);
        encoder_backward(
            &state.params,
            &model_cfg,
            enc_future.as_ref().unwrap(),
            &folded_future,
            &mut grads,
        );
        let mut d_past = d_z_from_ctx;
        for b in 0..batch_rows {
            d_past[b] += &d_z_reg[b];
        }
        let folded_past = fold_feature_grads(&d_past);
        encoder_backward(&state.params, &model_cfg, &enc_past, &folded_past, &mut grads);
    }

    let grad_norm = adam_update(state, grads, cfg)?;
    let mean_accuracy = accuracies.iter().sum::<f64>() / accuracies.len() as f64;
    Ok(StepMetrics {
        step: state.step,
        total,
        cpc,
        se,
        lorr,
        mean_accuracy,
        grad_norm,
    })
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> TrainError + '_ {
    move |source| TrainError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Checkpoint file name for a step count.
pub fn checkpoint_name(step: u64) -> String {
    format!("ckpt_{step:08}.cpck")
}

/// Run the full training loop: fresh init or resume, one window batch
/// per step, optional future-path augmentation, metrics log, periodic
/// checkpoints, and a final checkpoint whose path is returned.
pub fn fit(
    cfg: &TrainConfig,
    dataset: &Dataset,
    out_dir: &Path,
    resume: Option<&Path>,
) -> Result<PathBuf, TrainError> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(TrainError::Config("dataset is empty".into()));
    }
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;

    let mut state = match resume {
        Some(path) => load_checkpoint(path, Some(&cfg.model))?,
        None => {
            let params = init_model(&cfg.model, &mut derive_rng(cfg.seed, &[stream::INIT]));
            ModelState::new(cfg.model.clone(), params)
        }
    };

    let use_noise = cfg.aug.enabled_ops.noise;
    let mut cache = if use_noise {
        let dir = cfg.aug.noise_dir.as_ref().ok_or_else(|| {
            TrainError::Config("noise op enabled but noise_dir is not set".into())
        })?;
        NoiseCache::load(dir)?
    } else {
        NoiseCache::empty()
    };

    let log_path = out_dir.join("train.log");
    let mut log = if resume.is_some() {
        fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&log_path)
            .map_err(io_err(&log_path))?
    } else {
        fs::File::create(&log_path).map_err(io_err(&log_path))?
    };

    while state.step < cfg.steps {
        let step = state.step;
        if use_noise && step > 0 && step % cache.refresh_interval_steps == 0 {
            cache = NoiseCache::load(cfg.aug.noise_dir.as_ref().unwrap())?;
        }
        let batch = sample_training_windows(
            dataset,
            cfg.window_samples,
            cfg.batch_size,
            &mut derive_rng(cfg.seed, &[stream::WINDOWS, step]),
        )?;
        let batch = if cfg.aug.enabled_ops.any() {
            augment_future(
                &batch,
                &cfg.aug,
                &cache,
                &mut derive_rng(cfg.seed, &[stream::AUGMENT, step]),
            )?
        } else {
            batch
        };
        let metrics = train_step(
            &mut state,
            &batch,
            cfg,
            &mut derive_rng(cfg.seed, &[stream::NEGATIVES, step]),
        )?;
        writeln!(log, "{}", metrics.log_line()).map_err(io_err(&log_path))?;
        if state.step % cfg.checkpoint_every == 0 && state.step < cfg.steps {
            save_checkpoint(&state, &out_dir.join(checkpoint_name(state.step)))?;
        }
    }
    let final_path = out_dir.join("final.cpck");
    save_checkpoint(&state, &final_path)?;
    Ok(final_path)
}
