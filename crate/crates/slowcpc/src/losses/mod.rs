//! Training objectives: the InfoNCE prediction loss and the two slowness
//! regularizers, plus the weighting rules that combine them.

mod cpc;
mod lorr;
mod se;

pub use cpc::{cpc_loss, cpc_loss_grad, sample_negatives, NegativeSet};
pub use lorr::{lorr_loss, lorr_loss_grad};
pub use se::{affinity, se_loss, se_loss_grad, self_express};

use ndarray::Array2;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum LossError {
    #[error("no valid reference time: sequence length {len} <= prediction steps {m_steps}")]
    DegenerateRange { len: usize, m_steps: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CombinedMode {
    None,
    Se,
    Lorr,
    SeLorr,
}

impl CombinedMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            CombinedMode::None => "none",
            CombinedMode::Se => "se",
            CombinedMode::Lorr => "lorr",
            CombinedMode::SeLorr => "se+lorr",
        }
    }

    pub fn parse(s: &str) -> Result<Self, LossError> {
        match s {
            "none" => Ok(CombinedMode::None),
            "se" => Ok(CombinedMode::Se),
            "lorr" => Ok(CombinedMode::Lorr),
            "se+lorr" => Ok(CombinedMode::SeLorr),
            other => Err(LossError::ShapeMismatch(format!(
                "unknown loss mode {other:?}"
            ))),
        }
    }

    pub fn uses_se(&self) -> bool {
        matches!(self, CombinedMode::Se | CombinedMode::SeLorr)
    }

    pub fn uses_lorr(&self) -> bool {
        matches!(self, CombinedMode::Lorr | CombinedMode::SeLorr)
    }
}

/// Regularization settings. The defaults are the best grid points of the
/// hyperparameter search: SE weight 0.4, LorR weight 1.0 with window 2.
#[derive(Debug, Clone, PartialEq)]
pub struct RegConfig {
    pub lambda_se: f64,
    pub alpha_lorr: f64,
    pub window: usize,
    pub combined_mode: CombinedMode,
}

impl Default for RegConfig {
    fn default() -> Self {
        RegConfig {
            lambda_se: 0.4,
            alpha_lorr: 1.0,
            window: 2,
            combined_mode: CombinedMode::None,
        }
    }
}

/// Raw components of one total-loss evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub cpc: f64,
    pub se: f64,
    pub lorr: f64,
    pub accuracies: Vec<f64>,
}

/// The mode-dependent weighting. In the combined mode the weights are
/// pinned to the individually-best values (0.5 outer, 0.4 on SE).
pub fn combine(reg: &RegConfig, cpc: f64, se: f64, lorr: f64) -> f64 {
    match reg.combined_mode {
        CombinedMode::None => cpc,
        CombinedMode::Se => cpc + reg.lambda_se * se,
        CombinedMode::Lorr => cpc + reg.alpha_lorr * lorr,
        CombinedMode::SeLorr => cpc + 0.5 * (lorr + 0.4 * se),
    }
}

/// How strongly each regularizer feeds the gradient under `reg`.
pub(crate) fn component_weights(reg: &RegConfig) -> (f64, f64) {
    match reg.combined_mode {
        CombinedMode::None => (0.0, 0.0),
        CombinedMode::Se => (reg.lambda_se, 0.0),
        CombinedMode::Lorr => (0.0, reg.alpha_lorr),
        CombinedMode::SeLorr => (0.5 * 0.4, 0.5),
    }
}

fn mean_over_rows(z: &[Array2<f64>], f: impl Fn(&Array2<f64>) -> f64) -> f64 {
    z.iter().map(|zb| f(zb)).sum::<f64>() / z.len() as f64
}

/// Total loss over a batch where the same features serve as both the
/// prediction candidates and the regularization target (the unaugmented
/// case). Regularizers are evaluated per sequence and averaged.
pub fn total_loss(
    z: &[Array2<f64>],
    predictions: &[Vec<Array2<f64>>],
    negatives: &NegativeSet,
    reg: &RegConfig,
) -> Result<LossBreakdown, LossError> {
    let (cpc, accuracies) = cpc_loss(z, predictions, negatives)?;
    let se = mean_over_rows(z, se_loss);
    let lorr = mean_over_rows(z, |zb| lorr_loss(zb, reg.window));
    Ok(LossBreakdown {
        total: combine(reg, cpc, se, lorr),
        cpc,
        se,
        lorr,
        accuracies,
    })
}

/// [`total_loss`] plus gradients w.r.t. the features and predictions.
#[allow(clippy::type_complexity)]
pub fn total_loss_grad(
    z: &[Array2<f64>],
    predictions: &[Vec<Array2<f64>>],
    negatives: &NegativeSet,
    reg: &RegConfig,
) -> Result<(LossBreakdown, Vec<Array2<f64>>, Vec<Vec<Array2<f64>>>), LossError> {
    let (cpc, accuracies, mut dz, dp) = cpc_loss_grad(z, predictions, negatives)?;
    let (w_se, w_lorr) = component_weights(reg);
    let inv_rows = 1.0 / z.len() as f64;

    let mut se_total = 0.0;
    let mut lorr_total = 0.0;
    for (zb, dzb) in z.iter().zip(dz.iter_mut()) {
        let (se_b, dse) = se_loss_grad(zb);
        let (lorr_b, dlorr) = lorr_loss_grad(zb, reg.window);
        se_total += se_b;
        lorr_total += lorr_b;
        if w_se != 0.0 {
            dzb.scaled_add(w_se * inv_rows, &dse);
        }
        if w_lorr != 0.0 {
            dzb.scaled_add(w_lorr * inv_rows, &dlorr);
        }
    }
    let se = se_total * inv_rows;
    let lorr = lorr_total * inv_rows;
    Ok((
        LossBreakdown {
            total: combine(reg, cpc, se, lorr),
            cpc,
            se,
            lorr,
            accuracies,
        },
        dz,
        dp,
    ))
}
