//! Frozen-feature evaluation: extraction to disk, ABX discrimination,
//! linear probes, and clustering quality.

mod abx;
mod cluster;
mod features;
mod probe;

pub use abx::{
    abx_score, dtw_distance, frame_distance, load_abx_items, AbxCell, AbxItem, AbxMode, AbxReport,
};
pub use cluster::{contingency, kmeans, nmi, purity};
pub use features::{
    extract_features, load_features_concat, read_feature_file, write_feature_file, FeatureLevel,
    FEATURE_MAGIC,
};
pub use probe::{
    phone_frame_dataset, speaker_embedding_dataset, split_by_group, stratified_split,
    train_linear_probe, utterance_embedding, FrameDataset, ProbeReport, ProbeSplit, ProbeTask,
};

use std::path::PathBuf;

use ndarray::Array2;
use thiserror::Error;

use crate::audio::AudioError;
use crate::model::ModelError;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("no valid ABX cell (need two phones sharing context and speaker constraints)")]
    NoValidCells,
    #[error("fewer than two classes in the training split")]
    SingleClass,
    #[error("length mismatch: {a} vs {b}")]
    LengthMismatch { a: usize, b: usize },
    #[error("{path}: corrupt feature file: {reason}")]
    CorruptFeatureFile { path: PathBuf, reason: String },
    #[error("{path}:{line}: bad item file: {msg}")]
    BadItemFile {
        path: PathBuf,
        line: usize,
        msg: String,
    },
    #[error("{0}")]
    BadArgument(String),
    #[error("{path}: io error: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Audio(#[from] AudioError),
}

/// Clustering quality report for one k.
#[derive(Debug, Clone)]
pub struct ClusterReport {
    pub k: usize,
    pub purity: f64,
    pub nmi: f64,
    pub contingency: Array2<usize>,
}

impl ClusterReport {
    pub fn build(
        k: usize,
        assignments: &[usize],
        labels: &[usize],
    ) -> Result<ClusterReport, EvalError> {
        Ok(ClusterReport {
            k,
            purity: purity(assignments, labels)?,
            nmi: nmi(assignments, labels)?,
            contingency: contingency(assignments, labels),
        })
    }
}

/// Mean over alignment segments of the within-segment feature variance
/// (per-dimension population variance averaged over dimensions). Lower
/// values mean the features sit stiller inside phone segments.
pub fn mean_within_segment_variance(
    dataset: &crate::audio::Dataset,
    feature_dirs: &[PathBuf],
) -> Result<f64, EvalError> {
    let mut total = 0.0;
    let mut segments = 0usize;
    for utt in &dataset.utterances {
        let track = utt.alignment.as_ref().ok_or_else(|| {
            EvalError::BadArgument(format!("utterance {} has no alignment", utt.id))
        })?;
        let feats = load_features_concat(feature_dirs, &utt.id)?;
        let (l, d) = feats.dim();
        for iv in &track.intervals {
            let rows: Vec<usize> = (0..l)
                .filter(|&i| {
                    let center = (i as f64 + 0.5) * crate::audio::FRAME_SHIFT_S;
                    iv.start_s <= center && center < iv.end_s
                })
                .collect();
            if rows.len() < 2 {
                continue;
            }
            let inv = 1.0 / rows.len() as f64;
            let mut seg_var = 0.0;
            for c in 0..d {
                let mean: f64 = rows.iter().map(|&i| feats[[i, c]]).sum::<f64>() * inv;
                let var: f64 = rows
                    .iter()
                    .map(|&i| {
                        let r = feats[[i, c]] - mean;
                        r * r
                    })
                    .sum::<f64>()
                    * inv;
                seg_var += var;
            }
            total += seg_var / d as f64;
            segments += 1;
        }
    }
    if segments == 0 {
        return Err(EvalError::BadArgument(
            "no alignment segment covers two or more frames".into(),
        ));
    }
    Ok(total / segments as f64)
}
