//! Frozen-feature extraction and the on-disk feature format.
//!
//! One file per utterance: magic `CPCF`, format version (u32 LE), row
//! count L, column count d, then L*d little-endian f32 values row-major,
//! and a CRC32 of everything prior as a 4-byte trailer.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;

use super::EvalError;
use crate::audio::{Dataset, ENCODER_STRIDE};
use crate::model::{contextualize, encode, ModelState};

pub const FEATURE_MAGIC: &[u8; 4] = b"CPCF";
const FEATURE_VERSION: u32 = 1;

/// Which representation to dump.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeatureLevel {
    /// Encoder output.
    Z,
    /// Context-network output.
    C,
}

impl FeatureLevel {
    pub fn parse(s: &str) -> Result<Self, EvalError> {
        match s {
            "z" => Ok(FeatureLevel::Z),
            "c" => Ok(FeatureLevel::C),
            other => Err(EvalError::BadArgument(format!(
                "unknown feature level {other:?} (expected z or c)"
            ))),
        }
    }
}

pub fn write_feature_file(path: &Path, features: &Array2<f64>) -> Result<(), EvalError> {
    let (l, d) = features.dim();
    let mut buf = Vec::with_capacity(16 + l * d * 4 + 4);
    buf.extend_from_slice(FEATURE_MAGIC);
    buf.extend_from_slice(&FEATURE_VERSION.to_le_bytes());
    buf.extend_from_slice(&(l as u32).to_le_bytes());
    buf.extend_from_slice(&(d as u32).to_le_bytes());
    for &v in features.iter() {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    let crc = crc32fast::hash(&buf);
    buf.extend_from_slice(&crc.to_le_bytes());
    fs::write(path, &buf).map_err(|source| EvalError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn read_feature_file(path: &Path) -> Result<Array2<f64>, EvalError> {
    let bytes = fs::read(path).map_err(|source| EvalError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let corrupt = |reason: &str| EvalError::CorruptFeatureFile {
        path: path.to_path_buf(),
        reason: reason.into(),
    };
    if bytes.len() < 20 {
        return Err(corrupt("file too short"));
    }
    let body = bytes.len() - 4;
    let stored = u32::from_le_bytes(bytes[body..].try_into().unwrap());
    if crc32fast::hash(&bytes[..body]) != stored {
        return Err(corrupt("CRC mismatch"));
    }
    if &bytes[0..4] != FEATURE_MAGIC {
        return Err(corrupt("bad magic"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != FEATURE_VERSION {
        return Err(corrupt("unsupported version"));
    }
    let l = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let d = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    if 16 + l * d * 4 != body {
        return Err(corrupt("payload size disagrees with header"));
    }
    let mut out = Array2::<f64>::zeros((l, d));
    for (dst, chunk) in out.iter_mut().zip(bytes[16..body].chunks_exact(4)) {
        *dst = f32::from_le_bytes(chunk.try_into().unwrap()) as f64;
    }
    Ok(out)
}

/// Extract features for every utterance into `out_dir/<utt-id>.cpcf`.
/// Utterances are processed whole; a trailing remainder shorter than one
/// frame (the encoder stride) is dropped.
pub fn extract_features(
    state: &ModelState,
    dataset: &Dataset,
    level: FeatureLevel,
    out_dir: &Path,
) -> Result<Vec<PathBuf>, EvalError> {
    fs::create_dir_all(out_dir).map_err(|source| EvalError::Io {
        path: out_dir.to_path_buf(),
        source,
    })?;
    let mut written = Vec::with_capacity(dataset.len());
    for utt in &dataset.utterances {
        let usable = (utt.wave.len() / ENCODER_STRIDE) * ENCODER_STRIDE;
        if usable == 0 {
            return Err(EvalError::BadArgument(format!(
                "utterance {} is shorter than one frame",
                utt.id
            )));
        }
        let mut window = Array2::<f64>::zeros((1, usable));
        window
            .row_mut(0)
            .iter_mut()
            .zip(&utt.wave.samples[..usable])
            .for_each(|(dst, &src)| *dst = src);
        let z = encode(&state.params, &state.cfg, &window)?.pop().unwrap();
        let features = match level {
            FeatureLevel::Z => z,
            FeatureLevel::C => contextualize(&state.params, &z),
        };
        let path = out_dir.join(format!("{}.cpcf", utt.id));
        write_feature_file(&path, &features)?;
        written.push(path);
    }
    Ok(written)
}

/// Load one utterance's features, concatenating the columns of several
/// feature directories (they must agree on the frame count).
pub fn load_features_concat(dirs: &[PathBuf], utt_id: &str) -> Result<Array2<f64>, EvalError> {
    assert!(!dirs.is_empty());
    let mut parts = Vec::with_capacity(dirs.len());
    for dir in dirs {
        parts.push(read_feature_file(&dir.join(format!("{utt_id}.cpcf")))?);
    }
    let l = parts[0].nrows();
    if parts.iter().any(|p| p.nrows() != l) {
        return Err(EvalError::BadArgument(format!(
            "feature directories disagree on frame count for {utt_id}"
        )));
    }
    let d_total: usize = parts.iter().map(|p| p.ncols()).sum();
    let mut out = Array2::<f64>::zeros((l, d_total));
    let mut col = 0;
    for p in parts {
        let w = p.ncols();
        out.slice_mut(ndarray::s![.., col..col + w]).assign(&p);
        col += w;
    }
    Ok(out)
}
