//! Binary checkpoint format.
//!
//! Layout: magic `CPCK`, format version (u32 LE), a UTF-8 config blob
//! (u32 length + bytes, flat `key = value` lines holding the model config
//! and the step counter), then one record per tensor — u32 name length,
//! name bytes, u32 rank, u32 dims, little-endian f64 payload — and an
//! 8-byte trailer: `CPCE` followed by the CRC32 of every preceding byte.
//!
//! Tensors are stored under `param.`, `adam_m.` and `adam_v.` prefixes so
//! a checkpoint restores training exactly, not just inference.

use std::fs;
use std::path::Path;

use super::{HeadType, ModelConfig, ModelError, Parameters};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"CPCK";
const TRAILER_MAGIC: &[u8; 4] = b"CPCE";
const FORMAT_VERSION: u32 = 1;

/// Everything the trainer persists between runs.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    pub cfg: ModelConfig,
    pub params: Parameters,
    pub adam_m: Parameters,
    pub adam_v: Parameters,
    pub step: u64,
}

impl ModelState {
    /// Fresh state around initialized parameters.
    pub fn new(cfg: ModelConfig, params: Parameters) -> ModelState {
        let adam_m = Parameters::zeros(&cfg);
        let adam_v = Parameters::zeros(&cfg);
        ModelState {
            cfg,
            params,
            adam_m,
            adam_v,
            step: 0,
        }
    }
}

fn join<T: ToString>(values: &[T]) -> String {
    values
        .iter()
        .map(T::to_string)
        .collect::<Vec<_>>()
        .join(",")
}

/// Model config as flat key/value pairs; shared with the trainer's
/// config-file format.
pub(crate) fn model_config_kv(cfg: &ModelConfig) -> Vec<(String, String)> {
    vec![
        ("channels".into(), cfg.channels.to_string()),
        ("kernel_sizes".into(), join(&cfg.kernel_sizes)),
        ("strides".into(), join(&cfg.strides)),
        ("paddings".into(), join(&cfg.paddings)),
        ("context_dim".into(), cfg.context_dim.to_string()),
        ("context_layers".into(), cfg.context_layers.to_string()),
        (
            "prediction_steps".into(),
            cfg.prediction_steps.to_string(),
        ),
        ("negatives".into(), cfg.negatives.to_string()),
        ("head_type".into(), cfg.head_type.as_str().to_string()),
    ]
}

fn parse_usize_list(value: &str, key: &str) -> Result<[usize; 5], ModelError> {
    let parts: Vec<&str> = value.split(',').map(str::trim).collect();
    if parts.len() != 5 {
        return Err(ModelError::BadConfig(format!(
            "{key} needs 5 comma-separated values"
        )));
    }
    let mut out = [0usize; 5];
    for (dst, p) in out.iter_mut().zip(parts) {
        *dst = p
            .parse()
            .map_err(|_| ModelError::BadConfig(format!("{key}: bad integer {p:?}")))?;
    }
    Ok(out)
}

/// Apply one `key = value` pair to a model config. Returns false when the
/// key does not belong to the model config at all.
pub(crate) fn apply_model_config_kv(
    cfg: &mut ModelConfig,
    key: &str,
    value: &str,
) -> Result<bool, ModelError> {
    let parse_usize = |v: &str| -> Result<usize, ModelError> {
        v.parse()
            .map_err(|_| ModelError::BadConfig(format!("{key}: bad integer {v:?}")))
    };
    match key {
        "channels" => cfg.channels = parse_usize(value)?,
        "kernel_sizes" => cfg.kernel_sizes = parse_usize_list(value, key)?,
        "strides" => cfg.strides = parse_usize_list(value, key)?,
        "paddings" => cfg.paddings = parse_usize_list(value, key)?,
        "context_dim" => cfg.context_dim = parse_usize(value)?,
        "context_layers" => cfg.context_layers = parse_usize(value)?,
        "prediction_steps" => cfg.prediction_steps = parse_usize(value)?,
        "negatives" => cfg.negatives = parse_usize(value)?,
        "head_type" => cfg.head_type = HeadType::parse(value)?,
        _ => return Ok(false),
    }
    Ok(true)
}

fn push_record(buf: &mut Vec<u8>, name: &str, dims: &[usize], data: &[f64]) {
    buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
    buf.extend_from_slice(name.as_bytes());
    buf.extend_from_slice(&(dims.len() as u32).to_le_bytes());
    for &d in dims {
        buf.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

/// Serialize and atomically write a checkpoint.
pub fn save_checkpoint(state: &ModelState, path: &Path) -> Result<(), ModelError> {
    let mut blob = String::new();
    for (k, v) in model_config_kv(&state.cfg) {
        blob.push_str(&format!("{k} = {v}\n"));
    }
    blob.push_str(&format!("step = {}\n", state.step));

    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(blob.len() as u32).to_le_bytes());
    buf.extend_from_slice(blob.as_bytes());
    for (prefix, params) in [
        ("param", &state.params),
        ("adam_m", &state.adam_m),
        ("adam_v", &state.adam_v),
    ] {
        for (name, dims, data) in params.tensors() {
            push_record(&mut buf, &format!("{prefix}.{name}"), &dims, data);
        }
    }
    let crc = crc32fast::hash(&buf);
    buf.extend_from_slice(TRAILER_MAGIC);
    buf.extend_from_slice(&crc.to_le_bytes());

    let tmp = path.with_extension("tmp");
    let io_err = |source| ModelError::Io {
        path: path.to_path_buf(),
        source,
    };
    fs::write(&tmp, &buf).map_err(io_err)?;
    fs::rename(&tmp, path).map_err(io_err)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], ModelError> {
        if self.pos + n > self.bytes.len() {
            return Err(ModelError::CorruptCheckpoint(
                "unexpected end of file".into(),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, ModelError> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }
}

/// Load a checkpoint. When `expected` is given, the stored model config
/// must match it exactly.
pub fn load_checkpoint(path: &Path, expected: Option<&ModelConfig>) -> Result<ModelState, ModelError> {
    let bytes = fs::read(path).map_err(|source| ModelError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    if bytes.len() < 8 + 8 {
        return Err(ModelError::CorruptCheckpoint("file too short".into()));
    }
    // trailer first: CRC covers everything before it
    let body_len = bytes.len() - 8;
    if &bytes[body_len..body_len + 4] != TRAILER_MAGIC {
        return Err(ModelError::CorruptCheckpoint("missing trailer".into()));
    }
    let stored_crc = u32::from_le_bytes([
        bytes[body_len + 4],
        bytes[body_len + 5],
        bytes[body_len + 6],
        bytes[body_len + 7],
    ]);
    if crc32fast::hash(&bytes[..body_len]) != stored_crc {
        return Err(ModelError::CorruptCheckpoint("CRC mismatch".into()));
    }

    let mut cur = Cursor {
        bytes: &bytes[..body_len],
        pos: 0,
    };
    if cur.take(4)? != CHECKPOINT_MAGIC {
        return Err(ModelError::CorruptCheckpoint("bad magic".into()));
    }
    let version = cur.u32()?;
    if version != FORMAT_VERSION {
        return Err(ModelError::CorruptCheckpoint(format!(
            "unsupported format version {version}"
        )));
    }
    let blob_len = cur.u32()? as usize;
    let blob = std::str::from_utf8(cur.take(blob_len)?)
        .map_err(|_| ModelError::CorruptCheckpoint("config blob is not UTF-8".into()))?
        .to_string();

    let mut cfg = ModelConfig::default();
    let mut step = 0u64;
    for line in blob.lines() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| ModelError::CorruptCheckpoint(format!("bad config line {line:?}")))?;
        let (key, value) = (key.trim(), value.trim());
        if key == "step" {
            step = value.parse().map_err(|_| {
                ModelError::CorruptCheckpoint(format!("bad step value {value:?}"))
            })?;
        } else if !apply_model_config_kv(&mut cfg, key, value)? {
            return Err(ModelError::CorruptCheckpoint(format!(
                "unknown config key {key:?}"
            )));
        }
    }
    cfg.validate()?;
    if let Some(exp) = expected {
        if *exp != cfg {
            return Err(ModelError::ConfigMismatch(format!(
                "stored config {cfg:?} differs from requested {exp:?}"
            )));
        }
    }

    let mut state = ModelState::new(cfg.clone(), Parameters::zeros(&cfg));
    state.step = step;
    let mut filled = 0usize;
    let expected_records =
        state.params.tensors().len() + state.adam_m.tensors().len() + state.adam_v.tensors().len();
    while cur.remaining() > 0 {
        let name_len = cur.u32()? as usize;
        let name = std::str::from_utf8(cur.take(name_len)?)
            .map_err(|_| ModelError::CorruptCheckpoint("record name is not UTF-8".into()))?
            .to_string();
        let rank = cur.u32()? as usize;
        let mut dims = Vec::with_capacity(rank);
        let mut count = 1usize;
        for _ in 0..rank {
            let d = cur.u32()? as usize;
            dims.push(d);
            count *= d;
        }
        let payload = cur.take(count * 8)?;

        let (prefix, rest) = name
            .split_once('.')
            .ok_or_else(|| ModelError::CorruptCheckpoint(format!("bad record name {name:?}")))?;
        let target = match prefix {
            "param" => &mut state.params,
            "adam_m" => &mut state.adam_m,
            "adam_v" => &mut state.adam_v,
            _ => {
                return Err(ModelError::CorruptCheckpoint(format!(
                    "unknown record prefix {prefix:?}"
                )))
            }
        };
        let mut tensors = target.tensors_mut();
        let slot = tensors
            .iter_mut()
            .find(|(n, _, _)| n == rest)
            .ok_or_else(|| {
                ModelError::CorruptCheckpoint(format!("record {name:?} has no parameter slot"))
            })?;
        if slot.1 != dims {
            return Err(ModelError::CorruptCheckpoint(format!(
                "record {name:?} dims {dims:?} do not match {:?}",
                slot.1
            )));
        }
        for (dst, chunk) in slot.2.iter_mut().zip(payload.chunks_exact(8)) {
            *dst = f64::from_le_bytes(chunk.try_into().unwrap());
        }
        filled += 1;
    }
    if filled != expected_records {
        return Err(ModelError::CorruptCheckpoint(format!(
            "expected {expected_records} tensor records, found {filled}"
        )));
    }
    Ok(state)
}
