//! Minimal RIFF/WAVE reader and writer.
//!
//! Only the format this project trains on is accepted: PCM, 16-bit
//! little-endian, mono, 16 kHz. Everything else is rejected with a
//! typed error rather than silently resampled or down-mixed.

use std::fs;
use std::io::Write;
use std::path::Path;

use super::{AudioError, Waveform, TRAIN_SAMPLE_RATE};

const PCM_FORMAT_TAG: u16 = 1;

fn rd_u16(b: &[u8], off: usize) -> u16 {
    u16::from_le_bytes([b[off], b[off + 1]])
}

fn rd_u32(b: &[u8], off: usize) -> u32 {
    u32::from_le_bytes([b[off], b[off + 1], b[off + 2], b[off + 3]])
}

/// Read a WAV file into a [-1, 1] scaled waveform.
///
/// Integer samples are divided by 32768, so 16-bit full scale maps to
/// 32767/32768 and the round trip through [`write_wav`] is exact.
pub fn load_wav(path: &Path) -> Result<Waveform, AudioError> {
    let bytes = fs::read(path).map_err(|e| AudioError::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    if bytes.len() < 12 || &bytes[0..4] != b"RIFF" {
        return Err(AudioError::NotRiff(path.to_path_buf()));
    }
    if &bytes[8..12] != b"WAVE" {
        return Err(AudioError::UnsupportedFormat {
            path: path.to_path_buf(),
            reason: "RIFF form type is not WAVE".into(),
        });
    }

    let unsupported = |reason: &str| AudioError::UnsupportedFormat {
        path: path.to_path_buf(),
        reason: reason.into(),
    };

    // Walk chunks; fmt must precede data per the RIFF spec.
    let mut fmt: Option<(u16, u16, u32, u16)> = None; // tag, channels, rate, bits
    let mut off = 12usize;
    while off + 8 <= bytes.len() {
        let id = &bytes[off..off + 4];
        let size = rd_u32(&bytes, off + 4) as usize;
        let body = off + 8;
        if body + size > bytes.len() {
            return Err(unsupported("chunk extends past end of file"));
        }
        match id {
            b"fmt " => {
                if size < 16 {
                    return Err(unsupported("fmt chunk shorter than 16 bytes"));
                }
                fmt = Some((
                    rd_u16(&bytes, body),
                    rd_u16(&bytes, body + 2),
                    rd_u32(&bytes, body + 4),
                    rd_u16(&bytes, body + 14),
                ));
            }
            b"data" => {
                let (tag, channels, rate, bits) =
                    fmt.ok_or_else(|| unsupported("data chunk before fmt chunk"))?;
                if tag != PCM_FORMAT_TAG {
                    return Err(unsupported("non-PCM encoding"));
                }
                if channels != 1 {
                    return Err(unsupported("only mono input is accepted"));
                }
                if bits != 16 {
                    return Err(unsupported("only 16-bit samples are accepted"));
                }
                if rate != TRAIN_SAMPLE_RATE {
                    return Err(AudioError::BadRate {
                        path: path.to_path_buf(),
                        rate,
                    });
                }
                let n = size / 2;
                if n == 0 {
                    return Err(unsupported("empty data chunk"));
                }
                let samples = bytes[body..body + n * 2]
                    .chunks_exact(2)
                    .map(|c| i16::from_le_bytes([c[0], c[1]]) as f64 / 32768.0)
                    .collect();
                return Ok(Waveform {
                    samples,
                    sample_rate_hz: rate,
                });
            }
            _ => {}
        }
        // Chunks are word aligned.
        off = body + size + (size & 1);
    }
    Err(unsupported("no data chunk found"))
}

/// Write a waveform as 16-bit PCM mono, clamping to full scale and
/// rounding to the nearest representable sample.
pub fn write_wav(path: &Path, wave: &Waveform) -> Result<(), AudioError> {
    let n = wave.samples.len();
    let data_len = (n * 2) as u32;
    let mut out = Vec::with_capacity(44 + n * 2);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&(36 + data_len).to_le_bytes());
    out.extend_from_slice(b"WAVE");
    out.extend_from_slice(b"fmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&PCM_FORMAT_TAG.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes()); // mono
    out.extend_from_slice(&wave.sample_rate_hz.to_le_bytes());
    out.extend_from_slice(&(wave.sample_rate_hz * 2).to_le_bytes()); // byte rate
    out.extend_from_slice(&2u16.to_le_bytes()); // block align
    out.extend_from_slice(&16u16.to_le_bytes()); // bits per sample
    out.extend_from_slice(b"data");
    out.extend_from_slice(&data_len.to_le_bytes());
    for &s in &wave.samples {
        let q = (s * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
        out.extend_from_slice(&q.to_le_bytes());
    }
    let mut f = fs::File::create(path).map_err(|e| AudioError::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    f.write_all(&out).map_err(|e| AudioError::Io {
        path: path.to_path_buf(),
        source: e,
    })
}
