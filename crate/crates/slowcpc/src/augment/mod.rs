//! Time-domain augmentation of the future signal: pitch shift,
//! band-limited additive noise, synthetic reverberation, and the
//! clean-probability policy that decides whether a batch is augmented
//! at all. The past windows are never touched.

mod filter;
mod pitch;
mod reverb;

pub use filter::{butter_bandpass, noise_bandpass, SosFilter};
pub use pitch::pitch_shift;
pub use reverb::reverb;

use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::audio::{load_wav, AudioError, CpcBatch, Waveform, TRAIN_SAMPLE_RATE};

/// Cached noise clips are exactly this long (3 s at 16 kHz).
pub const NOISE_CLIP_SAMPLES: usize = 48_000;

#[derive(Debug, Error)]
pub enum AugmentError {
    #[error("signal power below 1e-12, SNR undefined")]
    SilentSignal,
    #[error("noise augmentation enabled but the noise cache is empty")]
    EmptyNoiseCache,
    #[error("noise clip ({noise} samples) shorter than the signal ({wave} samples)")]
    NoiseTooShort { noise: usize, wave: usize },
    #[error("invalid augmentation config: {0}")]
    BadConfig(String),
    #[error(transparent)]
    Audio(#[from] AudioError),
}

/// Which of the three ops run, in the fixed order pitch, reverb, noise.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct EnabledOps {
    pub pitch: bool,
    pub reverb: bool,
    pub noise: bool,
}

impl EnabledOps {
    pub fn any(&self) -> bool {
        self.pitch || self.reverb || self.noise
    }

    /// Comma-separated list, e.g. `"pitch,noise"`; empty string for none.
    pub fn parse(s: &str) -> Result<Self, AugmentError> {
        let mut ops = EnabledOps::default();
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            match part {
                "pitch" => ops.pitch = true,
                "reverb" => ops.reverb = true,
                "noise" => ops.noise = true,
                other => {
                    return Err(AugmentError::BadConfig(format!(
                        "unknown augmentation op {other:?}"
                    )))
                }
            }
        }
        Ok(ops)
    }

    pub fn to_config_string(self) -> String {
        let mut parts = Vec::new();
        if self.pitch {
            parts.push("pitch");
        }
        if self.reverb {
            parts.push("reverb");
        }
        if self.noise {
            parts.push("noise");
        }
        parts.join(",")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AugmentConfig {
    /// Pitch shift range in hundredths of a tone, inclusive.
    pub pitch_range: (i64, i64),
    pub noise_dir: Option<PathBuf>,
    pub snr_db_range: (f64, f64),
    pub room_scale_range: (f64, f64),
    /// Probability that a batch passes through unaugmented.
    pub p_clean: f64,
    pub enabled_ops: EnabledOps,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            pitch_range: (-300, 300),
            noise_dir: None,
            snr_db_range: (5.0, 15.0),
            room_scale_range: (0.0, 100.0),
            p_clean: 0.4,
            enabled_ops: EnabledOps::default(),
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<(), AugmentError> {
        let ordered = self.pitch_range.0 <= self.pitch_range.1
            && self.snr_db_range.0 <= self.snr_db_range.1
            && self.room_scale_range.0 <= self.room_scale_range.1;
        if !ordered {
            return Err(AugmentError::BadConfig("range not ordered".into()));
        }
        if !(0.0..=1.0).contains(&self.p_clean) {
            return Err(AugmentError::BadConfig(format!(
                "p_clean {} outside [0, 1]",
                self.p_clean
            )));
        }
        if self.pitch_range.0 < -600 || self.pitch_range.1 > 600 {
            return Err(AugmentError::BadConfig("pitch range beyond +-600".into()));
        }
        Ok(())
    }
}

/// Preloaded noise clips, each cropped or padded to exactly 3 seconds.
#[derive(Debug, Clone, Default)]
pub struct NoiseCache {
    pub clips: Vec<Vec<f64>>,
    pub refresh_interval_steps: u64,
}

impl NoiseCache {
    pub fn empty() -> NoiseCache {
        NoiseCache {
            clips: Vec::new(),
            refresh_interval_steps: 100_000,
        }
    }

    /// Load every WAV in a directory (sorted by file name). Short clips
    /// are zero-padded at the end, long ones center-cropped.
    pub fn load(dir: &Path) -> Result<NoiseCache, AugmentError> {
        let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
            .map_err(|source| AudioError::Io {
                path: dir.to_path_buf(),
                source,
            })?
            .filter_map(|e| e.ok())
            .map(|e| e.path())
            .filter(|p| p.extension().is_some_and(|e| e == "wav"))
            .collect();
        paths.sort();
        let mut clips = Vec::with_capacity(paths.len());
        for p in paths {
            let wave = load_wav(&p)?;
            let mut samples = wave.samples;
            match samples.len().cmp(&NOISE_CLIP_SAMPLES) {
                std::cmp::Ordering::Less => samples.resize(NOISE_CLIP_SAMPLES, 0.0),
                std::cmp::Ordering::Greater => {
                    let start = (samples.len() - NOISE_CLIP_SAMPLES) / 2;
                    samples = samples[start..start + NOISE_CLIP_SAMPLES].to_vec();
                }
                std::cmp::Ordering::Equal => {}
            }
            clips.push(samples);
        }
        Ok(NoiseCache {
            clips,
            refresh_interval_steps: 100_000,
        })
    }
}

/// Add band-limited noise at the requested signal-to-noise ratio.
///
/// The noise is cropped at a random offset to the signal length, shaped
/// by the 80-240 Hz band-pass, then scaled so the ratio of mean-square
/// powers matches `snr_db`. `f64::INFINITY` disables the op.
pub fn add_bandlimited_noise(
    wave: &Waveform,
    noise: &[f64],
    snr_db: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Waveform, AugmentError> {
    if snr_db == f64::INFINITY {
        return Ok(wave.clone());
    }
    let n = wave.samples.len();
    if noise.len() < n {
        return Err(AugmentError::NoiseTooShort {
            noise: noise.len(),
            wave: n,
        });
    }
    let p_signal = wave.samples.iter().map(|v| v * v).sum::<f64>() / n as f64;
    if p_signal < 1e-12 {
        return Err(AugmentError::SilentSignal);
    }
    let start = if noise.len() == n {
        0
    } else {
        rng.random_range(0..=noise.len() - n)
    };
    let shaped = noise_bandpass().filter(&noise[start..start + n]);
    let p_noise = shaped.iter().map(|v| v * v).sum::<f64>() / n as f64;
    if p_noise < 1e-20 {
        // silent noise clip: nothing to add
        return Ok(wave.clone());
    }
    let gain = (p_signal / (p_noise * 10f64.powf(snr_db / 10.0))).sqrt();
    let samples = wave
        .samples
        .iter()
        .zip(&shaped)
        .map(|(&s, &v)| s + gain * v)
        .collect();
    Ok(Waveform {
        samples,
        sample_rate_hz: wave.sample_rate_hz,
    })
}

/// Augment the future side of a batch in place of its copy of the past.
///
/// With probability `p_clean` the whole batch passes through untouched;
/// otherwise every row is transformed independently by the enabled ops
/// in the fixed order pitch, reverb, noise, with parameters drawn
/// uniformly from the configured ranges.
pub fn augment_future(
    batch: &CpcBatch,
    cfg: &AugmentConfig,
    cache: &NoiseCache,
    rng: &mut ChaCha8Rng,
) -> Result<CpcBatch, AugmentError> {
    cfg.validate()?;
    if cfg.enabled_ops.noise && cache.clips.is_empty() {
        return Err(AugmentError::EmptyNoiseCache);
    }
    let mut out = batch.clone();
    if rng.random::<f64>() < cfg.p_clean || !cfg.enabled_ops.any() {
        return Ok(out);
    }
    let (rows, t) = batch.future_source.dim();
    for row in 0..rows {
        let mut wave = Waveform {
            samples: batch.future_source.row(row).to_vec(),
            sample_rate_hz: TRAIN_SAMPLE_RATE,
        };
        if cfg.enabled_ops.pitch {
            let shift = rng.random_range(cfg.pitch_range.0..=cfg.pitch_range.1);
            wave = pitch_shift(&wave, shift);
        }
        if cfg.enabled_ops.reverb {
            let (lo, hi) = cfg.room_scale_range;
            let room = lo + rng.random::<f64>() * (hi - lo);
            wave = reverb(&wave, room, rng);
        }
        if cfg.enabled_ops.noise {
            let clip = &cache.clips[rng.random_range(0..cache.clips.len())];
            let (lo, hi) = cfg.snr_db_range;
            let snr = lo + rng.random::<f64>() * (hi - lo);
            wave = add_bandlimited_noise(&wave, clip, snr, rng)?;
        }
        debug_assert_eq!(wave.samples.len(), t);
        out.future_source
            .row_mut(row)
            .iter_mut()
            .zip(&wave.samples)
            .for_each(|(dst, &src)| *dst = src);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::derive_rng;
    use ndarray::Array2;

    fn sine_batch(rows: usize, t: usize) -> CpcBatch {
        let w = Array2::from_shape_fn((rows, t), |(r, i)| {
            (2.0 * std::f64::consts::PI * (200.0 + 50.0 * r as f64) * i as f64 / 16000.0).sin()
                * 0.5
        });
        CpcBatch {
            past_windows: w.clone(),
            future_source: w,
            speaker_ids: vec!["s".into(); rows],
            window_origin: (0..rows).map(|r| (format!("u{r}"), 0)).collect(),
        }
    }

    fn white_noise_clip(seed: u64) -> Vec<f64> {
        let mut rng = derive_rng(seed, &[]);
        (0..NOISE_CLIP_SAMPLES)
            .map(|_| rng.random::<f64>() * 2.0 - 1.0)
            .collect()
    }

    #[test]
    fn infinite_snr_is_identity() {
        let wave = Waveform {
            samples: vec![0.25; 2000],
            sample_rate_hz: TRAIN_SAMPLE_RATE,
        };
        let noise = white_noise_clip(1);
        let out =
            add_bandlimited_noise(&wave, &noise, f64::INFINITY, &mut derive_rng(2, &[])).unwrap();
        assert_eq!(out, wave);
    }

    #[test]
    fn silent_signal_rejected() {
        let wave = Waveform {
            samples: vec![0.0; 2000],
            sample_rate_hz: TRAIN_SAMPLE_RATE,
        };
        let noise = white_noise_clip(3);
        assert!(matches!(
            add_bandlimited_noise(&wave, &noise, 10.0, &mut derive_rng(4, &[])),
            Err(AugmentError::SilentSignal)
        ));
    }

    #[test]
    fn requested_snr_is_realized() {
        let wave = Waveform {
            samples: (0..20480)
                .map(|i| (2.0 * std::f64::consts::PI * 300.0 * i as f64 / 16000.0).sin() * 0.4)
                .collect(),
            sample_rate_hz: TRAIN_SAMPLE_RATE,
        };
        let noise = white_noise_clip(5);
        let out = add_bandlimited_noise(&wave, &noise, 10.0, &mut derive_rng(6, &[])).unwrap();
        let added: Vec<f64> = out
            .samples
            .iter()
            .zip(&wave.samples)
            .map(|(a, b)| a - b)
            .collect();
        let p_s = wave.samples.iter().map(|v| v * v).sum::<f64>() / wave.samples.len() as f64;
        let p_n = added.iter().map(|v| v * v).sum::<f64>() / added.len() as f64;
        let snr = 10.0 * (p_s / p_n).log10();
        assert!((snr - 10.0).abs() <= 0.5, "snr {snr}");
    }

    #[test]
    fn filtered_noise_is_band_limited() {
        // white noise through the pipeline's filter: the band edges an
        // octave out must sit at least 20 dB below the in-band level
        let noise = white_noise_clip(7);
        let shaped = noise_bandpass().filter(&noise);
        let band_power = |x: &[f64], f: f64| -> f64 {
            let w = 2.0 * std::f64::consts::PI * f / 16000.0;
            let (mut re, mut im) = (0.0, 0.0);
            for (i, &v) in x.iter().enumerate() {
                re += v * (w * i as f64).cos();
                im += v * (w * i as f64).sin();
            }
            re * re + im * im
        };
        // average a few nearby probe lines to tame single-bin variance
        let avg = |center: f64| -> f64 {
            (-2..=2)
                .map(|k| band_power(&shaped, center + k as f64 * 2.0))
                .sum::<f64>()
                / 5.0
        };
        let mid = avg(160.0);
        let low = avg(40.0);
        let high = avg(480.0);
        assert!(10.0 * (mid / low).log10() >= 20.0);
        assert!(10.0 * (mid / high).log10() >= 20.0);
    }

    #[test]
    fn p_clean_one_is_identity() {
        let batch = sine_batch(2, 1600);
        let cfg = AugmentConfig {
            p_clean: 1.0,
            enabled_ops: EnabledOps {
                pitch: true,
                reverb: true,
                noise: false,
            },
            ..AugmentConfig::default()
        };
        let out = augment_future(&batch, &cfg, &NoiseCache::empty(), &mut derive_rng(8, &[]))
            .unwrap();
        assert_eq!(out, batch);
    }

    #[test]
    fn no_ops_enabled_is_identity() {
        let batch = sine_batch(2, 1600);
        let cfg = AugmentConfig {
            p_clean: 0.0,
            ..AugmentConfig::default()
        };
        let out = augment_future(&batch, &cfg, &NoiseCache::empty(), &mut derive_rng(9, &[]))
            .unwrap();
        assert_eq!(out, batch);
    }

    #[test]
    fn past_untouched_future_changed() {
        let batch = sine_batch(3, 4800);
        let cfg = AugmentConfig {
            p_clean: 0.0,
            enabled_ops: EnabledOps {
                pitch: true,
                reverb: true,
                noise: true,
            },
            ..AugmentConfig::default()
        };
        let cache = NoiseCache {
            clips: vec![white_noise_clip(10)],
            refresh_interval_steps: 100_000,
        };
        let out = augment_future(&batch, &cfg, &cache, &mut derive_rng(11, &[])).unwrap();
        assert_eq!(out.past_windows, batch.past_windows);
        assert_ne!(out.future_source, batch.future_source);
    }

    #[test]
    fn empty_cache_with_noise_enabled_rejected() {
        let batch = sine_batch(1, 1600);
        let cfg = AugmentConfig {
            p_clean: 0.0,
            enabled_ops: EnabledOps {
                noise: true,
                ..EnabledOps::default()
            },
            ..AugmentConfig::default()
        };
        assert!(matches!(
            augment_future(&batch, &cfg, &NoiseCache::empty(), &mut derive_rng(12, &[])),
            Err(AugmentError::EmptyNoiseCache)
        ));
    }

    #[test]
    fn deterministic_under_seed() {
        let batch = sine_batch(2, 3200);
        let cfg = AugmentConfig {
            p_clean: 0.3,
            enabled_ops: EnabledOps {
                pitch: true,
                reverb: true,
                noise: true,
            },
            ..AugmentConfig::default()
        };
        let cache = NoiseCache {
            clips: vec![white_noise_clip(13), white_noise_clip(14)],
            refresh_interval_steps: 100_000,
        };
        let a = augment_future(&batch, &cfg, &cache, &mut derive_rng(15, &[2])).unwrap();
        let b = augment_future(&batch, &cfg, &cache, &mut derive_rng(15, &[2])).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn ops_preserve_length_and_rate() {
        let wave = Waveform {
            samples: (0..4800)
                .map(|i| (2.0 * std::f64::consts::PI * 250.0 * i as f64 / 16000.0).sin())
                .collect(),
            sample_rate_hz: TRAIN_SAMPLE_RATE,
        };
        let mut rng = derive_rng(16, &[]);
        let p = pitch_shift(&wave, 240);
        let r = reverb(&wave, 60.0, &mut rng);
        let n = add_bandlimited_noise(&wave, &white_noise_clip(17), 8.0, &mut rng).unwrap();
        for out in [p, r, n] {
            assert_eq!(out.samples.len(), wave.samples.len());
            assert_eq!(out.sample_rate_hz, wave.sample_rate_hz);
        }
    }
}
