//! Synthetic desk-scale corpus: each "phone" is a band of three sine
//! components, each "speaker" applies a fixed frequency ratio and a
//! fixed spectral amplitude envelope. Utterances are random phone
//! sequences with linear crossfades, peak normalization and a little
//! white noise. The generator also emits the manifest, per-utterance
//! alignments, and an ABX item file over all interior segments.

use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use thiserror::Error;

use crate::audio::{write_wav, AudioError, Waveform, TRAIN_SAMPLE_RATE};
use crate::rng::derive_rng;

const CROSSFADE_S: f64 = 0.005;
const NOISE_SNR_DB: f64 = 30.0;
const PEAK: f64 = 0.95;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid synth config: {0}")]
    BadConfig(String),
    #[error(transparent)]
    Audio(#[from] AudioError),
    #[error("{path}: io error: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub num_phones: usize,
    pub num_speakers: usize,
    pub utterances_per_speaker: usize,
    pub segment_dur_range: (f64, f64),
    pub utterance_dur: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            num_phones: 8,
            num_speakers: 4,
            utterances_per_speaker: 50,
            segment_dur_range: (0.05, 0.20),
            utterance_dur: 2.0,
            seed: 0,
        }
    }
}

impl SynthConfig {
    fn validate(&self) -> Result<(), SynthError> {
        if self.num_phones < 2 {
            return Err(SynthError::BadConfig("need at least 2 phones".into()));
        }
        let (lo, hi) = self.segment_dur_range;
        if !(lo > 0.0 && lo <= hi && self.utterance_dur >= hi) {
            return Err(SynthError::BadConfig(
                "segment durations must be positive, ordered, and fit the utterance".into(),
            ));
        }
        if self.num_speakers == 0 || self.utterances_per_speaker == 0 {
            return Err(SynthError::BadConfig("empty corpus requested".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct GeneratedCorpus {
    pub manifest_path: PathBuf,
    pub items_path: PathBuf,
    pub utterances: usize,
}

struct Segment {
    phone: usize,
    start_s: f64,
    end_s: f64,
}

/// Draw segment durations that tile the utterance exactly while staying
/// inside the configured range (the final remainder is absorbed by
/// extending the last segment or splitting it in two).
fn draw_segments(
    total: f64,
    range: (f64, f64),
    num_phones: usize,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> Vec<Segment> {
    let (lo, hi) = range;
    let mut durations: Vec<f64> = Vec::new();
    let mut cum = 0.0;
    loop {
        let next = lo + rng.random::<f64>() * (hi - lo);
        if cum + next > total {
            let rest = total - cum;
            match durations.pop() {
                None => durations.push(rest),
                Some(last) => {
                    let merged = last + rest;
                    if merged <= hi {
                        durations.push(merged);
                    } else {
                        durations.push(merged / 2.0);
                        durations.push(merged / 2.0);
                    }
                }
            }
            break;
        }
        durations.push(next);
        cum += next;
    }
    let mut out = Vec::with_capacity(durations.len());
    let mut t = 0.0;
    for d in durations {
        out.push(Segment {
            phone: rng.random_range(0..num_phones),
            start_s: t,
            end_s: t + d,
        });
        t += d;
    }
    // pin the last boundary against accumulated float error
    if let Some(last) = out.last_mut() {
        last.end_s = total;
    }
    out
}

/// Additive synthesis of one utterance with linear crossfades between
/// segments.
fn render(
    segments: &[Segment],
    phone_freqs: &[[f64; 3]],
    speaker_ratio: f64,
    speaker_env: [f64; 3],
    n_samples: usize,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> Vec<f64> {
    let fs = TRAIN_SAMPLE_RATE as f64;
    let xf = (CROSSFADE_S * fs / 2.0).round() as isize; // half-fade in samples
    let mut out = vec![0.0f64; n_samples];
    for seg in segments {
        let start = (seg.start_s * fs).round() as isize;
        let end = (seg.end_s * fs).round() as isize;
        let phases: [f64; 3] = [
            rng.random::<f64>() * std::f64::consts::TAU,
            rng.random::<f64>() * std::f64::consts::TAU,
            rng.random::<f64>() * std::f64::consts::TAU,
        ];
        let lo = (start - xf).max(0);
        let hi = (end + xf).min(n_samples as isize);
        for t in lo..hi {
            // trapezoidal gain: ramps across [start-xf, start+xf] and
            // [end-xf, end+xf], flat in between
            let up = ((t - (start - xf)) as f64 / (2 * xf) as f64).clamp(0.0, 1.0);
            let down = (((end + xf) - t) as f64 / (2 * xf) as f64).clamp(0.0, 1.0);
            let gain = up.min(down);
            if gain <= 0.0 {
                continue;
            }
            let time = t as f64 / fs;
            let mut v = 0.0;
            for c in 0..3 {
                let f = phone_freqs[seg.phone][c] * speaker_ratio;
                v += speaker_env[c] * (std::f64::consts::TAU * f * time + phases[c]).sin();
            }
            out[t as usize] += gain * v;
        }
    }
    // peak normalize, then add white noise at a fixed SNR
    let peak = out.iter().fold(0.0f64, |m, &v| m.max(v.abs()));
    if peak > 0.0 {
        let s = PEAK / peak;
        out.iter_mut().for_each(|v| *v *= s);
    }
    let p_signal = out.iter().map(|v| v * v).sum::<f64>() / n_samples as f64;
    let noise_std = (p_signal / 10f64.powf(NOISE_SNR_DB / 10.0)).sqrt();
    for v in out.iter_mut() {
        *v += noise_std * (rng.random::<f64>() * 2.0 - 1.0) * 1.7320508075688772;
    }
    out
}

/// Generate the corpus under `out_dir`. Deterministic: the same config
/// (including its seed) produces byte-identical files.
pub fn generate_synthetic_corpus(
    cfg: &SynthConfig,
    out_dir: &Path,
) -> Result<GeneratedCorpus, SynthError> {
    cfg.validate()?;
    fs::create_dir_all(out_dir).map_err(|source| SynthError::Io {
        path: out_dir.to_path_buf(),
        source,
    })?;

    let mut corpus_rng = derive_rng(cfg.seed, &[0x51]);
    // one frequency band per phone: three components in [300+150p, 450+150p]
    let phone_freqs: Vec<[f64; 3]> = (0..cfg.num_phones)
        .map(|p| {
            let lo = 300.0 + 150.0 * p as f64;
            let hi = lo + 150.0;
            [
                lo + corpus_rng.random::<f64>() * (hi - lo),
                lo + corpus_rng.random::<f64>() * (hi - lo),
                lo + corpus_rng.random::<f64>() * (hi - lo),
            ]
        })
        .collect();
    let speakers: Vec<(f64, [f64; 3])> = (0..cfg.num_speakers)
        .map(|s| {
            let ratio = 2f64.powf(s as f64 / 24.0);
            let env = [
                0.5 + corpus_rng.random::<f64>() * 0.5,
                0.5 + corpus_rng.random::<f64>() * 0.5,
                0.5 + corpus_rng.random::<f64>() * 0.5,
            ];
            (ratio, env)
        })
        .collect();

    let n_samples = (cfg.utterance_dur * TRAIN_SAMPLE_RATE as f64).round() as usize;
    let mut manifest = String::new();
    let mut items = String::from("#file onset offset #phone prev-phone next-phone speaker\n");
    let mut count = 0usize;
    for s in 0..cfg.num_speakers {
        for u in 0..cfg.utterances_per_speaker {
            let id = format!("s{s}_u{u:03}");
            let mut rng = derive_rng(cfg.seed, &[0x52, s as u64, u as u64]);
            let segments = draw_segments(
                cfg.utterance_dur,
                cfg.segment_dur_range,
                cfg.num_phones,
                &mut rng,
            );
            let samples = render(
                &segments,
                &phone_freqs,
                speakers[s].0,
                speakers[s].1,
                n_samples,
                &mut rng,
            );
            let wave = Waveform {
                samples,
                sample_rate_hz: TRAIN_SAMPLE_RATE,
            };
            write_wav(&out_dir.join(format!("{id}.wav")), &wave)?;

            let mut ali = String::new();
            for seg in &segments {
                ali.push_str(&format!(
                    "{:.6} {:.6} p{}\n",
                    seg.start_s, seg.end_s, seg.phone
                ));
            }
            let ali_path = out_dir.join(format!("{id}.ali"));
            fs::write(&ali_path, ali).map_err(|source| SynthError::Io {
                path: ali_path.clone(),
                source,
            })?;

            manifest.push_str(&format!("{id} {id}.wav s{s} {id}.ali\n"));
            for w in segments.windows(3) {
                items.push_str(&format!(
                    "{id} {:.6} {:.6} p{} p{} p{} s{s}\n",
                    w[1].start_s, w[1].end_s, w[1].phone, w[0].phone, w[2].phone
                ));
            }
            count += 1;
        }
    }

    let manifest_path = out_dir.join("manifest.txt");
    fs::write(&manifest_path, manifest).map_err(|source| SynthError::Io {
        path: manifest_path.clone(),
        source,
    })?;
    let items_path = out_dir.join("items.abx");
    fs::write(&items_path, items).map_err(|source| SynthError::Io {
        path: items_path.clone(),
        source,
    })?;
    Ok(GeneratedCorpus {
        manifest_path,
        items_path,
        utterances: count,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audio::load_manifest;
    use tempfile::tempdir;

    fn small_cfg() -> SynthConfig {
        SynthConfig {
            num_phones: 3,
            num_speakers: 2,
            utterances_per_speaker: 2,
            seed: 7,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn corpus_is_byte_deterministic() {
        let dir = tempdir().unwrap();
        let (a, b) = (dir.path().join("a"), dir.path().join("b"));
        generate_synthetic_corpus(&small_cfg(), &a).unwrap();
        generate_synthetic_corpus(&small_cfg(), &b).unwrap();
        let mut names: Vec<String> = fs::read_dir(&a)
            .unwrap()
            .map(|e| e.unwrap().file_name().into_string().unwrap())
            .collect();
        names.sort();
        assert!(!names.is_empty());
        for n in names {
            assert_eq!(
                fs::read(a.join(&n)).unwrap(),
                fs::read(b.join(&n)).unwrap(),
                "{n} differs"
            );
        }
    }

    #[test]
    fn file_counts_match_config() {
        let dir = tempdir().unwrap();
        let out = generate_synthetic_corpus(&small_cfg(), dir.path()).unwrap();
        assert_eq!(out.utterances, 4);
        let wavs = fs::read_dir(dir.path())
            .unwrap()
            .filter(|e| {
                e.as_ref().unwrap().path().extension().is_some_and(|x| x == "wav")
            })
            .count();
        let alis = fs::read_dir(dir.path())
            .unwrap()
            .filter(|e| {
                e.as_ref().unwrap().path().extension().is_some_and(|x| x == "ali")
            })
            .count();
        assert_eq!(wavs, 4);
        assert_eq!(alis, 4);
        assert!(out.manifest_path.is_file());
        assert!(out.items_path.is_file());
    }

    #[test]
    fn corpus_loads_and_segments_are_in_range() {
        let dir = tempdir().unwrap();
        let cfg = small_cfg();
        let out = generate_synthetic_corpus(&cfg, dir.path()).unwrap();
        let ds = load_manifest(&out.manifest_path).unwrap();
        assert_eq!(ds.len(), 4);
        let (lo, hi) = cfg.segment_dur_range;
        for utt in &ds.utterances {
            assert_eq!(utt.wave.len(), 32_000);
            let track = utt.alignment.as_ref().unwrap();
            assert!(!track.intervals.is_empty());
            // intervals tile the utterance
            assert!(track.intervals[0].start_s == 0.0);
            assert!((track.intervals.last().unwrap().end_s - 2.0).abs() < 1e-9);
            for iv in &track.intervals {
                let d = iv.end_s - iv.start_s;
                assert!(
                    d >= lo - CROSSFADE_S - 1e-9 && d <= hi + CROSSFADE_S + 1e-9,
                    "segment duration {d}"
                );
            }
        }
    }

    #[test]
    fn item_file_lists_interior_segments_with_context() {
        let dir = tempdir().unwrap();
        let out = generate_synthetic_corpus(&small_cfg(), dir.path()).unwrap();
        let text = fs::read_to_string(&out.items_path).unwrap();
        let mut lines = text.lines();
        assert!(lines.next().unwrap().starts_with('#'));
        let mut n = 0;
        for line in lines {
            let f: Vec<&str> = line.split_whitespace().collect();
            assert_eq!(f.len(), 7);
            let onset: f64 = f[1].parse().unwrap();
            let offset: f64 = f[2].parse().unwrap();
            assert!(onset > 0.0 && offset < 2.0 && onset < offset);
            for p in [f[3], f[4], f[5]] {
                assert!(p.starts_with('p'));
            }
            n += 1;
        }
        assert!(n > 4, "expected interior segments, got {n}");
    }
}
