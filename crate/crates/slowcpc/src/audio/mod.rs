//! Corpus ingestion: WAV files, manifests, forced alignments, and the
//! sampler that turns a dataset into fixed-length training batches.

mod wav;

pub use wav::{load_wav, write_wav};

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

/// Sample rate every training/eval input must have.
pub const TRAIN_SAMPLE_RATE: u32 = 16_000;
/// Total stride of the encoder: samples per feature frame.
pub const ENCODER_STRIDE: usize = 160;
/// Feature frame shift in seconds (10 ms at 16 kHz).
pub const FRAME_SHIFT_S: f64 = ENCODER_STRIDE as f64 / TRAIN_SAMPLE_RATE as f64;
/// Label assigned to frames not covered by any alignment interval.
pub const SILENCE_LABEL: &str = "<sil>";

#[derive(Debug, Error)]
pub enum AudioError {
    #[error("{0}: not a RIFF file")]
    NotRiff(PathBuf),
    #[error("{path}: unsupported format: {reason}")]
    UnsupportedFormat { path: PathBuf, reason: String },
    #[error("{path}: sample rate {rate} Hz, expected {TRAIN_SAMPLE_RATE}")]
    BadRate { path: PathBuf, rate: u32 },
    #[error("{path}: io error: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: parse error: {msg}")]
    ParseError {
        path: PathBuf,
        line: usize,
        msg: String,
    },
    #[error("missing file listed in manifest: {0}")]
    MissingFile(PathBuf),
    #[error("{path}: intervals [{a_start}, {a_end}) and [{b_start}, {b_end}) overlap")]
    OverlapError {
        path: PathBuf,
        a_start: f64,
        a_end: f64,
        b_start: f64,
        b_end: f64,
    },
    #[error("no utterance is at least {0} samples long")]
    NoEligibleUtterance(usize),
}

/// Mono PCM audio scaled to [-1, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f64>,
    pub sample_rate_hz: u32,
}

impl Waveform {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate_hz as f64
    }
}

/// One labeled time interval of a forced alignment, in seconds.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentInterval {
    pub start_s: f64,
    pub end_s: f64,
    pub label: String,
}

/// Sorted, non-overlapping labeled intervals for one utterance.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AlignmentTrack {
    pub intervals: Vec<AlignmentInterval>,
}

/// One corpus utterance; audio is loaded eagerly so that every
/// wave path is known to parse before training starts.
#[derive(Debug, Clone)]
pub struct Utterance {
    pub id: String,
    pub wave_path: PathBuf,
    pub speaker: String,
    pub alignment: Option<AlignmentTrack>,
    pub wave: Waveform,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub utterances: Vec<Utterance>,
    pub root: PathBuf,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.utterances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.utterances.is_empty()
    }
}

/// A batch of training windows. `future_source` starts as an exact copy
/// of `past_windows`; augmentation may later replace it, the past side is
/// never touched.
#[derive(Debug, Clone, PartialEq)]
pub struct CpcBatch {
    pub past_windows: Array2<f64>,
    pub future_source: Array2<f64>,
    pub speaker_ids: Vec<String>,
    /// (utterance id, start sample) per batch row.
    pub window_origin: Vec<(String, usize)>,
}

/// Load a manifest of `<utt-id> <relative-wav-path> <speaker> [alignment-path]`
/// lines. Paths resolve against the manifest's directory; every referenced
/// file is read and validated immediately.
pub fn load_manifest(path: &Path) -> Result<Dataset, AudioError> {
    let text = fs::read_to_string(path).map_err(|e| AudioError::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    let root = path
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."));

    let mut seen = HashSet::new();
    let mut utterances = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let lineno = idx + 1;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() < 3 || fields.len() > 4 {
            return Err(AudioError::ParseError {
                path: path.to_path_buf(),
                line: lineno,
                msg: format!("expected 3 or 4 fields, got {}", fields.len()),
            });
        }
        let id = fields[0].to_string();
        if !seen.insert(id.clone()) {
            return Err(AudioError::ParseError {
                path: path.to_path_buf(),
                line: lineno,
                msg: format!("duplicate utterance id {id:?}"),
            });
        }
        let wave_path = root.join(fields[1]);
        if !wave_path.is_file() {
            return Err(AudioError::MissingFile(wave_path));
        }
        let wave = load_wav(&wave_path)?;
        let alignment = match fields.get(3) {
            Some(rel) => {
                let ap = root.join(rel);
                if !ap.is_file() {
                    return Err(AudioError::MissingFile(ap));
                }
                Some(load_alignments(&ap)?)
            }
            None => None,
        };
        utterances.push(Utterance {
            id,
            wave_path,
            speaker: fields[2].to_string(),
            alignment,
            wave,
        });
    }
    Ok(Dataset { utterances, root })
}

/// Load a `<start_s> <end_s> <label>` alignment file, enforcing ordering
/// and non-overlap.
pub fn load_alignments(path: &Path) -> Result<AlignmentTrack, AudioError> {
    let text = fs::read_to_string(path).map_err(|e| AudioError::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    let mut intervals = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let lineno = idx + 1;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 3 {
            return Err(AudioError::ParseError {
                path: path.to_path_buf(),
                line: lineno,
                msg: format!("expected 3 fields, got {}", fields.len()),
            });
        }
        let parse_time = |s: &str| -> Result<f64, AudioError> {
            s.parse::<f64>().map_err(|_| AudioError::ParseError {
                path: path.to_path_buf(),
                line: lineno,
                msg: format!("bad time value {s:?}"),
            })
        };
        let start_s = parse_time(fields[0])?;
        let end_s = parse_time(fields[1])?;
        if !(start_s < end_s) {
            return Err(AudioError::ParseError {
                path: path.to_path_buf(),
                line: lineno,
                msg: format!("interval end {end_s} not after start {start_s}"),
            });
        }
        intervals.push(AlignmentInterval {
            start_s,
            end_s,
            label: fields[2].to_string(),
        });
    }
    intervals.sort_by(|a, b| a.start_s.total_cmp(&b.start_s));
    for pair in intervals.windows(2) {
        if pair[1].start_s < pair[0].end_s {
            return Err(AudioError::OverlapError {
                path: path.to_path_buf(),
                a_start: pair[0].start_s,
                a_end: pair[0].end_s,
                b_start: pair[1].start_s,
                b_end: pair[1].end_s,
            });
        }
    }
    Ok(AlignmentTrack { intervals })
}

/// Frame-level labels: frame `i` takes the label of the interval containing
/// its center time `(i + 0.5) * frame_shift_s`, end-exclusive. Frames
/// covered by no interval get [`SILENCE_LABEL`]. Total over all inputs.
pub fn frame_labels(track: &AlignmentTrack, num_frames: usize, frame_shift_s: f64) -> Vec<String> {
    (0..num_frames)
        .map(|i| {
            let center = (i as f64 + 0.5) * frame_shift_s;
            track
                .intervals
                .iter()
                .find(|iv| iv.start_s <= center && center < iv.end_s)
                .map(|iv| iv.label.clone())
                .unwrap_or_else(|| SILENCE_LABEL.to_string())
        })
        .collect()
}

/// Sample `batch_size` windows of `window_samples` samples, uniform over
/// eligible utterances and over start offsets within each. The future side
/// starts as an exact copy of the past side.
pub fn sample_training_windows(
    dataset: &Dataset,
    window_samples: usize,
    batch_size: usize,
    rng: &mut ChaCha8Rng,
) -> Result<CpcBatch, AudioError> {
    assert!(
        window_samples % ENCODER_STRIDE == 0,
        "window must be a multiple of the encoder stride"
    );
    let eligible: Vec<usize> = dataset
        .utterances
        .iter()
        .enumerate()
        .filter(|(_, u)| u.wave.len() >= window_samples)
        .map(|(i, _)| i)
        .collect();
    if eligible.is_empty() {
        return Err(AudioError::NoEligibleUtterance(window_samples));
    }

    let mut past = Array2::<f64>::zeros((batch_size, window_samples));
    let mut speaker_ids = Vec::with_capacity(batch_size);
    let mut window_origin = Vec::with_capacity(batch_size);
    for row in 0..batch_size {
        let utt = &dataset.utterances[eligible[rng.random_range(0..eligible.len())]];
        let max_start = utt.wave.len() - window_samples;
        let start = if max_start == 0 {
            0
        } else {
            rng.random_range(0..=max_start)
        };
        past.row_mut(row)
            .iter_mut()
            .zip(&utt.wave.samples[start..start + window_samples])
            .for_each(|(dst, &src)| *dst = src);
        speaker_ids.push(utt.speaker.clone());
        window_origin.push((utt.id.clone(), start));
    }
    Ok(CpcBatch {
        future_source: past.clone(),
        past_windows: past,
        speaker_ids,
        window_origin,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::derive_rng;
    use tempfile::tempdir;

    fn write_tone(path: &Path, n: usize) {
        let wave = Waveform {
            samples: (0..n).map(|i| (i as f64 * 0.01).sin() * 0.5).collect(),
            sample_rate_hz: TRAIN_SAMPLE_RATE,
        };
        write_wav(path, &wave).unwrap();
    }

    #[test]
    fn empty_manifest_is_empty_dataset() {
        let dir = tempdir().unwrap();
        let m = dir.path().join("manifest.txt");
        fs::write(&m, "").unwrap();
        let ds = load_manifest(&m).unwrap();
        assert!(ds.is_empty());
    }

    #[test]
    fn single_line_manifest_resolves_path() {
        let dir = tempdir().unwrap();
        write_tone(&dir.path().join("a.wav"), 320);
        let m = dir.path().join("manifest.txt");
        fs::write(&m, "utt1 a.wav spk0\n").unwrap();
        let ds = load_manifest(&m).unwrap();
        assert_eq!(ds.len(), 1);
        assert_eq!(ds.utterances[0].id, "utt1");
        assert_eq!(ds.utterances[0].wave_path, dir.path().join("a.wav"));
        assert_eq!(ds.utterances[0].wave.len(), 320);
    }

    #[test]
    fn duplicate_id_rejected() {
        let dir = tempdir().unwrap();
        write_tone(&dir.path().join("a.wav"), 320);
        let m = dir.path().join("manifest.txt");
        fs::write(&m, "utt1 a.wav spk0\nutt1 a.wav spk1\n").unwrap();
        match load_manifest(&m) {
            Err(AudioError::ParseError { line, msg, .. }) => {
                assert_eq!(line, 2);
                assert!(msg.contains("utt1"));
            }
            other => panic!("expected ParseError, got {other:?}"),
        }
    }

    #[test]
    fn missing_wav_rejected() {
        let dir = tempdir().unwrap();
        let m = dir.path().join("manifest.txt");
        fs::write(&m, "utt1 nothere.wav spk0\n").unwrap();
        assert!(matches!(load_manifest(&m), Err(AudioError::MissingFile(_))));
    }

    #[test]
    fn alignment_parse_and_sort() {
        let dir = tempdir().unwrap();
        let a = dir.path().join("a.ali");
        fs::write(&a, "0.00 0.05 a\n0.05 0.10 b\n").unwrap();
        let t = load_alignments(&a).unwrap();
        assert_eq!(t.intervals.len(), 2);
        assert_eq!(t.intervals[0].label, "a");
    }

    #[test]
    fn alignment_overlap_rejected() {
        let dir = tempdir().unwrap();
        let a = dir.path().join("a.ali");
        fs::write(&a, "0.0 0.1 a\n0.05 0.2 b\n").unwrap();
        assert!(matches!(
            load_alignments(&a),
            Err(AudioError::OverlapError { .. })
        ));
    }

    #[test]
    fn alignment_end_before_start_rejected() {
        let dir = tempdir().unwrap();
        let a = dir.path().join("a.ali");
        fs::write(&a, "0.1 0.05 a\n").unwrap();
        assert!(matches!(
            load_alignments(&a),
            Err(AudioError::ParseError { .. })
        ));
    }

    #[test]
    fn frame_labels_center_time_rule() {
        let track = AlignmentTrack {
            intervals: vec![
                AlignmentInterval {
                    start_s: 0.0,
                    end_s: 0.05,
                    label: "a".into(),
                },
                AlignmentInterval {
                    start_s: 0.05,
                    end_s: 0.10,
                    label: "b".into(),
                },
            ],
        };
        let labels = frame_labels(&track, 10, 0.01);
        assert_eq!(
            labels,
            vec!["a", "a", "a", "a", "a", "b", "b", "b", "b", "b"]
        );
    }

    #[test]
    fn frame_labels_empty_track_is_silence() {
        let labels = frame_labels(&AlignmentTrack::default(), 3, 0.01);
        assert_eq!(labels, vec![SILENCE_LABEL; 3]);
    }

    #[test]
    fn frame_labels_end_exclusive_containment() {
        // Centers at 0.005 and 0.015; the interval [0, 0.015) does not
        // contain its end point, so the second frame is silence.
        let track = AlignmentTrack {
            intervals: vec![AlignmentInterval {
                start_s: 0.0,
                end_s: 0.015,
                label: "a".into(),
            }],
        };
        let labels = frame_labels(&track, 2, 0.01);
        assert_eq!(labels, vec!["a", SILENCE_LABEL]);
    }

    #[test]
    fn frame_labels_total_length() {
        let track = AlignmentTrack::default();
        for n in [0usize, 1, 7] {
            assert_eq!(frame_labels(&track, n, 0.01).len(), n);
        }
    }

    fn tiny_dataset(len: usize) -> Dataset {
        let dir = tempdir().unwrap();
        write_tone(&dir.path().join("a.wav"), len);
        let m = dir.path().join("manifest.txt");
        fs::write(&m, "utt1 a.wav spk0\n").unwrap();
        load_manifest(&m).unwrap()
    }

    #[test]
    fn sampling_single_possible_window() {
        let ds = tiny_dataset(20480);
        let mut rng = derive_rng(0, &[]);
        let b = sample_training_windows(&ds, 20480, 2, &mut rng).unwrap();
        assert_eq!(b.window_origin, vec![("utt1".into(), 0), ("utt1".into(), 0)]);
        assert_eq!(b.past_windows, b.future_source);
    }

    #[test]
    fn sampling_no_eligible_utterance() {
        let ds = tiny_dataset(160);
        let mut rng = derive_rng(0, &[]);
        assert!(matches!(
            sample_training_windows(&ds, 20480, 1, &mut rng),
            Err(AudioError::NoEligibleUtterance(_))
        ));
    }

    #[test]
    fn sampling_deterministic_under_seed() {
        let ds = tiny_dataset(40960);
        let a = sample_training_windows(&ds, 20480, 4, &mut derive_rng(9, &[3])).unwrap();
        let b = sample_training_windows(&ds, 20480, 4, &mut derive_rng(9, &[3])).unwrap();
        assert_eq!(a, b);
    }
}
