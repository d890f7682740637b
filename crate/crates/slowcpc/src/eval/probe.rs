//! Linear probes over frozen features: multinomial logistic regression
//! trained with full-batch Adam. Measures how linearly accessible a
//! label (phone or speaker) is in a representation.

use std::path::PathBuf;

use ndarray::{Array1, Array2, ArrayView2};
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;

use super::features::load_features_concat;
use super::EvalError;
use crate::audio::{frame_labels, Dataset, FRAME_SHIFT_S};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProbeTask {
    Phone,
    Speaker,
}

impl ProbeTask {
    pub fn as_str(&self) -> &'static str {
        match self {
            ProbeTask::Phone => "phone",
            ProbeTask::Speaker => "speaker",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeReport {
    pub task: ProbeTask,
    pub train_accuracy: f64,
    pub test_accuracy: f64,
    pub num_classes: usize,
}

/// Train/test row indices into the feature matrix.
#[derive(Debug, Clone, Default)]
pub struct ProbeSplit {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// The summarizing embedding of a context sequence: its final frame.
pub fn utterance_embedding(c: &Array2<f64>) -> Array1<f64> {
    assert!(c.nrows() >= 1, "empty context sequence");
    c.row(c.nrows() - 1).to_owned()
}

/// Rows of frozen features with integer labels, plus the grouping
/// needed for leakage-free splits.
#[derive(Debug, Clone)]
pub struct FrameDataset {
    pub x: Array2<f64>,
    pub labels: Vec<usize>,
    pub label_names: Vec<String>,
    /// Group index (utterance for phone probes, speaker for the
    /// stratified speaker split) of each row.
    pub group_of_row: Vec<usize>,
}

fn intern(names: &mut Vec<String>, value: &str) -> usize {
    match names.iter().position(|n| n == value) {
        Some(i) => i,
        None => {
            names.push(value.to_string());
            names.len() - 1
        }
    }
}

/// One row per feature frame, labeled through the forced alignment by
/// the frame-center rule. Utterances without alignments are an error.
pub fn phone_frame_dataset(
    dataset: &Dataset,
    feature_dirs: &[PathBuf],
) -> Result<FrameDataset, EvalError> {
    let mut rows: Vec<Array2<f64>> = Vec::new();
    let mut labels = Vec::new();
    let mut label_names = Vec::new();
    let mut group_of_row = Vec::new();
    for (ui, utt) in dataset.utterances.iter().enumerate() {
        let track = utt.alignment.as_ref().ok_or_else(|| {
            EvalError::BadArgument(format!("utterance {} has no alignment", utt.id))
        })?;
        let feats = load_features_concat(feature_dirs, &utt.id)?;
        let frame_names = frame_labels(track, feats.nrows(), FRAME_SHIFT_S);
        for name in frame_names {
            labels.push(intern(&mut label_names, &name));
            group_of_row.push(ui);
        }
        rows.push(feats);
    }
    let d = rows[0].ncols();
    let n: usize = rows.iter().map(|r| r.nrows()).sum();
    let mut x = Array2::<f64>::zeros((n, d));
    let mut at = 0;
    for r in rows {
        x.slice_mut(ndarray::s![at..at + r.nrows(), ..]).assign(&r);
        at += r.nrows();
    }
    Ok(FrameDataset {
        x,
        labels,
        label_names,
        group_of_row,
    })
}

/// One row per utterance: the final context frame, labeled with the
/// speaker. Grouping is by speaker so splits can stratify.
pub fn speaker_embedding_dataset(
    dataset: &Dataset,
    feature_dirs: &[PathBuf],
) -> Result<FrameDataset, EvalError> {
    let mut label_names = Vec::new();
    let mut x = Array2::<f64>::zeros((0, 0));
    let mut labels = Vec::with_capacity(dataset.len());
    for (ui, utt) in dataset.utterances.iter().enumerate() {
        let feats = load_features_concat(feature_dirs, &utt.id)?;
        let emb = utterance_embedding(&feats);
        if ui == 0 {
            x = Array2::zeros((dataset.len(), emb.len()));
        }
        x.row_mut(ui).assign(&emb);
        labels.push(intern(&mut label_names, &utt.speaker));
    }
    let group_of_row = labels.clone();
    Ok(FrameDataset {
        x,
        labels,
        label_names,
        group_of_row,
    })
}

/// Group-wise train/test split: whole groups are shuffled and the last
/// `test_fraction` of them become the test set, so no group leaks
/// across the boundary. With one group per label value this reduces to
/// a stratified row split.
pub fn split_by_group(
    group_of_row: &[usize],
    test_fraction: f64,
    rng: &mut ChaCha8Rng,
) -> ProbeSplit {
    let mut groups: Vec<usize> = {
        let mut g: Vec<usize> = group_of_row.to_vec();
        g.sort_unstable();
        g.dedup();
        g
    };
    groups.shuffle(rng);
    let n_test = ((groups.len() as f64) * test_fraction).round() as usize;
    let n_test = n_test.clamp(usize::from(groups.len() > 1), groups.len() - 1);
    let test_groups: std::collections::HashSet<usize> =
        groups[groups.len() - n_test..].iter().copied().collect();
    let mut split = ProbeSplit::default();
    for (row, g) in group_of_row.iter().enumerate() {
        if test_groups.contains(g) {
            split.test.push(row);
        } else {
            split.train.push(row);
        }
    }
    split
}

/// Stratified per-label row split (used by the speaker probe, where
/// every speaker must appear on both sides).
pub fn stratified_split(
    labels: &[usize],
    test_fraction: f64,
    rng: &mut ChaCha8Rng,
) -> ProbeSplit {
    let max = labels.iter().copied().max().unwrap_or(0);
    let mut per_label: Vec<Vec<usize>> = vec![Vec::new(); max + 1];
    for (row, &l) in labels.iter().enumerate() {
        per_label[l].push(row);
    }
    let mut split = ProbeSplit::default();
    for rows in per_label.iter_mut() {
        match rows.len() {
            0 => continue,
            // a label seen once can only be trained on
            1 => split.train.push(rows[0]),
            m => {
                rows.shuffle(rng);
                let n_test = (((m as f64) * test_fraction).round() as usize).clamp(1, m - 1);
                split.test.extend_from_slice(&rows[..n_test]);
                split.train.extend_from_slice(&rows[n_test..]);
            }
        }
    }
    split.train.sort_unstable();
    split.test.sort_unstable();
    split
}

fn accuracy(
    x: ArrayView2<f64>,
    labels: &[usize],
    idx: &[usize],
    w: &Array2<f64>,
    b: &Array1<f64>,
) -> f64 {
    if idx.is_empty() {
        return 0.0;
    }
    let mut correct = 0usize;
    for &i in idx {
        let logits = w.dot(&x.row(i)) + b;
        let mut best = 0usize;
        for c in 1..logits.len() {
            if logits[c] > logits[best] {
                best = c;
            }
        }
        if best == labels[i] {
            correct += 1;
        }
    }
    100.0 * correct as f64 / idx.len() as f64
}

/// Train a softmax linear classifier on the train split of frozen
/// features and report train/test frame accuracy in percent.
///
/// Deterministic: weights start at zero (the objective is convex) and
/// optimization is full-batch Adam for `epochs` iterations.
pub fn train_linear_probe(
    features: &Array2<f64>,
    labels: &[usize],
    split: &ProbeSplit,
    task: ProbeTask,
    epochs: usize,
    lr: f64,
) -> Result<ProbeReport, EvalError> {
    if features.nrows() != labels.len() {
        return Err(EvalError::LengthMismatch {
            a: features.nrows(),
            b: labels.len(),
        });
    }
    let num_classes = labels.iter().copied().max().map_or(0, |m| m + 1);
    let mut seen = vec![false; num_classes];
    for &i in &split.train {
        seen[labels[i]] = true;
    }
    if seen.iter().filter(|&&s| s).count() < 2 {
        return Err(EvalError::SingleClass);
    }
    let d = features.ncols();

    let mut w = Array2::<f64>::zeros((num_classes, d));
    let mut b = Array1::<f64>::zeros(num_classes);
    let mut m_w = Array2::<f64>::zeros((num_classes, d));
    let mut v_w = Array2::<f64>::zeros((num_classes, d));
    let mut m_b = Array1::<f64>::zeros(num_classes);
    let mut v_b = Array1::<f64>::zeros(num_classes);
    let (beta1, beta2, eps): (f64, f64, f64) = (0.9, 0.999, 1e-8);

    let inv_n = 1.0 / split.train.len() as f64;
    for epoch in 1..=epochs {
        let mut g_w = Array2::<f64>::zeros((num_classes, d));
        let mut g_b = Array1::<f64>::zeros(num_classes);
        for &i in &split.train {
            let xi = features.row(i);
            let mut logits = w.dot(&xi) + &b;
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            logits.mapv_inplace(|v| (v - max).exp());
            let denom = logits.sum();
            for c in 0..num_classes {
                let q = logits[c] / denom - if c == labels[i] { 1.0 } else { 0.0 };
                let coeff = q * inv_n;
                g_w.row_mut(c).scaled_add(coeff, &xi);
                g_b[c] += coeff;
            }
        }
        let bc1 = 1.0 - beta1.powi(epoch as i32);
        let bc2 = 1.0 - beta2.powi(epoch as i32);
        let mut apply = |theta: &mut f64, m: &mut f64, v: &mut f64, g: f64| {
            *m = beta1 * *m + (1.0 - beta1) * g;
            *v = beta2 * *v + (1.0 - beta2) * g * g;
            *theta -= lr * (*m / bc1) / ((*v / bc2).sqrt() + eps);
        };
        for ((theta, m), (v, g)) in w
            .iter_mut()
            .zip(m_w.iter_mut())
            .zip(v_w.iter_mut().zip(g_w.iter()))
        {
            apply(theta, m, v, *g);
        }
        for ((theta, m), (v, g)) in b
            .iter_mut()
            .zip(m_b.iter_mut())
            .zip(v_b.iter_mut().zip(g_b.iter()))
        {
            apply(theta, m, v, *g);
        }
    }

    Ok(ProbeReport {
        task,
        train_accuracy: accuracy(features.view(), labels, &split.train, &w, &b),
        test_accuracy: accuracy(features.view(), labels, &split.test, &w, &b),
        num_classes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::derive_rng;
    use ndarray::array;
    use rand::seq::SliceRandom;
    use rand::Rng;

    #[test]
    fn embedding_is_last_row() {
        let c = array![[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]];
        assert_eq!(utterance_embedding(&c), array![5.0, 6.0]);
        let single = array![[9.0, 8.0]];
        assert_eq!(utterance_embedding(&single), array![9.0, 8.0]);
        // truncating to the full length leaves it fixed; appending moves it
        let appended = array![[1.0, 2.0], [3.0, 4.0], [5.0, 6.0], [7.0, 8.0]];
        assert_ne!(utterance_embedding(&appended), utterance_embedding(&c));
    }

    fn separable_fixture() -> (Array2<f64>, Vec<usize>, ProbeSplit) {
        let mut rng = derive_rng(90, &[]);
        let n = 120;
        let mut x = Array2::<f64>::zeros((n, 2));
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let class = i % 2;
            let center = if class == 0 { (-2.0, -1.0) } else { (2.0, 1.5) };
            x[[i, 0]] = center.0 + rng.random::<f64>() - 0.5;
            x[[i, 1]] = center.1 + rng.random::<f64>() - 0.5;
            labels.push(class);
        }
        let split = ProbeSplit {
            train: (0..90).collect(),
            test: (90..n).collect(),
        };
        (x, labels, split)
    }

    #[test]
    fn separable_toy_set_reaches_perfect_accuracy() {
        let (x, labels, split) = separable_fixture();
        let rep =
            train_linear_probe(&x, &labels, &split, ProbeTask::Phone, 10, 0.5).unwrap();
        assert_eq!(rep.test_accuracy, 100.0, "{rep:?}");
        assert_eq!(rep.num_classes, 2);
    }

    #[test]
    fn training_improves_over_epochs() {
        let (x, labels, split) = separable_fixture();
        let short =
            train_linear_probe(&x, &labels, &split, ProbeTask::Phone, 1, 0.05).unwrap();
        let long =
            train_linear_probe(&x, &labels, &split, ProbeTask::Phone, 40, 0.05).unwrap();
        assert!(long.train_accuracy >= short.train_accuracy);
    }

    #[test]
    fn shuffled_labels_stay_near_chance() {
        let mut rng = derive_rng(91, &[]);
        let n = 2000;
        let classes = 10;
        let x = Array2::from_shape_fn((n, 8), |_| rng.random::<f64>() - 0.5);
        for seed in 0..5u64 {
            let mut labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
            labels.shuffle(&mut derive_rng(92, &[seed]));
            let split = ProbeSplit {
                train: (0..1600).collect(),
                test: (1600..n).collect(),
            };
            let rep =
                train_linear_probe(&x, &labels, &split, ProbeTask::Phone, 30, 0.05).unwrap();
            assert!(
                (5.0..=15.0).contains(&rep.test_accuracy),
                "seed {seed}: {}",
                rep.test_accuracy
            );
        }
    }

    #[test]
    fn single_class_rejected() {
        let x = Array2::<f64>::ones((4, 2));
        let labels = vec![1usize; 4];
        let split = ProbeSplit {
            train: (0..4).collect(),
            test: vec![],
        };
        assert!(matches!(
            train_linear_probe(&x, &labels, &split, ProbeTask::Phone, 3, 0.1),
            Err(EvalError::SingleClass)
        ));
    }
}
