//! ABX phone discrimination.
//!
//! A triple (a, x of phone A; b of phone B) scores 1 when x sits closer
//! to a than to b under the DTW-aligned angular frame distance, 0.5 on a
//! tie, 0 otherwise. Triples group into cells keyed by the ordered phone
//! pair, the shared (previous, next) phone context, and the speaker
//! constellation; the reported error is 100 * (1 - unweighted mean cell
//! score). Within mode draws a, b, x from one speaker; across mode draws
//! a, b from one speaker and x from a different one.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array2, ArrayView1};
use rayon::prelude::*;

use super::features::load_features_concat;
use super::EvalError;
use crate::audio::FRAME_SHIFT_S;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AbxMode {
    Within,
    Across,
}

impl AbxMode {
    pub fn parse(s: &str) -> Result<Self, EvalError> {
        match s {
            "within" => Ok(AbxMode::Within),
            "across" => Ok(AbxMode::Across),
            other => Err(EvalError::BadArgument(format!(
                "unknown ABX mode {other:?} (expected within or across)"
            ))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            AbxMode::Within => "within",
            AbxMode::Across => "across",
        }
    }
}

/// One phone token with its feature slice and metadata.
#[derive(Debug, Clone)]
pub struct AbxItem {
    pub features: Array2<f64>,
    pub phone: String,
    pub context: (String, String),
    pub speaker: String,
}

/// One scored cell of the report.
#[derive(Debug, Clone, PartialEq)]
pub struct AbxCell {
    pub phone_a: String,
    pub phone_b: String,
    pub context: (String, String),
    pub speaker_spec: String,
    pub triples: usize,
    pub score: f64,
}

#[derive(Debug, Clone)]
pub struct AbxReport {
    pub mode: AbxMode,
    pub error_percent: f64,
    pub cells: Vec<AbxCell>,
}

/// Angular distance in [0, 1]: arccos of the cosine similarity over pi.
/// Zero-norm vectors sit at distance 0.5 from everything.
pub fn frame_distance(u: ArrayView1<f64>, v: ArrayView1<f64>) -> f64 {
    let nu = u.dot(&u).sqrt();
    let nv = v.dot(&v).sqrt();
    if nu < 1e-12 || nv < 1e-12 {
        return 0.5;
    }
    let cos = (u.dot(&v) / (nu * nv)).clamp(-1.0, 1.0);
    // rounding in the norm product leaves cos(u, u) an ulp shy of one;
    // snap so identical frames are at distance exactly zero
    if 1.0 - cos < 1e-12 {
        return 0.0;
    }
    cos.acos() / std::f64::consts::PI
}

/// Dynamic time warping over the frame-distance matrix with steps
/// {(1,0), (0,1), (1,1)}, each step paying the target cell's distance.
/// The result is the accumulated cost of the optimal path divided by the
/// number of cells on it; among equal-cost paths the shortest wins, so
/// the value is symmetric in its arguments.
pub fn dtw_distance(u: &Array2<f64>, v: &Array2<f64>) -> f64 {
    let (n, m) = (u.nrows(), v.nrows());
    assert!(n >= 1 && m >= 1, "sequences must be non-empty");
    let mut cost = Array2::<f64>::zeros((n, m));
    let mut plen = Array2::<u32>::zeros((n, m));
    for i in 0..n {
        let ui = u.row(i);
        for j in 0..m {
            let d = frame_distance(ui, v.row(j));
            let (prev_cost, prev_len) = if i == 0 && j == 0 {
                (0.0, 0u32)
            } else {
                // candidates in preference order: diagonal, u-step, v-step
                let mut best: Option<(f64, u32)> = None;
                let mut consider = |c: f64, l: u32| {
                    let better = match best {
                        None => true,
                        Some((bc, bl)) => c < bc || (c == bc && l < bl),
                    };
                    if better {
                        best = Some((c, l));
                    }
                };
                if i > 0 && j > 0 {
                    consider(cost[[i - 1, j - 1]], plen[[i - 1, j - 1]]);
                }
                if i > 0 {
                    consider(cost[[i - 1, j]], plen[[i - 1, j]]);
                }
                if j > 0 {
                    consider(cost[[i, j - 1]], plen[[i, j - 1]]);
                }
                best.unwrap()
            };
            cost[[i, j]] = prev_cost + d;
            plen[[i, j]] = prev_len + 1;
        }
    }
    cost[[n - 1, m - 1]] / plen[[n - 1, m - 1]] as f64
}

fn triple_score(d_ax: f64, d_bx: f64) -> f64 {
    if d_ax < d_bx {
        1.0
    } else if d_ax == d_bx {
        0.5
    } else {
        0.0
    }
}

/// Score a cell given the item indices of the A tokens, B tokens and X
/// tokens plus a pairwise distance lookup. `a == x` pairs are skipped
/// when the pools coincide.
fn score_cell(
    a_pool: &[usize],
    b_pool: &[usize],
    x_pool: &[usize],
    dist: &dyn Fn(usize, usize) -> f64,
) -> Option<(usize, f64)> {
    let mut total = 0.0;
    let mut count = 0usize;
    for &a in a_pool {
        for &x in x_pool {
            if a == x {
                continue;
            }
            let d_ax = dist(a, x);
            for &b in b_pool {
                total += triple_score(d_ax, dist(b, x));
                count += 1;
            }
        }
    }
    (count > 0).then(|| (count, total / count as f64))
}

/// Score every valid cell and aggregate the unweighted mean.
pub fn abx_score(items: &[AbxItem], mode: AbxMode) -> Result<AbxReport, EvalError> {
    // context groups are independent; distances never cross groups
    let mut groups: BTreeMap<(String, String), Vec<usize>> = BTreeMap::new();
    for (i, item) in items.iter().enumerate() {
        groups.entry(item.context.clone()).or_default().push(i);
    }
    let group_list: Vec<((String, String), Vec<usize>)> = groups.into_iter().collect();

    let mut cells: Vec<AbxCell> = group_list
        .par_iter()
        .flat_map(|(ctx, members)| {
            // pairwise distances within this context group
            let n = members.len();
            let mut dmat = vec![0.0f64; n * n];
            for p in 0..n {
                for q in (p + 1)..n {
                    let d = dtw_distance(&items[members[p]].features, &items[members[q]].features);
                    dmat[p * n + q] = d;
                    dmat[q * n + p] = d;
                }
            }
            let pos_of: BTreeMap<usize, usize> =
                members.iter().enumerate().map(|(p, &i)| (i, p)).collect();
            let dist = |a: usize, b: usize| dmat[pos_of[&a] * n + pos_of[&b]];

            // split by (speaker, phone)
            let mut by_spk_phone: BTreeMap<(&str, &str), Vec<usize>> = BTreeMap::new();
            let mut speakers: Vec<&str> = Vec::new();
            let mut phones: Vec<&str> = Vec::new();
            for &i in members {
                let it = &items[i];
                by_spk_phone
                    .entry((it.speaker.as_str(), it.phone.as_str()))
                    .or_default()
                    .push(i);
                if !speakers.contains(&it.speaker.as_str()) {
                    speakers.push(it.speaker.as_str());
                }
                if !phones.contains(&it.phone.as_str()) {
                    phones.push(it.phone.as_str());
                }
            }
            speakers.sort_unstable();
            phones.sort_unstable();

            let mut out = Vec::new();
            match mode {
                AbxMode::Within => {
                    for &spk in &speakers {
                        for &pa in &phones {
                            for &pb in &phones {
                                if pa == pb {
                                    continue;
                                }
                                let (Some(a_pool), Some(b_pool)) = (
                                    by_spk_phone.get(&(spk, pa)),
                                    by_spk_phone.get(&(spk, pb)),
                                ) else {
                                    continue;
                                };
                                if let Some((triples, score)) =
                                    score_cell(a_pool, b_pool, a_pool, &dist)
                                {
                                    out.push(AbxCell {
                                        phone_a: pa.into(),
                                        phone_b: pb.into(),
                                        context: ctx.clone(),
                                        speaker_spec: spk.into(),
                                        triples,
                                        score,
                                    });
                                }
                            }
                        }
                    }
                }
                AbxMode::Across => {
                    for &spk_ab in &speakers {
                        for &spk_x in &speakers {
                            if spk_ab == spk_x {
                                continue;
                            }
                            for &pa in &phones {
                                for &pb in &phones {
                                    if pa == pb {
                                        continue;
                                    }
                                    let (Some(a_pool), Some(b_pool), Some(x_pool)) = (
                                        by_spk_phone.get(&(spk_ab, pa)),
                                        by_spk_phone.get(&(spk_ab, pb)),
                                        by_spk_phone.get(&(spk_x, pa)),
                                    ) else {
                                        continue;
                                    };
                                    if let Some((triples, score)) =
                                        score_cell(a_pool, b_pool, x_pool, &dist)
                                    {
                                        out.push(AbxCell {
                                            phone_a: pa.into(),
                                            phone_b: pb.into(),
                                            context: ctx.clone(),
                                            speaker_spec: format!("{spk_ab}->{spk_x}"),
                                            triples,
                                            score,
                                        });
                                    }
                                }
                            }
                        }
                    }
                }
            }
            out
        })
        .collect();

    if cells.is_empty() {
        return Err(EvalError::NoValidCells);
    }
    cells.sort_by(|a, b| {
        (&a.phone_a, &a.phone_b, &a.context, &a.speaker_spec).cmp(&(
            &b.phone_a,
            &b.phone_b,
            &b.context,
            &b.speaker_spec,
        ))
    });
    let mean_score = cells.iter().map(|c| c.score).sum::<f64>() / cells.len() as f64;
    Ok(AbxReport {
        mode,
        error_percent: 100.0 * (1.0 - mean_score),
        cells,
    })
}

/// Load ABX items from an item file against per-utterance feature files.
///
/// Format: a `#file onset offset #phone prev-phone next-phone speaker`
/// header line, then one whitespace-separated record per item with times
/// in seconds. Feature rows are selected by the frame-center rule
/// (onset <= (i + 0.5) * shift < offset); items that slice to zero
/// frames are skipped.
pub fn load_abx_items(items_path: &Path, feature_dirs: &[PathBuf]) -> Result<Vec<AbxItem>, EvalError> {
    let text = fs::read_to_string(items_path).map_err(|source| EvalError::Io {
        path: items_path.to_path_buf(),
        source,
    })?;
    let bad = |line: usize, msg: String| EvalError::BadItemFile {
        path: items_path.to_path_buf(),
        line,
        msg,
    };
    let mut items = Vec::new();
    let mut cache: BTreeMap<String, Array2<f64>> = BTreeMap::new();
    for (idx, raw) in text.lines().enumerate() {
        let lineno = idx + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() != 7 {
            return Err(bad(lineno, format!("expected 7 fields, got {}", f.len())));
        }
        let onset: f64 = f[1]
            .parse()
            .map_err(|_| bad(lineno, format!("bad onset {:?}", f[1])))?;
        let offset: f64 = f[2]
            .parse()
            .map_err(|_| bad(lineno, format!("bad offset {:?}", f[2])))?;
        if !(onset < offset) {
            return Err(bad(lineno, "offset must exceed onset".into()));
        }
        let utt = f[0].to_string();
        if !cache.contains_key(&utt) {
            cache.insert(utt.clone(), load_features_concat(feature_dirs, &utt)?);
        }
        let feats = &cache[&utt];
        let rows: Vec<usize> = (0..feats.nrows())
            .filter(|&i| {
                let center = (i as f64 + 0.5) * FRAME_SHIFT_S;
                onset <= center && center < offset
            })
            .collect();
        if rows.is_empty() {
            continue;
        }
        let mut slice = Array2::<f64>::zeros((rows.len(), feats.ncols()));
        for (dst, &src) in rows.iter().enumerate() {
            slice.row_mut(dst).assign(&feats.row(src));
        }
        items.push(AbxItem {
            features: slice,
            phone: f[3].to_string(),
            context: (f[4].to_string(), f[5].to_string()),
            speaker: f[6].to_string(),
        });
    }
    Ok(items)
}
