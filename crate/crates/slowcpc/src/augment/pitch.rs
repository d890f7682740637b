//! Pitch shifting: resample by the pitch ratio, then restore the original
//! duration with a waveform-similarity overlap-add time stretch (25 ms
//! Hann windows, 10 ms hop, best-correlation offset search within 5 ms).

use crate::audio::Waveform;

const WINDOW: usize = 400; // 25 ms at 16 kHz
const HOP: usize = 160; // 10 ms
const SEARCH: isize = 80; // 5 ms

/// Shift the fundamental by `2^(shift/600)` (shift is in hundredths of a
/// tone, a tone being 200 cents), preserving length.
pub fn pitch_shift(wave: &Waveform, shift: i64) -> Waveform {
    assert!(shift.unsigned_abs() <= 600, "shift out of range");
    if shift == 0 {
        return wave.clone();
    }
    let ratio = 2f64.powf(shift as f64 / 600.0);
    let resampled = resample(&wave.samples, ratio);
    let restored = stretch_to(&resampled, wave.samples.len());
    Waveform {
        samples: restored,
        sample_rate_hz: wave.sample_rate_hz,
    }
}

/// Read the signal at rate `ratio` with linear interpolation; a ratio
/// above one shortens the signal and raises every frequency by `ratio`.
fn resample(x: &[f64], ratio: f64) -> Vec<f64> {
    let n = x.len();
    if n == 0 {
        return Vec::new();
    }
    let out_len = (((n - 1) as f64) / ratio).floor() as usize + 1;
    (0..out_len)
        .map(|i| {
            let pos = i as f64 * ratio;
            let i0 = pos.floor() as usize;
            let frac = pos - i0 as f64;
            if i0 + 1 < n {
                x[i0] * (1.0 - frac) + x[i0 + 1] * frac
            } else {
                x[n - 1]
            }
        })
        .collect()
}

fn hann(i: usize) -> f64 {
    0.5 * (1.0 - (2.0 * std::f64::consts::PI * i as f64 / (WINDOW - 1) as f64).cos())
}

fn correlation(x: &[f64], a: usize, b: usize) -> f64 {
    let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
    for i in 0..WINDOW {
        let (va, vb) = (x[a + i], x[b + i]);
        dot += va * vb;
        na += va * va;
        nb += vb * vb;
    }
    dot / (na * nb).sqrt().max(1e-12)
}

/// Time-stretch `x` to `target_len` samples without changing pitch.
/// Each synthesis frame copies the input segment near the proportional
/// position that best continues the previously copied segment.
fn stretch_to(x: &[f64], target_len: usize) -> Vec<f64> {
    let n = x.len();
    if n == target_len {
        return x.to_vec();
    }
    if n < WINDOW + 1 || target_len < WINDOW + 1 {
        // too short for overlap-add; fall back to plain interpolation
        let ratio = n as f64 / target_len as f64;
        return resample(x, ratio).into_iter().take(target_len).collect();
    }

    let mut out = vec![0.0f64; target_len];
    let mut wsum = vec![0.0f64; target_len];
    let rate = n as f64 / target_len as f64;
    let max_start = n - WINDOW;

    let mut prev_pos = 0usize;
    let mut k = 0usize;
    while k * HOP < target_len {
        let out_pos = k * HOP;
        let chosen = if k == 0 {
            0
        } else {
            // natural continuation of the previous frame
            let natural = (prev_pos + HOP).min(max_start);
            let nominal = ((out_pos as f64 * rate).round() as isize).clamp(0, max_start as isize);
            let lo = (nominal - SEARCH).max(0) as usize;
            let hi = (nominal + SEARCH).min(max_start as isize) as usize;
            let mut best = lo;
            let mut best_score = f64::NEG_INFINITY;
            for cand in lo..=hi {
                let score = correlation(x, cand, natural);
                if score > best_score {
                    best_score = score;
                    best = cand;
                }
            }
            best
        };
        prev_pos = chosen;
        let write = WINDOW.min(target_len - out_pos);
        for i in 0..write {
            let w = hann(i);
            out[out_pos + i] += x[chosen + i] * w;
            wsum[out_pos + i] += w;
        }
        k += 1;
    }
    for (o, &w) in out.iter_mut().zip(&wsum) {
        if w > 1e-8 {
            *o /= w;
        }
    }
    out
}
