//! Synthetic reverberation: convolution with an impulse response built
//! from a unit impulse followed by exponentially decaying white noise.
//! The decay time maps linearly from the room-scale parameter,
//! RT60 = 0.05 + 0.7 * (room_scale / 100) seconds.

use num_complex::Complex64;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rustfft::FftPlanner;

use crate::audio::Waveform;

const DRY: f64 = 0.7;
const WET: f64 = 0.3;

/// RT60 at room scale 100; tail energy is normalized relative to this.
const RT60_MAX: f64 = 0.75;

/// Build the mixed impulse response, truncated to `max_len` samples.
///
/// The tail models a constant diffuse noise level under the exponential
/// decay, so its total energy grows linearly with RT60 (unit energy at
/// the largest room). Small rooms therefore stay close to the identity.
pub fn impulse_response(
    room_scale: f64,
    sample_rate: u32,
    max_len: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<f64> {
    assert!((0.0..=100.0).contains(&room_scale), "room scale out of range");
    let rt60 = 0.05 + 0.7 * (room_scale / 100.0);
    let tail_len = ((rt60 * sample_rate as f64).ceil() as usize).min(max_len.saturating_sub(1));
    // amplitude decays 60 dB over rt60
    let decay = (1000.0f64).ln() / (rt60 * sample_rate as f64);
    let mut tail: Vec<f64> = (1..=tail_len)
        .map(|t| {
            let g: f64 = rng.sample(StandardNormal);
            g * (-decay * t as f64).exp()
        })
        .collect();
    let energy: f64 = tail.iter().map(|v| v * v).sum();
    if energy > 0.0 {
        let scale = (rt60 / RT60_MAX).sqrt() / energy.sqrt();
        tail.iter_mut().for_each(|v| *v *= scale);
    }

    let mut h = Vec::with_capacity(1 + tail_len);
    h.push(DRY);
    h.extend(tail.iter().map(|&v| WET * v));
    h
}

/// FFT convolution, truncated to the length of `x`.
fn convolve_truncated(x: &[f64], h: &[f64]) -> Vec<f64> {
    let n = x.len();
    let full = n + h.len() - 1;
    let size = full.next_power_of_two();
    let mut planner = FftPlanner::new();
    let fft = planner.plan_fft_forward(size);
    let ifft = planner.plan_fft_inverse(size);

    let mut xa: Vec<Complex64> = x
        .iter()
        .map(|&v| Complex64::new(v, 0.0))
        .chain(std::iter::repeat(Complex64::ZERO))
        .take(size)
        .collect();
    let mut ha: Vec<Complex64> = h
        .iter()
        .map(|&v| Complex64::new(v, 0.0))
        .chain(std::iter::repeat(Complex64::ZERO))
        .take(size)
        .collect();
    fft.process(&mut xa);
    fft.process(&mut ha);
    for (a, b) in xa.iter_mut().zip(&ha) {
        *a *= b;
    }
    ifft.process(&mut xa);
    let scale = 1.0 / size as f64;
    xa[..n].iter().map(|c| c.re * scale).collect()
}

/// Apply reverberation. Output has the input's length and is re-scaled
/// to the input's peak amplitude.
pub fn reverb(wave: &Waveform, room_scale: f64, rng: &mut ChaCha8Rng) -> Waveform {
    let h = impulse_response(room_scale, wave.sample_rate_hz, wave.samples.len(), rng);
    let mut y = convolve_truncated(&wave.samples, &h);
    let in_peak = wave.samples.iter().fold(0.0f64, |m, &v| m.max(v.abs()));
    let out_peak = y.iter().fold(0.0f64, |m, &v| m.max(v.abs()));
    if out_peak > 1e-12 {
        let s = in_peak / out_peak;
        y.iter_mut().for_each(|v| *v *= s);
    }
    Waveform {
        samples: y,
        sample_rate_hz: wave.sample_rate_hz,
    }
}
