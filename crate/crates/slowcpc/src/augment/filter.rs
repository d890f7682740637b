//! Butterworth band-pass design (analog prototype, low-pass to band-pass
//! transform, bilinear transform with prewarping) realized as a cascade
//! of biquad sections.

use num_complex::Complex64;

/// One second-order section, direct form II transposed.
#[derive(Debug, Clone, Copy)]
pub struct Biquad {
    pub b0: f64,
    pub b1: f64,
    pub b2: f64,
    pub a1: f64,
    pub a2: f64,
}

impl Biquad {
    fn apply(&self, x: &[f64], y: &mut Vec<f64>) {
        y.clear();
        y.reserve(x.len());
        let (mut s1, mut s2) = (0.0f64, 0.0f64);
        for &xv in x {
            let yv = self.b0 * xv + s1;
            s1 = self.b1 * xv - self.a1 * yv + s2;
            s2 = self.b2 * xv - self.a2 * yv;
            y.push(yv);
        }
    }
}

/// A cascade of biquads with a scalar input gain.
#[derive(Debug, Clone)]
pub struct SosFilter {
    pub gain: f64,
    pub sections: Vec<Biquad>,
}

impl SosFilter {
    pub fn filter(&self, x: &[f64]) -> Vec<f64> {
        let mut cur: Vec<f64> = x.iter().map(|&v| v * self.gain).collect();
        let mut next = Vec::new();
        for s in &self.sections {
            s.apply(&cur, &mut next);
            std::mem::swap(&mut cur, &mut next);
        }
        cur
    }

    /// Magnitude response at frequency `f` (Hz).
    pub fn magnitude_at(&self, f: f64, sample_rate: f64) -> f64 {
        let z = Complex64::from_polar(1.0, 2.0 * std::f64::consts::PI * f / sample_rate);
        let zi = z.inv();
        let mut h = Complex64::new(self.gain, 0.0);
        for s in &self.sections {
            let num = Complex64::new(s.b0, 0.0) + s.b1 * zi + s.b2 * zi * zi;
            let den = Complex64::new(1.0, 0.0) + s.a1 * zi + s.a2 * zi * zi;
            h *= num / den;
        }
        h.norm()
    }
}

/// Design an order-`n` Butterworth band-pass (2n poles) for the given
/// edge frequencies. Gain is normalized to one at the geometric center.
pub fn butter_bandpass(n: usize, f_lo: f64, f_hi: f64, sample_rate: f64) -> SosFilter {
    assert!(n >= 1 && f_lo > 0.0 && f_lo < f_hi && f_hi < sample_rate / 2.0);
    let fs2 = 2.0 * sample_rate;
    // prewarped analog edges
    let w1 = fs2 * (std::f64::consts::PI * f_lo / sample_rate).tan();
    let w2 = fs2 * (std::f64::consts::PI * f_hi / sample_rate).tan();
    let bw = w2 - w1;
    let w0sq = w1 * w2;

    // prototype low-pass poles on the unit circle, left half plane
    let mut analog_poles = Vec::with_capacity(2 * n);
    for k in 1..=n {
        let theta = std::f64::consts::PI * (2 * k + n - 1) as f64 / (2 * n) as f64;
        let p = Complex64::from_polar(1.0, theta);
        // low-pass -> band-pass: s^2 - (bw p) s + w0^2 = 0
        let bp = p * bw;
        let disc = (bp * bp - 4.0 * w0sq).sqrt();
        analog_poles.push((bp + disc) / 2.0);
        analog_poles.push((bp - disc) / 2.0);
    }

    // bilinear transform; n zeros land at z = 1 and n at z = -1
    let digital_poles: Vec<Complex64> = analog_poles
        .iter()
        .map(|&s| (Complex64::new(fs2, 0.0) + s) / (Complex64::new(fs2, 0.0) - s))
        .collect();

    // pair poles into conjugate sections; sort for a deterministic layout
    let mut upper: Vec<Complex64> = digital_poles.iter().filter(|p| p.im >= 0.0).copied().collect();
    upper.sort_by(|a, b| a.re.total_cmp(&b.re).then(a.im.total_cmp(&b.im)));
    assert_eq!(upper.len(), n);
    let sections: Vec<Biquad> = upper
        .iter()
        .map(|p| Biquad {
            // (1 - z^-1)(1 + z^-1) = 1 - z^-2
            b0: 1.0,
            b1: 0.0,
            b2: -1.0,
            a1: -2.0 * p.re,
            a2: p.norm_sqr(),
        })
        .collect();

    let mut filter = SosFilter {
        gain: 1.0,
        sections,
    };
    let f_center = (f_lo * f_hi).sqrt();
    let mag = filter.magnitude_at(f_center, sample_rate);
    filter.gain = 1.0 / mag;
    filter
}

/// The fixed voice-band noise shaping filter used by the augmentation
/// pipeline: order-4 Butterworth band-pass, 80-240 Hz at 16 kHz.
pub fn noise_bandpass() -> &'static SosFilter {
    use std::sync::OnceLock;
    static FILTER: OnceLock<SosFilter> = OnceLock::new();
    FILTER.get_or_init(|| butter_bandpass(4, 80.0, 240.0, 16_000.0))
}
