//! Excitation waveforms and single-bin Fourier extraction.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use std::f64::consts::{LN_2, PI};

/// Delay in units of σ_t used when none is given.
pub const DEFAULT_DELAY_SIGMAS: f64 = 5.5;

/// Smallest delay, in units of σ_t, that keeps the value at t = 0 below
/// 1e-6 of the peak.
pub fn min_delay_sigmas() -> f64 {
    (2.0 * 1e6f64.ln()).sqrt()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Waveform {
    /// Gaussian pulse with the given half-width at half-maximum bandwidth.
    Gaussian { hwhm: f64 },
    /// Gaussian envelope times a cosine carrier at `f0`.
    ModulatedGaussian { f0: f64, hwhm: f64 },
}

impl Waveform {
    pub fn hwhm(&self) -> f64 {
        match *self {
            Waveform::Gaussian { hwhm } | Waveform::ModulatedGaussian { hwhm, .. } => hwhm,
        }
    }

    /// Time-domain standard deviation of the envelope.
    pub fn sigma_t(&self) -> f64 {
        (2.0 * LN_2).sqrt() / (2.0 * PI * self.hwhm())
    }

    /// Magnitude of the continuous spectrum relative to the envelope DC value.
    pub fn spectrum(&self, f: f64) -> f64 {
        let s = self.sigma_t();
        let g = |x: f64| (-0.5 * (2.0 * PI * x * s).powi(2)).exp();
        match *self {
            Waveform::Gaussian { .. } => g(f),
            Waveform::ModulatedGaussian { f0, .. } => 0.5 * (g(f - f0) + g(f + f0)),
        }
    }
}

/// A waveform with amplitude and delay.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pulse {
    pub waveform: Waveform,
    pub amplitude: f64,
    pub delay: f64,
}

impl Pulse {
    /// Pulse with the default delay of 5.5 σ_t.
    pub fn new(waveform: Waveform, amplitude: f64) -> Self {
        Pulse {
            waveform,
            amplitude,
            delay: DEFAULT_DELAY_SIGMAS * waveform.sigma_t(),
        }
    }

    pub fn value(&self, t: f64) -> f64 {
        waveform(self, t)
    }
}

/// Pulse amplitude at time `t`.
pub fn waveform(p: &Pulse, t: f64) -> f64 {
    let s = p.waveform.sigma_t();
    let tau = t - p.delay;
    let env = p.amplitude * (-tau * tau / (2.0 * s * s)).exp();
    match p.waveform {
        Waveform::Gaussian { .. } => env,
        Waveform::ModulatedGaussian { f0, .. } => env * (2.0 * PI * f0 * tau).cos(),
    }
}

/// Single-bin discrete-time Fourier sum `Σ x_n exp(-j 2π f n Δt)`.
pub fn dft_extract(series: &[f64], dt: f64, f: f64) -> Complex64 {
    let w = -2.0 * PI * f * dt;
    series
        .iter()
        .enumerate()
        .map(|(n, &x)| Complex64::from_polar(x, w * n as f64))
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn peak_at_delay() {
        let p = Pulse::new(Waveform::Gaussian { hwhm: 3.53e9 }, 2.0);
        assert_eq!(p.value(p.delay), 2.0);
        assert!(p.value(0.0) < 1e-6 * 2.0);
        assert!(p.value(p.delay + 1e-12) < 2.0);
    }

    #[test]
    fn gaussian_spectrum_half_at_hwhm() {
        // Oracle: numerical transform of the sampled pulse.
        let w = Waveform::Gaussian { hwhm: 3.53e9 };
        let p = Pulse::new(w, 1.0);
        let dt = 1e-13;
        let x: Vec<f64> = (0..8000).map(|n| p.value(n as f64 * dt)).collect();
        let dc = dft_extract(&x, dt, 0.0).norm();
        let at = dft_extract(&x, dt, 3.53e9).norm();
        assert!((at / dc - 0.5).abs() < 1e-6);
        assert!((w.spectrum(3.53e9) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn modulated_spectrum_peak_near_carrier() {
        let w = Waveform::ModulatedGaussian {
            f0: 10e9,
            hwhm: 8.24e9,
        };
        let p = Pulse::new(w, 1.0);
        let dt = 2e-13;
        let x: Vec<f64> = (0..5000).map(|n| p.value(n as f64 * dt)).collect();
        let (mut best, mut fbest) = (0.0, 0.0);
        for k in 0..=2000 {
            let f = 5e9 + k as f64 * 5e6;
            let m = dft_extract(&x, dt, f).norm();
            if m > best {
                best = m;
                fbest = f;
            }
        }
        // The negative-frequency image pulls the peak slightly below f0.
        assert!((fbest - 10e9).abs() < 0.5e9, "{fbest}");
        let (mut abest, mut afbest) = (0.0, 0.0);
        for k in 0..=2000 {
            let f = 5e9 + k as f64 * 5e6;
            if w.spectrum(f) > abest {
                abest = w.spectrum(f);
                afbest = f;
            }
        }
        assert!((fbest - afbest).abs() <= 5e6);
    }

    #[test]
    fn dft_of_constant_and_sinusoid() {
        let x = vec![0.75; 400];
        let c = dft_extract(&x, 1e-12, 0.0);
        assert!((c.re - 0.75 * 400.0).abs() < 1e-9 && c.im.abs() < 1e-12);
        let f = 1e9;
        let dt = 1e-11;
        let n = 2500; // 25 periods
        let s: Vec<f64> = (0..n)
            .map(|k| 1.7 * (2.0 * PI * f * k as f64 * dt + 0.3).sin())
            .collect();
        let amp = 2.0 * dft_extract(&s, dt, f).norm() / n as f64;
        assert!((amp - 1.7).abs() < 0.01 * 1.7);
    }

    #[test]
    fn min_delay_bound() {
        let k = min_delay_sigmas();
        assert!(((-0.5 * k * k).exp() - 1e-6).abs() < 1e-15);
        assert!(DEFAULT_DELAY_SIGMAS > k);
    }
}
