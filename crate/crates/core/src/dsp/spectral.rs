//! Short-time Fourier analysis shared by the spectral loss and metrics.

use std::f64::consts::PI;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

pub fn hann(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos())
        .collect()
}

/// Frames start at 0 and advance by `hop`; trailing samples that do not fill
/// a frame are dropped.
pub struct Stft {
    pub n_fft: usize,
    pub hop: usize,
    pub window: Vec<f64>,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

impl Stft {
    pub fn new(n_fft: usize, hop: usize) -> Self {
        let mut planner = FftPlanner::new();
        Self {
            n_fft,
            hop,
            window: hann(n_fft),
            forward: planner.plan_fft_forward(n_fft),
            inverse: planner.plan_fft_inverse(n_fft),
        }
    }

    pub fn bins(&self) -> usize {
        self.n_fft / 2 + 1
    }

    pub fn frames(&self, len: usize) -> usize {
        if len < self.n_fft {
            0
        } else {
            (len - self.n_fft) / self.hop + 1
        }
    }

    /// Complex spectra, `frames × bins`, row-major.
    pub fn spectrum(&self, x: &[f64]) -> Vec<Complex<f64>> {
        let frames = self.frames(x.len());
        let bins = self.bins();
        let mut out = Vec::with_capacity(frames * bins);
        let mut buf = vec![Complex::new(0.0, 0.0); self.n_fft];
        for f in 0..frames {
            let seg = &x[f * self.hop..f * self.hop + self.n_fft];
            for ((b, s), w) in buf.iter_mut().zip(seg).zip(&self.window) {
                *b = Complex::new(s * w, 0.0);
            }
            self.forward.process(&mut buf);
            out.extend_from_slice(&buf[..bins]);
        }
        out
    }

    pub fn magnitudes(&self, x: &[f64]) -> Vec<f64> {
        self.spectrum(x).iter().map(|c| c.norm()).collect()
    }

    /// Adjoint of [`Stft::spectrum`] restricted to the real part: given
    /// dL/dRe and dL/dIm per bin (packed as a complex number), adds dL/dx.
    pub fn adjoint_add(&self, grad_spec: &[Complex<f64>], out: &mut [f64]) {
        let bins = self.bins();
        let frames = grad_spec.len() / bins;
        let mut buf = vec![Complex::new(0.0, 0.0); self.n_fft];
        for f in 0..frames {
            buf.iter_mut().for_each(|b| *b = Complex::new(0.0, 0.0));
            buf[..bins].copy_from_slice(&grad_spec[f * bins..(f + 1) * bins]);
            // Σ_k G_k e^{+iθ}: the unnormalized inverse transform
            self.inverse.process(&mut buf);
            let dst = &mut out[f * self.hop..f * self.hop + self.n_fft];
            for ((d, b), w) in dst.iter_mut().zip(&buf).zip(&self.window) {
                *d += w * b.re;
            }
        }
    }
}

/// Mean over frames of the RMS difference between log power spectra, in dB.
pub fn log_spectral_distance(estimate: &[f64], reference: &[f64]) -> f64 {
    let stft = Stft::new(512, 128);
    let a = stft.spectrum(estimate);
    let b = stft.spectrum(reference);
    let bins = stft.bins();
    let frames = a.len().min(b.len()) / bins;
    if frames == 0 {
        return 0.0;
    }
    let eps = 1e-10;
    let mut total = 0.0;
    for f in 0..frames {
        let mut acc = 0.0;
        for k in 0..bins {
            let pa = 10.0 * (a[f * bins + k].norm_sqr() + eps).log10();
            let pb = 10.0 * (b[f * bins + k].norm_sqr() + eps).log10();
            acc += (pa - pb) * (pa - pb);
        }
        total += (acc / bins as f64).sqrt();
    }
    total / frames as f64
}
