//! Deterministic speech-like and noise signals.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{rms, samples_for, AudioClip, SAMPLE_RATE};
use crate::error::{Error, Result};

pub const CLEAN_PEAK: f64 = 0.7;
pub const NOISE_RMS: f64 = 0.1;
pub const F0_RANGE: (f64, f64) = (90.0, 300.0);
const BABBLE_TALKERS: u64 = 6;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct CleanOptions {
    /// Holds the fundamental fixed (no contour, no pauses) when set.
    pub constant_f0: Option<f64>,
}

pub fn gen_clean(seed: u64, duration_s: f64) -> Result<AudioClip> {
    gen_clean_with(seed, duration_s, &CleanOptions::default())
}

/// Harmonic voiced segments separated by pauses, peak-normalized to 0.7.
pub fn gen_clean_with(seed: u64, duration_s: f64, opts: &CleanOptions) -> Result<AudioClip> {
    let n = samples_for(duration_s)?;
    let sr = SAMPLE_RATE as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let f0 = opts
        .constant_f0
        .unwrap_or_else(|| rng.random_range(F0_RANGE.0..=F0_RANGE.1));
    let (depth, rate, lfo_phase) = if opts.constant_f0.is_some() {
        (0.0, 0.0, 0.0)
    } else {
        (
            rng.random_range(0.03..0.12),
            rng.random_range(0.5..3.0),
            rng.random_range(0.0..2.0 * PI),
        )
    };
    let harmonics = rng.random_range(4..=8usize);
    let decay: f64 = rng.random_range(0.5..0.85);
    let phases: Vec<f64> = (0..harmonics).map(|_| rng.random_range(0.0..2.0 * PI)).collect();
    let envelope = if opts.constant_f0.is_some() {
        vec![1.0; n]
    } else {
        syllable_envelope(&mut rng, n)
    };

    let nyquist = sr / 2.0;
    let mut out = vec![0.0; n];
    let mut cycle = 0.0;
    for (i, o) in out.iter_mut().enumerate() {
        let t = i as f64 / sr;
        let f = f0 * (1.0 + depth * (2.0 * PI * rate * t + lfo_phase).sin());
        let mut v = 0.0;
        for (h, ph) in phases.iter().enumerate() {
            let k = (h + 1) as f64;
            if k * f >= nyquist {
                break;
            }
            v += decay.powi(h as i32) * (2.0 * PI * k * cycle + ph).sin();
        }
        *o = v * envelope[i];
        cycle += f / sr;
    }
    let peak = out.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if peak > 0.0 {
        out.iter_mut().for_each(|v| *v = *v / peak * CLEAN_PEAK);
    }
    AudioClip::new(out)
}

/// Alternating voiced/paused segments of 120–350 ms; voiced segments rise and
/// fall with a half-sine, and the first segment is always voiced.
fn syllable_envelope(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let sr = SAMPLE_RATE as f64;
    let mut env = vec![0.0; n];
    let mut start = 0;
    let mut first = true;
    while start < n {
        let len = ((rng.random_range(0.12..0.35) * sr) as usize).max(1);
        let voiced = first || rng.random_bool(0.75);
        first = false;
        let end = (start + len).min(n);
        if voiced {
            for (j, e) in env[start..end].iter_mut().enumerate() {
                *e = (PI * (j as f64 + 0.5) / len as f64).sin();
            }
        }
        start = end;
    }
    env
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseKind {
    White,
    Pink,
    Babble,
}

impl NoiseKind {
    pub const ALL: [NoiseKind; 3] = [NoiseKind::White, NoiseKind::Pink, NoiseKind::Babble];
}

impl fmt::Display for NoiseKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            NoiseKind::White => "white",
            NoiseKind::Pink => "pink",
            NoiseKind::Babble => "babble",
        })
    }
}

impl FromStr for NoiseKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "white" => Ok(NoiseKind::White),
            "pink" => Ok(NoiseKind::Pink),
            "babble" => Ok(NoiseKind::Babble),
            other => Err(Error::config("kind", format!("unknown noise kind {other:?}"))),
        }
    }
}

/// Stationary noise with RMS 0.1.
pub fn gen_noise(seed: u64, duration_s: f64, kind: NoiseKind) -> Result<AudioClip> {
    let n = samples_for(duration_s)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x: Vec<f64> = match kind {
        NoiseKind::White => (0..n).map(|_| rng.sample(StandardNormal)).collect(),
        NoiseKind::Pink => {
            // Paul Kellet's refined -3 dB/octave filter
            let mut b = [0.0f64; 7];
            let mut out = Vec::with_capacity(n);
            for _ in 0..n {
                let w: f64 = rng.sample(StandardNormal);
                b[0] = 0.99886 * b[0] + w * 0.0555179;
                b[1] = 0.99332 * b[1] + w * 0.0750759;
                b[2] = 0.96900 * b[2] + w * 0.1538520;
                b[3] = 0.86650 * b[3] + w * 0.3104856;
                b[4] = 0.55000 * b[4] + w * 0.5329522;
                b[5] = -0.7616 * b[5] - w * 0.0168980;
                out.push(b.iter().sum::<f64>() + w * 0.5362);
                b[6] = w * 0.115926;
            }
            let mean = out.iter().sum::<f64>() / n as f64;
            out.iter_mut().for_each(|v| *v -= mean);
            out
        }
        NoiseKind::Babble => {
            let base: u64 = rng.random();
            let mut acc = vec![0.0; n];
            for talker in 0..BABBLE_TALKERS {
                let voice = gen_clean(base.wrapping_add(talker), duration_s)?;
                acc.iter_mut().zip(voice.samples()).for_each(|(a, v)| *a += v);
            }
            acc
        }
    };
    let r = rms(&x);
    if r > 0.0 {
        x.iter_mut().for_each(|v| *v *= NOISE_RMS / r);
    }
    AudioClip::new(x)
}

#[cfg(test)]
mod tests {
    use rustfft::num_complex::Complex;

    use super::*;

    /// Naive DFT power spectrum, bins 0..=n/2.
    fn power_spectrum(x: &[f64]) -> Vec<f64> {
        let n = x.len();
        (0..=n / 2)
            .map(|k| {
                let mut acc = Complex::new(0.0, 0.0);
                for (i, v) in x.iter().enumerate() {
                    let a = -2.0 * PI * (k * i) as f64 / n as f64;
                    acc += Complex::new(a.cos(), a.sin()) * v;
                }
                acc.norm_sqr()
            })
            .collect()
    }

    #[test]
    fn clean_is_deterministic_and_peak_normalized() {
        for seed in [0, 1, 99, u64::MAX] {
            let a = gen_clean(seed, 1.0).unwrap();
            let b = gen_clean(seed, 1.0).unwrap();
            assert_eq!(a, b);
            assert!((a.peak() - CLEAN_PEAK).abs() < 1e-9);
            assert_eq!(a.len(), 16000);
        }
        assert_ne!(gen_clean(1, 1.0).unwrap(), gen_clean(2, 1.0).unwrap());
    }

    #[test]
    fn constant_pitch_peaks_at_fundamental() {
        let f0 = 200.0;
        let opts = CleanOptions { constant_f0: Some(f0) };
        let clip = gen_clean_with(5, 0.5, &opts).unwrap();
        // 8000 samples -> 2 Hz bins; 200 Hz sits on bin 100
        let spec = power_spectrum(clip.samples());
        let peak = spec
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .unwrap()
            .0;
        assert_eq!(peak, 100);
    }

    #[test]
    fn short_durations_are_rejected() {
        assert!(gen_clean(0, 0.2).is_err());
        assert!(gen_noise(0, 0.49, NoiseKind::White).is_err());
    }

    #[test]
    fn noise_is_deterministic_and_normalized() {
        for kind in NoiseKind::ALL {
            let a = gen_noise(3, 1.0, kind).unwrap();
            assert_eq!(a, gen_noise(3, 1.0, kind).unwrap());
            assert!((a.rms() - NOISE_RMS).abs() < 1e-12, "{kind}");
        }
    }

    #[test]
    fn white_noise_mean_is_small() {
        for seed in 0..10 {
            let w = gen_noise(seed, 1.0, NoiseKind::White).unwrap();
            let mean = w.samples().iter().sum::<f64>() / w.len() as f64;
            assert!(mean.abs() < 0.005, "seed {seed}: mean {mean}");
        }
    }

    #[test]
    fn pink_noise_tilts_toward_low_frequencies() {
        let p = gen_noise(11, 0.5, NoiseKind::Pink).unwrap();
        let spec = power_spectrum(p.samples());
        let hz_per_bin = 16000.0 / p.len() as f64;
        let band = |lo: f64, hi: f64| {
            let (a, b) = ((lo / hz_per_bin) as usize, (hi / hz_per_bin) as usize);
            spec[a.max(1)..b].iter().sum::<f64>() / (b - a.max(1)) as f64
        };
        assert!(band(0.0, 1000.0) > band(7000.0, 8000.0));
    }

    #[test]
    fn unknown_kind_is_a_config_error() {
        assert!(matches!("brown".parse::<NoiseKind>(), Err(Error::Config { .. })));
        assert_eq!("babble".parse::<NoiseKind>().unwrap(), NoiseKind::Babble);
    }
}
