use super::{rms, AudioClip};
use crate::error::{Error, Result};

const SILENCE_RMS: f64 = 1e-8;

/// A noisy mixture together with the exact components it was built from.
#[derive(Clone, Debug, PartialEq)]
pub struct Mixture {
    pub noisy: AudioClip,
    /// Clean reference, rescaled together with the mixture on clipping.
    pub clean: AudioClip,
    /// Scaled noise component: `noisy == clean + noise` sample for sample.
    pub noise: AudioClip,
    pub snr_db: f64,
}

/// Loops or truncates `noise` to exactly `len` samples.
pub fn fit_length(noise: &AudioClip, len: usize) -> Result<AudioClip> {
    if noise.is_empty() {
        return Err(Error::Degenerate("empty noise clip".into()));
    }
    let s = noise.samples();
    AudioClip::new((0..len).map(|i| s[i % s.len()]).collect())
}

/// `10·log10(P_clean / P_noise)`.
pub fn measured_snr_db(clean: &[f64], noise: &[f64]) -> f64 {
    let pc: f64 = clean.iter().map(|v| v * v).sum();
    let pn: f64 = noise.iter().map(|v| v * v).sum();
    10.0 * (pc / pn).log10()
}

/// Adds `noise` to `clean` scaled so the mixture has exactly `snr_db`.
/// If the mixture would clip, mixture and components are divided by its peak.
pub fn mix_at_snr(clean: &AudioClip, noise: &AudioClip, snr_db: f64) -> Result<Mixture> {
    if !snr_db.is_finite() {
        return Err(Error::Numeric(format!("snr {snr_db} dB")));
    }
    let noise = fit_length(noise, clean.len())?;
    let (rc, rn) = (clean.rms(), noise.rms());
    if rc < SILENCE_RMS {
        return Err(Error::Degenerate(format!("clean rms {rc:e} is silent")));
    }
    if rn < SILENCE_RMS {
        return Err(Error::Degenerate(format!("noise rms {rn:e} is silent")));
    }
    let gain = rc / (rn * 10f64.powf(snr_db / 20.0));
    let mut c = clean.samples().to_vec();
    let mut n: Vec<f64> = noise.samples().iter().map(|v| v * gain).collect();
    let mut y: Vec<f64> = c.iter().zip(&n).map(|(a, b)| a + b).collect();
    let peak = y.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if peak > 1.0 {
        for v in y.iter_mut().chain(c.iter_mut()).chain(n.iter_mut()) {
            *v /= peak;
        }
    }
    debug_assert!(rms(&y).is_finite());
    Ok(Mixture {
        noisy: AudioClip::new(y)?,
        clean: AudioClip::new(c)?,
        noise: AudioClip::new(n)?,
        snr_db,
    })
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;
    use crate::dsp::{gen_clean, gen_noise, NoiseKind};

    #[test]
    fn zero_db_matches_rms() {
        let c = gen_clean(1, 1.0).unwrap();
        let n = gen_noise(2, 1.0, NoiseKind::White).unwrap();
        let m = mix_at_snr(&c, &n, 0.0).unwrap();
        assert!((m.noise.rms() - m.clean.rms()).abs() < 1e-9);
    }

    #[test]
    fn huge_snr_returns_clean() {
        let c = gen_clean(1, 1.0).unwrap();
        let n = gen_noise(2, 1.0, NoiseKind::Pink).unwrap();
        let m = mix_at_snr(&c, &n, 200.0).unwrap();
        for (a, b) in m.noisy.samples().iter().zip(c.samples()) {
            assert!((a - b).abs() < 1e-8);
        }
    }

    #[test]
    fn clipping_rescales_the_pair() {
        let c = gen_clean(3, 1.0).unwrap();
        let n = gen_noise(4, 1.0, NoiseKind::White).unwrap();
        let m = mix_at_snr(&c, &n, -10.0).unwrap();
        assert!(m.noisy.peak() <= 1.0);
        assert!(m.clean.peak() < c.peak());
        assert!((measured_snr_db(m.clean.samples(), m.noise.samples()) + 10.0).abs() < 1e-6);
    }

    #[test]
    fn short_noise_is_looped() {
        let c = gen_clean(3, 1.0).unwrap();
        let n = gen_noise(4, 0.5, NoiseKind::White).unwrap();
        let m = mix_at_snr(&c, &n, 5.0).unwrap();
        assert_eq!(m.noise.len(), c.len());
        let s = m.noise.samples();
        assert_eq!(s[10], s[8010]);
    }

    #[test]
    fn silent_inputs_are_degenerate() {
        let c = gen_clean(3, 1.0).unwrap();
        let z = AudioClip::zeros(16000);
        assert!(matches!(mix_at_snr(&z, &c, 0.0), Err(Error::Degenerate(_))));
        assert!(matches!(mix_at_snr(&c, &z, 0.0), Err(Error::Degenerate(_))));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn recomputed_snr_is_exact(seed in 0u64..1000, snr in -5.0f64..15.0, kind in 0usize..3) {
            let c = gen_clean(seed, 0.5).unwrap();
            let n = gen_noise(seed + 1, 0.5, NoiseKind::ALL[kind]).unwrap();
            let m = mix_at_snr(&c, &n, snr).unwrap();
            prop_assert!((measured_snr_db(m.clean.samples(), m.noise.samples()) - snr).abs() < 1e-6);
            prop_assert!(m.noisy.peak() <= 1.0);
        }
    }
}
