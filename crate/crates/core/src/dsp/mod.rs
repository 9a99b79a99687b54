//! Audio clips, PCM16 WAV I/O, synthetic speech and noise, SNR mixing and
//! corpus construction.

pub mod corpus;
pub mod mix;
pub mod spectral;
pub mod synth;
pub mod wav;

use crate::error::{Error, Result};

pub use corpus::{build_corpus, load_pairs, synthesize_entry, BuildStats, CorpusConfig, CorpusManifest, ManifestEntry, Pair, Split};
pub use mix::{fit_length, measured_snr_db, mix_at_snr, Mixture};
pub use synth::{gen_clean, gen_clean_with, gen_noise, CleanOptions, NoiseKind};
pub use wav::{decode_wav, encode_wav, read_wav, write_wav};

pub const SAMPLE_RATE: u32 = 16_000;

/// Mono 16 kHz waveform.
#[derive(Clone, Debug, PartialEq)]
pub struct AudioClip {
    samples: Vec<f64>,
}

impl AudioClip {
    pub fn new(samples: Vec<f64>) -> Result<Self> {
        if let Some(i) = samples.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("sample {i} is not finite")));
        }
        Ok(Self { samples })
    }

    pub fn zeros(len: usize) -> Self {
        Self {
            samples: vec![0.0; len],
        }
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<f64> {
        self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        SAMPLE_RATE
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / SAMPLE_RATE as f64
    }

    pub fn rms(&self) -> f64 {
        rms(&self.samples)
    }

    pub fn peak(&self) -> f64 {
        self.samples.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Sub-range `[start, start + len)`, zero-filled past the end.
    pub fn crop(&self, start: usize, len: usize) -> AudioClip {
        let mut out = vec![0.0; len];
        for (i, o) in out.iter_mut().enumerate() {
            if let Some(v) = self.samples.get(start + i) {
                *o = *v;
            }
        }
        AudioClip { samples: out }
    }

    pub fn truncated(mut self, len: usize) -> AudioClip {
        self.samples.truncate(len);
        self
    }
}

pub fn rms(x: &[f64]) -> f64 {
    if x.is_empty() {
        return 0.0;
    }
    (x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64).sqrt()
}

pub(crate) fn samples_for(duration_s: f64) -> Result<usize> {
    if !(duration_s >= 0.5) || !duration_s.is_finite() {
        return Err(Error::config(
            "duration_s",
            format!("{duration_s} s is shorter than the 0.5 s minimum"),
        ));
    }
    Ok((duration_s * SAMPLE_RATE as f64).round() as usize)
}
