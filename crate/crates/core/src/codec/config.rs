use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Architecture of the convolutional codec and its residual quantizer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CodecConfig {
    /// Encoder downsampling strides; the decoder mirrors them in reverse.
    pub strides: Vec<usize>,
    /// Channel widths: input stem, then the output of each strided stage.
    pub channels: Vec<usize>,
    /// Number of quantizer stages `K`.
    pub quantizers: usize,
    /// Code vectors per stage `C`.
    pub codebook_size: usize,
    /// Latent and code-vector width `D`.
    pub dim: usize,
}

impl Default for CodecConfig {
    fn default() -> Self {
        Self {
            strides: vec![2, 2, 4, 4],
            channels: vec![32, 32, 64, 64, 64],
            quantizers: 8,
            codebook_size: 64,
            dim: 32,
        }
    }
}

/// Largest supported samples-per-frame.
pub const MAX_HOP: usize = 1 << 16;

impl CodecConfig {
    /// Full-size reference geometry (M=640, K=32, C=1024, D=128); used for
    /// FLOPs comparisons only.
    pub fn reference() -> Self {
        Self {
            strides: vec![2, 4, 8, 10],
            channels: vec![32, 64, 128, 256, 512],
            quantizers: 32,
            codebook_size: 1024,
            dim: 128,
        }
    }

    /// A few hundred parameters; for gradient checks and fast tests.
    pub fn tiny(quantizers: usize, codebook_size: usize, dim: usize) -> Self {
        Self {
            strides: vec![2, 2],
            channels: vec![2, 2, 2],
            quantizers,
            codebook_size,
            dim,
        }
    }

    /// Samples per latent frame `M`.
    pub fn hop(&self) -> usize {
        self.strides.iter().product()
    }

    /// Latent frames for a clip of `len` samples: `ceil(len / M)`.
    pub fn frames_for(&self, len: usize) -> usize {
        len.div_ceil(self.hop())
    }

    pub fn validate(&self) -> Result<()> {
        if self.strides.is_empty() || self.strides.iter().any(|&s| s == 0 || s % 2 != 0) {
            return Err(Error::config(
                "codec.strides",
                format!("{:?}: need at least one stride, each even", self.strides),
            ));
        }
        if self.strides.iter().try_fold(1usize, |acc, &s| acc.checked_mul(s)).is_none_or(|hop| hop > MAX_HOP) {
            return Err(Error::config(
                "codec.strides",
                format!("{:?}: hop exceeds {MAX_HOP} samples", self.strides),
            ));
        }
        if self.channels.len() != self.strides.len() + 1 || self.channels.contains(&0) {
            return Err(Error::config(
                "codec.channels",
                format!(
                    "{} positive widths required for {} strides",
                    self.strides.len() + 1,
                    self.strides.len()
                ),
            ));
        }
        if self.quantizers == 0 {
            return Err(Error::config("codec.quantizers", "need at least one stage"));
        }
        if self.codebook_size < 2 || self.codebook_size > u16::MAX as usize + 1 {
            return Err(Error::config(
                "codec.codebook_size",
                format!("{} outside [2, 65536]", self.codebook_size),
            ));
        }
        if self.dim == 0 {
            return Err(Error::config("codec.dim", "must be positive"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn desk_default_geometry() {
        let c = CodecConfig::default();
        c.validate().unwrap();
        assert_eq!(c.hop(), 64);
        assert_eq!(c.frames_for(16000), 250);
        assert_eq!(c.frames_for(128), 2);
        assert_eq!(c.frames_for(129), 3);
    }

    #[test]
    fn reference_geometry() {
        let c = CodecConfig::reference();
        c.validate().unwrap();
        assert_eq!((c.hop(), c.quantizers, c.codebook_size, c.dim), (640, 32, 1024, 128));
    }

    #[test]
    fn bad_configs_name_the_field() {
        let mut c = CodecConfig::default();
        c.channels.pop();
        assert!(matches!(c.validate(), Err(Error::Config { field, .. }) if field == "codec.channels"));
        let c = CodecConfig {
            strides: vec![3],
            channels: vec![4, 4],
            ..CodecConfig::default()
        };
        assert!(matches!(c.validate(), Err(Error::Config { field, .. }) if field == "codec.strides"));
        let c = CodecConfig {
            codebook_size: 70000,
            ..CodecConfig::default()
        };
        assert!(c.validate().is_err());
    }
}
