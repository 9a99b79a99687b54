//! Run configuration: one JSON document covering every pipeline stage.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::codec::{CodecConfig, CodecTrainConfig};
use crate::denoiser::DenoiserConfig;
use crate::dsp::{CorpusConfig, Split};
use crate::error::{Error, Result};
use crate::pipeline::TrainConfig;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CodecSection {
    pub model: CodecConfig,
    pub train: CodecTrainConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub split: Split,
    /// Evaluate at most this many clips (all when 0).
    pub max_clips: usize,
    pub jobs: usize,
    pub ablation_groups: Vec<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            split: Split::Test,
            max_clips: 0,
            jobs: 1,
            ablation_groups: vec![1, 2, 4, 8],
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub corpus: CorpusConfig,
    pub codec: CodecSection,
    pub denoiser: DenoiserConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    /// Parses and validates; missing keys take their defaults, unknown keys are rejected.
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::config("config", e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plain data")
    }

    /// Routes one seed into every random stage.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.corpus.seed = seed;
        self.codec.train.seed = seed;
        self.train.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.corpus.validate()?;
        self.codec.model.validate()?;
        self.codec.train.validate()?;
        self.denoiser.validate(self.codec.model.quantizers)?;
        self.train.validate()?;
        if self.eval.jobs == 0 {
            return Err(Error::config("eval.jobs", "must be positive"));
        }
        let k = self.codec.model.quantizers;
        if let Some(g) = self.eval.ablation_groups.iter().find(|&&g| g == 0 || g > k) {
            return Err(Error::config("eval.ablation_groups", format!("group count {g} outside 1..={k}")));
        }
        Ok(())
    }
}
