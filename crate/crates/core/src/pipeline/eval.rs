use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::flops::flops_estimate;
use super::metrics::{si_snr, token_accuracy};
use crate::codec::{CodecModel, TokenMatrix};
use crate::denoiser::{denoise_tokens, refine, DenoiserModel};
use crate::dsp::spectral::log_spectral_distance;
use crate::dsp::{AudioClip, Pair};
use crate::error::{Error, Result};

/// Enhanced waveform plus the predicted leading token groups (the acoustic prompt).
pub fn enhance(noisy: &AudioClip, codec: &CodecModel, denoiser: &DenoiserModel) -> Result<(AudioClip, TokenMatrix)> {
    let tokens = codec.tokenize(noisy)?;
    enhance_tokens(&tokens, noisy.len(), codec, denoiser)
}

/// Enhancement starting from noisy tokens; the output is truncated to `len` samples.
pub fn enhance_tokens(noisy: &TokenMatrix, len: usize, codec: &CodecModel, denoiser: &DenoiserModel) -> Result<(AudioClip, TokenMatrix)> {
    let codebooks = codec.codebooks();
    let (_, enhanced) = denoise_tokens(noisy, denoiser, codebooks)?;
    let embedding = refine(&enhanced, noisy, denoiser, codebooks)?;
    let audio = codec.decode(&embedding)?.truncated(len);
    Ok((audio, enhanced))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClipMetrics {
    pub index: usize,
    pub snr_db: f64,
    pub accuracy_g1: f64,
    pub accuracy_g2: Option<f64>,
    pub si_snr_noisy: f64,
    pub si_snr_enhanced: f64,
    pub si_snr_improvement: f64,
    pub lsd_noisy: f64,
    pub lsd_enhanced: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub clips: usize,
    pub accuracy_g1: f64,
    pub accuracy_g2: Option<f64>,
    pub si_snr_noisy: f64,
    pub si_snr_enhanced: f64,
    pub si_snr_improvement: f64,
    pub lsd_noisy: f64,
    pub lsd_enhanced: f64,
    pub flops: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub clips: Vec<ClipMetrics>,
    pub aggregate: Aggregate,
}

impl EvalReport {
    /// One JSON object per clip, then the aggregate tagged `"aggregate": true`.
    pub fn to_jsonl(&self) -> String {
        let mut s = String::new();
        for c in &self.clips {
            s.push_str(&serde_json::to_string(c).expect("plain data"));
            s.push('\n');
        }
        let mut agg = serde_json::to_value(&self.aggregate).expect("plain data");
        agg["aggregate"] = serde_json::Value::Bool(true);
        s.push_str(&agg.to_string());
        s.push('\n');
        s
    }

    pub fn to_table(&self) -> String {
        let a = &self.aggregate;
        let g2 = a.accuracy_g2.map_or("-".to_string(), |v| format!("{v:.4}"));
        let rows = [
            ("clips", a.clips.to_string()),
            ("token accuracy g1", format!("{:.4}", a.accuracy_g1)),
            ("token accuracy g2", g2),
            ("SI-SNR noisy (dB)", format!("{:.3}", a.si_snr_noisy)),
            ("SI-SNR enhanced (dB)", format!("{:.3}", a.si_snr_enhanced)),
            ("SI-SNR improvement (dB)", format!("{:.3}", a.si_snr_improvement)),
            ("LSD noisy (dB)", format!("{:.3}", a.lsd_noisy)),
            ("LSD enhanced (dB)", format!("{:.3}", a.lsd_enhanced)),
            ("FLOPs (1 s)", a.flops.to_string()),
        ];
        let width = rows.iter().map(|r| r.0.len()).max().unwrap_or(0);
        let mut s = String::new();
        for (k, v) in rows {
            let _ = writeln!(s, "{k:<width$}  {v:>14}");
        }
        s
    }
}

fn clip_metrics(index: usize, pair: &Pair, codec: &CodecModel, denoiser: &DenoiserModel) -> Result<ClipMetrics> {
    let noisy_tokens = codec.tokenize(&pair.noisy)?;
    let clean_tokens = codec.tokenize(&pair.clean)?;
    let (enhanced, predicted) = enhance_tokens(&noisy_tokens, pair.noisy.len(), codec, denoiser)?;
    let clean = pair.clean.samples();
    let si_noisy = si_snr(pair.noisy.samples(), clean)?;
    let si_enh = si_snr(enhanced.samples(), clean)?;
    Ok(ClipMetrics {
        index,
        snr_db: pair.snr_db,
        accuracy_g1: token_accuracy(&predicted, &clean_tokens, 0)?,
        accuracy_g2: if predicted.groups() > 1 {
            Some(token_accuracy(&predicted, &clean_tokens, 1)?)
        } else {
            None
        },
        si_snr_noisy: si_noisy,
        si_snr_enhanced: si_enh,
        si_snr_improvement: si_enh - si_noisy,
        lsd_noisy: log_spectral_distance(pair.noisy.samples(), clean),
        lsd_enhanced: log_spectral_distance(enhanced.samples(), clean),
    })
}

/// Per-clip and mean metrics; clips are split across `jobs` threads.
pub fn evaluate(pairs: &[Pair], codec: &CodecModel, denoiser: &DenoiserModel, jobs: usize) -> Result<EvalReport> {
    if pairs.is_empty() {
        return Err(Error::Degenerate("no evaluation clips".into()));
    }
    let jobs = jobs.clamp(1, pairs.len());
    let chunk = pairs.len().div_ceil(jobs);
    let results: Vec<Result<Vec<ClipMetrics>>> = std::thread::scope(|s| {
        let handles: Vec<_> = pairs
            .chunks(chunk)
            .enumerate()
            .map(|(ci, part)| {
                s.spawn(move || {
                    part.iter()
                        .enumerate()
                        .map(|(i, p)| clip_metrics(ci * chunk + i, p, codec, denoiser))
                        .collect()
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("evaluation thread panicked")).collect()
    });
    let mut clips = Vec::with_capacity(pairs.len());
    for r in results {
        clips.extend(r?);
    }
    let n = clips.len() as f64;
    let mean = |f: fn(&ClipMetrics) -> f64| clips.iter().map(f).sum::<f64>() / n;
    let g2: Option<f64> = clips
        .iter()
        .map(|c| c.accuracy_g2)
        .sum::<Option<f64>>()
        .map(|s| s / n);
    let flops = flops_estimate(codec.config(), denoiser.config(), 1.0)?.total;
    let aggregate = Aggregate {
        clips: clips.len(),
        accuracy_g1: mean(|c| c.accuracy_g1),
        accuracy_g2: g2,
        si_snr_noisy: mean(|c| c.si_snr_noisy),
        si_snr_enhanced: mean(|c| c.si_snr_enhanced),
        si_snr_improvement: mean(|c| c.si_snr_improvement),
        lsd_noisy: mean(|c| c.lsd_noisy),
        lsd_enhanced: mean(|c| c.lsd_enhanced),
        flops,
    };
    Ok(EvalReport { clips, aggregate })
}
