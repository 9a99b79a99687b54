//! Predicted-group-count ablation: one denoiser per group count, trained with
//! the same seed and budget, evaluated on the same held-out clips.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::eval::evaluate;
use super::flops::flops_estimate;
use super::train::{train_denoiser, validation_losses, TokenPair, TrainConfig};
use crate::codec::CodecModel;
use crate::denoiser::DenoiserConfig;
use crate::dsp::Pair;
use crate::error::{Error, Result};

/// Inputs shared by every variant.
#[derive(Clone, Copy, Debug)]
pub struct AblationData<'a> {
    pub train: &'a [TokenPair],
    /// Held-out tokens for the per-token CE.
    pub validation: &'a [TokenPair],
    /// Held-out audio for accuracy and SI-SNR.
    pub evaluation: &'a [Pair],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub groups: usize,
    pub flops: u64,
    pub ce_per_token: f64,
    pub accuracy_g1: f64,
    pub si_snr_improvement: f64,
    pub final_train_loss: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    pub fn to_jsonl(&self) -> String {
        self.rows
            .iter()
            .map(|r| serde_json::to_string(r).expect("plain data") + "\n")
            .collect()
    }

    pub fn to_table(&self) -> String {
        let mut s = format!(
            "{:>6}  {:>14}  {:>12}  {:>8}  {:>10}  {:>10}\n",
            "groups", "flops", "ce/token", "acc_g1", "si-snr imp", "train L"
        );
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{:>6}  {:>14}  {:>12.4}  {:>8.4}  {:>10.3}  {:>10.4}",
                r.groups, r.flops, r.ce_per_token, r.accuracy_g1, r.si_snr_improvement, r.final_train_loss
            );
        }
        s
    }
}

fn run_variant(data: &AblationData<'_>, codec: &CodecModel, config: &DenoiserConfig, train: &TrainConfig) -> Result<AblationRow> {
    let (model, report) = train_denoiser(data.train, codec, config, train)?;
    let val = validation_losses(&model, codec, data.validation)?;
    let eval = evaluate(data.evaluation, codec, &model, 1)?;
    Ok(AblationRow {
        groups: config.groups,
        flops: flops_estimate(codec.config(), config, 1.0)?.total,
        ce_per_token: val.ce_per_token,
        accuracy_g1: eval.aggregate.accuracy_g1,
        si_snr_improvement: eval.aggregate.si_snr_improvement,
        final_train_loss: report.epoch_means.last().copied().unwrap_or(f64::NAN),
    })
}

/// Trains and scores one variant per entry of `groups`; up to `jobs`
/// variants run concurrently. Rows follow the order of `groups`.
pub fn ablate_groups(
    data: &AblationData<'_>,
    codec: &CodecModel,
    groups: &[usize],
    base: &DenoiserConfig,
    train: &TrainConfig,
    jobs: usize,
) -> Result<AblationReport> {
    if groups.is_empty() {
        return Err(Error::config("eval.ablation_groups", "no group counts given"));
    }
    let k = codec.config().quantizers;
    let configs: Vec<DenoiserConfig> = groups
        .iter()
        .map(|&g| {
            if g == 0 || g > k {
                return Err(Error::config("eval.ablation_groups", format!("group count {g} outside 1..={k}")));
            }
            Ok(DenoiserConfig { groups: g, ..base.clone() })
        })
        .collect::<Result<_>>()?;
    for c in &configs {
        c.validate(k)?;
    }
    train.validate()?;

    let jobs = jobs.clamp(1, configs.len());
    let mut rows = Vec::with_capacity(configs.len());
    for wave in configs.chunks(jobs) {
        let results: Vec<Result<AblationRow>> = std::thread::scope(|s| {
            let handles: Vec<_> = wave
                .iter()
                .map(|cfg| s.spawn(move || run_variant(data, codec, cfg, train)))
                .collect();
            handles.into_iter().map(|h| h.join().expect("ablation thread panicked")).collect()
        });
        for r in results {
            rows.push(r?);
        }
    }
    Ok(AblationReport { rows })
}
