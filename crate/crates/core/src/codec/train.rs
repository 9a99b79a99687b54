use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::CodecConfig;
use super::model::CodecModel;
use super::rvq::{rvq_quantize, StageStats};
use super::stft_loss::{stft_loss, MultiResolutionStft};
use crate::dsp::AudioClip;
use crate::error::{Error, Result};
use crate::nn::{adam_step, clip_grad_norm, warmup_lr, OptimizerState, Tape, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CodecTrainConfig {
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Training crop length in samples; rounded down to a multiple of the hop.
    pub crop_len: usize,
    /// Clips drawn per epoch (all clips when 0).
    pub clips_per_epoch: usize,
    pub peak_lr: f64,
    pub warmup_steps: u64,
    pub l1_weight: f64,
    pub stft_weight: f64,
    pub commitment: f64,
    pub ema_decay: f64,
    /// Probability of training a step on a random prefix of the quantizer stages.
    pub quantizer_dropout: f64,
    pub grad_clip: f64,
}

impl Default for CodecTrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            epochs: 6,
            batch_size: 4,
            crop_len: 2048,
            clips_per_epoch: 0,
            peak_lr: 3e-3,
            warmup_steps: 50,
            l1_weight: 1.0,
            stft_weight: 0.1,
            commitment: 0.25,
            ema_decay: 0.99,
            quantizer_dropout: 0.5,
            grad_clip: 1.0,
        }
    }
}

impl CodecTrainConfig {
    pub fn validate(&self) -> Result<()> {
        let checks: [(&str, bool, &str); 8] = [
            ("codec_train.epochs", self.epochs > 0, "must be positive"),
            ("codec_train.batch_size", self.batch_size > 0, "must be positive"),
            ("codec_train.crop_len", self.crop_len > 0, "must be positive"),
            ("codec_train.peak_lr", self.peak_lr > 0.0 && self.peak_lr.is_finite(), "must be positive"),
            (
                "codec_train.commitment",
                self.commitment >= 0.0 && self.commitment.is_finite(),
                "must be non-negative",
            ),
            (
                "codec_train.ema_decay",
                (0.0..1.0).contains(&self.ema_decay),
                "must lie in [0, 1)",
            ),
            (
                "codec_train.quantizer_dropout",
                (0.0..=1.0).contains(&self.quantizer_dropout),
                "must lie in [0, 1]",
            ),
            ("codec_train.grad_clip", self.grad_clip > 0.0, "must be positive"),
        ];
        for (field, ok, detail) in checks {
            if !ok {
                return Err(Error::config(field, detail));
            }
        }
        if self.l1_weight < 0.0 || self.stft_weight < 0.0 {
            return Err(Error::config("codec_train.l1_weight", "loss weights must be non-negative"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CodecLossRow {
    pub step: usize,
    pub lr: f64,
    pub reconstruction: f64,
    pub commitment: f64,
    pub total: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct CodecTrainReport {
    pub rows: Vec<CodecLossRow>,
    /// Mean per-clip total loss of each epoch.
    pub epoch_means: Vec<f64>,
}

impl CodecTrainReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,lr,reconstruction,commitment,total\n");
        for r in &self.rows {
            s.push_str(&format!(
                "{},{:e},{},{},{}\n",
                r.step, r.lr, r.reconstruction, r.commitment, r.total
            ));
        }
        s
    }
}

/// Random hop-aligned crop, zero-padded when the clip is short.
fn crop(clip: &AudioClip, len: usize, rng: &mut impl Rng) -> Vec<f64> {
    if clip.len() <= len {
        let mut v = clip.samples().to_vec();
        v.resize(len, 0.0);
        return v;
    }
    let start = rng.random_range(0..=clip.len() - len);
    clip.samples()[start..start + len].to_vec()
}

/// Seeds every stage from residuals of the first crops, one stage at a time.
fn init_codebooks(model: &mut CodecModel, crops: &[Vec<f64>], rng: &mut impl Rng) -> Result<()> {
    let d = model.config().dim;
    let mut latents = Vec::new();
    for c in crops {
        let clip = AudioClip::new(c.clone())?;
        latents.extend_from_slice(model.encode(&clip)?.data());
    }
    let frames = latents.len() / d;
    let z = Tensor::new(vec![frames, d], latents)?;
    for j in 0..model.config().quantizers {
        let residual = if j == 0 {
            z.data().to_vec()
        } else {
            rvq_quantize(&z, model.codebooks(), j)?.residual.into_data()
        };
        let mut rows: Vec<&[f64]> = residual.chunks_exact(d).collect();
        rows.shuffle(rng);
        model.codebooks_mut().seed_stage(j, &rows);
    }
    Ok(())
}

/// Trains encoder and decoder by gradient descent and the codebooks by EMA
/// k-means, passing gradients straight through the quantizer.
pub fn train_codec(clips: &[AudioClip], config: &CodecConfig, train: &CodecTrainConfig) -> Result<(CodecModel, CodecTrainReport)> {
    config.validate()?;
    train.validate()?;
    if clips.is_empty() {
        return Err(Error::Degenerate("no training clips".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(train.seed);
    let mut model = CodecModel::new(config.clone(), &mut rng)?;
    let hop = config.hop();
    let crop_len = (train.crop_len / hop).max(1) * hop;
    let k_max = config.quantizers;
    let mr = MultiResolutionStft::desk_default();

    let seed_crops: Vec<Vec<f64>> = (0..train.batch_size.min(clips.len()))
        .map(|i| crop(&clips[i], crop_len, &mut rng))
        .collect();
    init_codebooks(&mut model, &seed_crops, &mut rng)?;

    let mut opt = OptimizerState::new(&model.params);
    let mut report = CodecTrainReport::default();
    let per_epoch = if train.clips_per_epoch == 0 {
        clips.len()
    } else {
        train.clips_per_epoch
    };
    let mut step = 0usize;
    let mut order: Vec<usize> = (0..clips.len()).collect();
    let mut cursor = clips.len();
    for _epoch in 0..train.epochs {
        let mut epoch_sum = 0.0;
        let mut epoch_count = 0usize;
        let mut drawn = 0;
        while drawn < per_epoch {
            let batch = train.batch_size.min(per_epoch - drawn);
            drawn += batch;
            step += 1;
            let lr = warmup_lr(step as u64, train.peak_lr, train.warmup_steps);
            model.params.zero_grads();
            let mut stats: Vec<StageStats> = (0..k_max)
                .map(|_| StageStats::new(config.codebook_size, config.dim))
                .collect();
            let mut pools: Vec<Vec<Vec<f64>>> = vec![Vec::new(); k_max];
            let (mut rec_sum, mut com_sum) = (0.0, 0.0);
            for _ in 0..batch {
                if cursor == order.len() {
                    order.shuffle(&mut rng);
                    cursor = 0;
                }
                let clip = &clips[order[cursor]];
                cursor += 1;
                let target = crop(clip, crop_len, &mut rng);
                let k_active = if rng.random_bool(train.quantizer_dropout) {
                    rng.random_range(1..=k_max)
                } else {
                    k_max
                };

                let mut tape = Tape::new();
                let x = tape.constant(Tensor::new(vec![crop_len, 1], target.clone())?);
                let z = model.encoder.forward(&mut tape, &model.params, x)?;
                let zv = tape.value(z).clone();
                let q = rvq_quantize(&zv, model.codebooks(), k_active)?;
                let offset: Vec<f64> = q.quantized.data().iter().zip(zv.data()).map(|(a, b)| a - b).collect();
                let offset = tape.constant(Tensor::new(zv.shape().to_vec(), offset)?);
                let ste = tape.add(z, offset)?;
                let y = model.decoder.forward(&mut tape, &model.params, ste)?;
                let diff = tape.sub(y, x)?;
                let l1 = tape.sum_abs(diff);
                let l1 = tape.scale(l1, train.l1_weight / crop_len as f64);
                let spec = stft_loss(&mut tape, y, &target, &mr);
                let spec = tape.scale(spec, train.stft_weight);
                let recon = tape.add(l1, spec)?;
                let qc = tape.constant(q.quantized.clone());
                let gap = tape.sub(z, qc)?;
                let commit = tape.sum_squares(gap);
                let commit = tape.scale(commit, train.commitment / zv.len() as f64);
                let total = tape.add(recon, commit)?;
                let total_v = tape.value(total).data()[0];
                if !total_v.is_finite() {
                    return Err(Error::Divergence {
                        step,
                        detail: format!("codec loss is {total_v}"),
                    });
                }
                let scaled = tape.scale(total, 1.0 / batch as f64);
                tape.backward(scaled).map_err(|e| Error::Divergence {
                    step,
                    detail: e.to_string(),
                })?;
                tape.accumulate_param_grads(&mut model.params);

                rec_sum += tape.value(recon).data()[0];
                com_sum += tape.value(commit).data()[0];
                epoch_sum += total_v;
                epoch_count += 1;

                let d = config.dim;
                for j in 0..k_active {
                    let inputs = &q.stage_inputs[j];
                    for t in 0..zv.rows() {
                        let r = &inputs[t * d..(t + 1) * d];
                        stats[j].add(q.tokens.get(t, j), r);
                    }
                    // a few residuals per clip are enough to reseed dead codes
                    for _ in 0..4 {
                        let t = rng.random_range(0..zv.rows());
                        pools[j].push(inputs[t * d..(t + 1) * d].to_vec());
                    }
                }
            }
            clip_grad_norm(&mut model.params, train.grad_clip);
            adam_step(&mut model.params, &mut opt, lr).map_err(|e| Error::Divergence {
                step,
                detail: e.to_string(),
            })?;
            for j in 0..k_max {
                if stats[j].counts.iter().sum::<f64>() == 0.0 {
                    continue;
                }
                let pool: Vec<&[f64]> = pools[j].iter().map(Vec::as_slice).collect();
                model
                    .codebooks
                    .ema_update(j, &stats[j], train.ema_decay, &pool, &mut rng);
            }
            let b = batch as f64;
            report.rows.push(CodecLossRow {
                step,
                lr,
                reconstruction: rec_sum / b,
                commitment: com_sum / b,
                total: (rec_sum + com_sum) / b,
            });
        }
        report.epoch_means.push(epoch_sum / epoch_count.max(1) as f64);
    }
    Ok((model, report))
}

/// Mean squared reconstruction error with `k = 1..=K` stages.
pub fn stage_mse(model: &CodecModel, clips: &[AudioClip]) -> Result<Vec<f64>> {
    let k_max = model.config().quantizers;
    let mut sums = vec![0.0; k_max];
    let mut count = 0usize;
    for clip in clips {
        let z = model.encode(clip)?;
        for (k, sum) in sums.iter_mut().enumerate() {
            let q = rvq_quantize(&z, model.codebooks(), k + 1)?;
            let y = model.decode(&q.quantized)?;
            *sum += clip
                .samples()
                .iter()
                .zip(y.samples())
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>();
        }
        count += clip.len();
    }
    Ok(sums.into_iter().map(|s| s / count.max(1) as f64).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsp::gen_clean;

    fn tiny_train() -> CodecTrainConfig {
        CodecTrainConfig {
            epochs: 2,
            batch_size: 2,
            crop_len: 512,
            warmup_steps: 2,
            ..CodecTrainConfig::default()
        }
    }

    #[test]
    fn tiny_run_is_deterministic() {
        let clips: Vec<AudioClip> = (0..4).map(|s| gen_clean(s, 0.5).unwrap()).collect();
        let cfg = CodecConfig::tiny(2, 8, 4);
        let (a, ra) = train_codec(&clips, &cfg, &tiny_train()).unwrap();
        let (b, rb) = train_codec(&clips, &cfg, &tiny_train()).unwrap();
        assert_eq!(a.checksum(), b.checksum());
        assert_eq!(ra, rb);
        assert_eq!(ra.rows.len(), 4);
        assert_eq!(ra.epoch_means.len(), 2);
        assert!(ra.to_csv().lines().count() == 5);
    }

    #[test]
    fn bad_settings_are_config_errors() {
        let clips = vec![gen_clean(0, 0.5).unwrap()];
        let t = CodecTrainConfig {
            ema_decay: 1.0,
            ..tiny_train()
        };
        assert!(matches!(
            train_codec(&clips, &CodecConfig::tiny(2, 8, 4), &t),
            Err(Error::Config { .. })
        ));
        assert!(matches!(
            train_codec(&[], &CodecConfig::tiny(2, 8, 4), &tiny_train()),
            Err(Error::Degenerate(_))
        ));
    }

    #[test]
    fn stage_mse_has_one_entry_per_stage() {
        let clips = vec![gen_clean(0, 0.5).unwrap()];
        let (m, _) = train_codec(&clips, &CodecConfig::tiny(3, 8, 4), &tiny_train()).unwrap();
        let mse = stage_mse(&m, &clips).unwrap();
        assert_eq!(mse.len(), 3);
        assert!(mse.iter().all(|v| v.is_finite() && *v >= 0.0));
    }
}
