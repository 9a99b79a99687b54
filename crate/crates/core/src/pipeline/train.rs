//! Joint training of the token denoiser and embedding refiner against a
//! frozen codec.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::codec::{lookup_sum, Codebooks, CodecModel, TokenMatrix};
use crate::denoiser::{refiner_input, teacher_force, DenoiserConfig, DenoiserModel};
use crate::dsp::Pair;
use crate::error::{Error, Result};
use crate::nn::kernels::argmax;
use crate::nn::{adam_step, clip_grad_norm, warmup_lr, OptimizerState, Tape, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lambda_ce: f64,
    pub lambda_er: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub peak_lr: f64,
    pub warmup_steps: u64,
    pub p_replace: f64,
    pub seed: u64,
    pub grad_clip: f64,
    /// Training pairs used per epoch (all when 0).
    pub clips_per_epoch: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda_ce: 1.0,
            lambda_er: 0.5,
            epochs: 10,
            batch_size: 8,
            peak_lr: 1e-2,
            warmup_steps: 100,
            p_replace: 0.5,
            seed: 0,
            grad_clip: 5.0,
            clips_per_epoch: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_ce >= 0.0 && self.lambda_ce.is_finite()) {
            return Err(Error::config("train.lambda_ce", "must be a non-negative number"));
        }
        if !(self.lambda_er >= 0.0 && self.lambda_er.is_finite()) {
            return Err(Error::config("train.lambda_er", "must be a non-negative number"));
        }
        if self.epochs == 0 {
            return Err(Error::config("train.epochs", "must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("train.batch_size", "must be positive"));
        }
        if !(self.peak_lr > 0.0 && self.peak_lr.is_finite()) {
            return Err(Error::config("train.peak_lr", "must be positive"));
        }
        if !(0.0..=1.0).contains(&self.p_replace) {
            return Err(Error::config("train.p_replace", "must lie in [0, 1]"));
        }
        if !(self.grad_clip > 0.0) {
            return Err(Error::config("train.grad_clip", "must be positive"));
        }
        Ok(())
    }
}

/// `λ1·L_CE + λ2·L_ER`.
pub fn total_loss(l_ce: f64, l_er: f64, lambda_ce: f64, lambda_er: f64) -> f64 {
    lambda_ce * l_ce + lambda_er * l_er
}

/// Noisy and clean tokens of one training clip, all `K` groups each.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenPair {
    pub noisy: TokenMatrix,
    pub clean: TokenMatrix,
}

/// Encodes every pair once with the frozen codec.
pub fn tokenize_pairs(codec: &CodecModel, pairs: &[Pair]) -> Result<Vec<TokenPair>> {
    pairs
        .iter()
        .map(|p| {
            Ok(TokenPair {
                noisy: codec.tokenize(&p.noisy)?,
                clean: codec.tokenize(&p.clean)?,
            })
        })
        .collect()
}

/// Loss nodes of one clip on a tape.
#[derive(Clone, Copy, Debug)]
pub(crate) struct LossVars {
    pub ce: Var,
    pub er: Var,
    pub total: Var,
}

/// Token-denoiser logits and their argmax tokens.
pub(crate) fn predict_on_tape(tape: &mut Tape, model: &DenoiserModel, codebooks: &Codebooks, noisy: &TokenMatrix) -> Result<(Vec<Var>, TokenMatrix)> {
    let summed = lookup_sum(noisy, codebooks, 1..=model.quantizers())?;
    let x = tape.constant(summed);
    let logits = model.head_logits(tape, x)?;
    let c = model.codebook_size();
    let columns: Vec<Vec<usize>> = logits
        .iter()
        .map(|&l| tape.value(l).data().chunks_exact(c).map(argmax).collect())
        .collect();
    Ok((logits, TokenMatrix::from_columns(&columns, c)?))
}

/// Records `λ1·L_CE + λ2·L_ER` given the refiner's (already teacher-forced) tokens.
pub(crate) fn joint_loss(
    tape: &mut Tape,
    model: &DenoiserModel,
    codebooks: &Codebooks,
    logits: &[Var],
    pair: &TokenPair,
    enhanced: &TokenMatrix,
    cfg: &TrainConfig,
) -> Result<LossVars> {
    let mut ce: Option<Var> = None;
    for (g, &l) in logits.iter().enumerate() {
        let term = tape.cross_entropy_sum(l, &pair.clean.column(g))?;
        ce = Some(match ce {
            Some(acc) => tape.add(acc, term)?,
            None => term,
        });
    }
    let ce = ce.ok_or_else(|| Error::State("no prediction heads".into()))?;
    let input = tape.constant(refiner_input(enhanced, &pair.noisy, codebooks)?);
    let predicted = model.refiner(tape, input)?;
    let target = tape.constant(lookup_sum(&pair.clean, codebooks, 1..=model.quantizers())?);
    let delta = tape.sub(predicted, target)?;
    let l1 = tape.sum_abs(delta);
    let fro = tape.norm2(delta);
    let er = tape.add(l1, fro)?;
    let a = tape.scale(ce, cfg.lambda_ce);
    let b = tape.scale(er, cfg.lambda_er);
    let total = tape.add(a, b)?;
    Ok(LossVars { ce, er, total })
}

/// Joint loss of one pair with the refiner fed `enhanced`.
pub fn joint_loss_value(model: &DenoiserModel, codebooks: &Codebooks, pair: &TokenPair, enhanced: &TokenMatrix, cfg: &TrainConfig) -> Result<f64> {
    let mut tape = Tape::new();
    let (logits, _) = predict_on_tape(&mut tape, model, codebooks, &pair.noisy)?;
    let lv = joint_loss(&mut tape, model, codebooks, &logits, pair, enhanced, cfg)?;
    Ok(tape.value(lv.total).data()[0])
}

/// Joint loss and the gradient of every denoiser parameter, in store order.
/// `enhanced` is a constant input, as after teacher forcing.
pub fn joint_loss_gradients(
    model: &DenoiserModel,
    codebooks: &Codebooks,
    pair: &TokenPair,
    enhanced: &TokenMatrix,
    cfg: &TrainConfig,
) -> Result<(f64, Vec<Vec<f64>>)> {
    let mut tape = Tape::new();
    let (logits, _) = predict_on_tape(&mut tape, model, codebooks, &pair.noisy)?;
    let lv = joint_loss(&mut tape, model, codebooks, &logits, pair, enhanced, cfg)?;
    tape.backward(lv.total)?;
    let mut params = model.params.clone();
    params.zero_grads();
    tape.accumulate_param_grads(&mut params);
    let grads = params
        .iter()
        .map(|(_, t)| t.grad().map_or_else(|| vec![0.0; t.len()], <[f64]>::to_vec))
        .collect();
    Ok((tape.value(lv.total).data()[0], grads))
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossRow {
    pub step: usize,
    pub lr: f64,
    pub ce: f64,
    pub er: f64,
    pub total: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainReport {
    /// Batch means per optimizer step.
    pub rows: Vec<LossRow>,
    pub epoch_means: Vec<f64>,
}

impl TrainReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,lr,L_CE,L_ER,L\n");
        for r in &self.rows {
            s.push_str(&format!("{},{:e},{},{},{}\n", r.step, r.lr, r.ce, r.er, r.total));
        }
        s
    }
}

fn check_pair(pair: &TokenPair, codebooks: &Codebooks) -> Result<()> {
    let k = codebooks.stages();
    if pair.noisy.groups() != k || pair.clean.groups() != k || pair.noisy.frames() != pair.clean.frames() {
        return Err(Error::dim(format!(
            "token pair {}×{} / {}×{} for a {k}-stage codec",
            pair.noisy.frames(),
            pair.noisy.groups(),
            pair.clean.frames(),
            pair.clean.groups()
        )));
    }
    if pair.noisy.frames() == 0 {
        return Err(Error::Degenerate("token pair without frames".into()));
    }
    Ok(())
}

/// Trains a fresh denoiser; the codec is only read.
pub fn train_denoiser(
    pairs: &[TokenPair],
    codec: &CodecModel,
    config: &DenoiserConfig,
    train: &TrainConfig,
) -> Result<(DenoiserModel, TrainReport)> {
    train.validate()?;
    let cc = codec.config();
    if pairs.is_empty() {
        return Err(Error::Degenerate("no training pairs".into()));
    }
    let codebooks = codec.codebooks();
    for p in pairs {
        check_pair(p, codebooks)?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(train.seed);
    let mut model = DenoiserModel::new(config.clone(), cc.quantizers, cc.codebook_size, cc.dim, &mut rng)?;
    let mut opt = OptimizerState::new(&model.params);
    let mut report = TrainReport::default();
    let per_epoch = if train.clips_per_epoch == 0 {
        pairs.len()
    } else {
        train.clips_per_epoch
    };
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let mut cursor = pairs.len();
    let mut step = 0usize;
    for _ in 0..train.epochs {
        let (mut epoch_sum, mut epoch_n) = (0.0, 0usize);
        let mut drawn = 0;
        while drawn < per_epoch {
            let batch = train.batch_size.min(per_epoch - drawn);
            drawn += batch;
            step += 1;
            let lr = warmup_lr(step as u64, train.peak_lr, train.warmup_steps);
            model.params.zero_grads();
            let (mut ce_sum, mut er_sum, mut tot_sum) = (0.0, 0.0, 0.0);
            for _ in 0..batch {
                if cursor == order.len() {
                    order.shuffle(&mut rng);
                    cursor = 0;
                }
                let pair = &pairs[order[cursor]];
                cursor += 1;
                let mut tape = Tape::new();
                let (logits, predicted) = predict_on_tape(&mut tape, &model, codebooks, &pair.noisy)?;
                let clean_lead = pair.clean.leading(model.groups())?;
                let forced = teacher_force(&predicted, &clean_lead, train.p_replace, rng.random())?;
                let lv = joint_loss(&mut tape, &model, codebooks, &logits, pair, &forced, train)?;
                let total = tape.value(lv.total).data()[0];
                if !total.is_finite() {
                    return Err(Error::Divergence {
                        step,
                        detail: format!("joint loss is {total}"),
                    });
                }
                // batch mean of per-clip losses
                let scaled = tape.scale(lv.total, 1.0 / batch as f64);
                tape.backward(scaled).map_err(|e| Error::Divergence {
                    step,
                    detail: e.to_string(),
                })?;
                tape.accumulate_param_grads(&mut model.params);
                ce_sum += tape.value(lv.ce).data()[0];
                er_sum += tape.value(lv.er).data()[0];
                tot_sum += total;
                epoch_sum += total;
                epoch_n += 1;
            }
            clip_grad_norm(&mut model.params, train.grad_clip);
            adam_step(&mut model.params, &mut opt, lr).map_err(|e| Error::Divergence {
                step,
                detail: e.to_string(),
            })?;
            let b = batch as f64;
            report.rows.push(LossRow {
                step,
                lr,
                ce: ce_sum / b,
                er: er_sum / b,
                total: tot_sum / b,
            });
        }
        report.epoch_means.push(epoch_sum / epoch_n.max(1) as f64);
    }
    Ok((model, report))
}

/// Mean per-clip CE, ER and per-token CE on held-out pairs, without teacher forcing.
#[derive(Clone, Debug, PartialEq)]
pub struct ValidationLosses {
    pub ce: f64,
    pub er: f64,
    /// CE divided by `g·T`.
    pub ce_per_token: f64,
}

pub fn validation_losses(model: &DenoiserModel, codec: &CodecModel, pairs: &[TokenPair]) -> Result<ValidationLosses> {
    if pairs.is_empty() {
        return Err(Error::Degenerate("no validation pairs".into()));
    }
    let codebooks = codec.codebooks();
    let cfg = TrainConfig::default();
    let (mut ce, mut er, mut tokens) = (0.0, 0.0, 0usize);
    for pair in pairs {
        check_pair(pair, codebooks)?;
        let mut tape = Tape::new();
        let (logits, predicted) = predict_on_tape(&mut tape, model, codebooks, &pair.noisy)?;
        let lv = joint_loss(&mut tape, model, codebooks, &logits, pair, &predicted, &cfg)?;
        ce += tape.value(lv.ce).data()[0];
        er += tape.value(lv.er).data()[0];
        tokens += pair.noisy.frames() * model.groups();
    }
    let n = pairs.len() as f64;
    Ok(ValidationLosses {
        ce: ce / n,
        er: er / n,
        ce_per_token: ce / tokens as f64,
    })
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::Rng as _;

    use super::*;
    use crate::codec::CodecConfig;

    fn random_tokens(rng: &mut ChaCha8Rng, frames: usize, groups: usize, size: usize) -> TokenMatrix {
        let t = (0..frames * groups).map(|_| rng.random_range(0..size as u16)).collect();
        TokenMatrix::new(frames, groups, size, t).unwrap()
    }

    fn tiny_denoiser() -> DenoiserConfig {
        DenoiserConfig {
            d_model: 8,
            heads: 2,
            ff_mult: 2,
            kernel: 3,
            td_blocks: 1,
            er_blocks: 1,
            groups: 2,
        }
    }

    fn tiny_setup(seed: u64, clips: usize, frames: usize) -> (CodecModel, Vec<TokenPair>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let codec = CodecModel::new(CodecConfig::tiny(2, 8, 4), &mut rng).unwrap();
        let pairs = (0..clips)
            .map(|_| TokenPair {
                noisy: random_tokens(&mut rng, frames, 2, 8),
                clean: random_tokens(&mut rng, frames, 2, 8),
            })
            .collect();
        (codec, pairs)
    }

    /// Every trainable parameter against central differences of the joint
    /// loss, with the refiner's input tokens held at their unperturbed values.
    /// The denominator floor sits above central-difference round-off
    /// (about ε·|L|/h ≈ 4e-10 here), which matters for the attention key
    /// bias: its true gradient is exactly zero.
    #[test]
    fn joint_loss_gradient_matches_finite_differences() {
        const STEP: f64 = 1e-5;
        let (codec, pairs) = tiny_setup(7, 1, 4);
        let pair = &pairs[0];
        let cb = codec.codebooks();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut model = DenoiserModel::new(tiny_denoiser(), 2, 8, 4, &mut rng).unwrap();
        let enhanced = random_tokens(&mut rng, 4, 2, 8);
        let cfg = TrainConfig::default();
        let loss = |m: &DenoiserModel| -> f64 {
            let mut tape = Tape::new();
            let (logits, _) = predict_on_tape(&mut tape, m, cb, &pair.noisy).unwrap();
            let lv = joint_loss(&mut tape, m, cb, &logits, pair, &enhanced, &cfg).unwrap();
            tape.value(lv.total).data()[0]
        };

        model.params.zero_grads();
        let mut tape = Tape::new();
        let (logits, _) = predict_on_tape(&mut tape, &model, cb, &pair.noisy).unwrap();
        let lv = joint_loss(&mut tape, &model, cb, &logits, pair, &enhanced, &cfg).unwrap();
        tape.backward(lv.total).unwrap();
        tape.accumulate_param_grads(&mut model.params);

        let ids: Vec<_> = model.params.ids().collect();
        let mut checked = 0;
        for id in ids {
            let analytic = model.params.get(id).grad().expect("every parameter is trainable").to_vec();
            for (j, &a) in analytic.iter().enumerate() {
                let orig = model.params.get(id).data()[j];
                model.params.get_mut(id).data_mut()[j] = orig + STEP;
                let up = loss(&model);
                model.params.get_mut(id).data_mut()[j] = orig - STEP;
                let down = loss(&model);
                model.params.get_mut(id).data_mut()[j] = orig;
                let n = (up - down) / (2.0 * STEP);
                let rel = (a - n).abs() / a.abs().max(n.abs()).max(1e-5);
                assert!(rel <= 1e-4, "{}[{j}]: analytic {a} numeric {n} rel {rel}", model.params.name(id));
                checked += 1;
            }
        }
        assert_eq!(checked, model.params.num_scalars());
    }

    #[test]
    fn training_is_deterministic_and_leaves_codec_untouched() {
        let (codec, pairs) = tiny_setup(1, 6, 5);
        let before = codec.checksum();
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 2,
            warmup_steps: 2,
            ..TrainConfig::default()
        };
        let (a, ra) = train_denoiser(&pairs, &codec, &tiny_denoiser(), &cfg).unwrap();
        let (b, rb) = train_denoiser(&pairs, &codec, &tiny_denoiser(), &cfg).unwrap();
        assert_eq!(a.checksum(), b.checksum());
        assert_eq!(ra, rb);
        assert_eq!(ra.rows.len(), 6);
        assert_eq!(ra.epoch_means.len(), 2);
        assert_eq!(codec.checksum(), before);
        assert!(ra.to_csv().starts_with("step,lr,L_CE,L_ER,L\n"));
        let other = TrainConfig { seed: 1, ..cfg };
        let (c, _) = train_denoiser(&pairs, &codec, &tiny_denoiser(), &other).unwrap();
        assert_ne!(a.checksum(), c.checksum());
    }

    #[test]
    fn fitting_a_fixed_pair_lowers_the_loss() {
        let (codec, pairs) = tiny_setup(2, 1, 6);
        let cfg = TrainConfig {
            epochs: 60,
            batch_size: 1,
            warmup_steps: 5,
            peak_lr: 1e-2,
            ..TrainConfig::default()
        };
        let (model, report) = train_denoiser(&pairs, &codec, &tiny_denoiser(), &cfg).unwrap();
        let first = report.epoch_means[0];
        let last = *report.epoch_means.last().unwrap();
        assert!(last < 0.5 * first, "{first} -> {last}");
        let val = validation_losses(&model, &codec, &pairs).unwrap();
        assert!((val.ce_per_token - val.ce / 12.0).abs() < 1e-12);
    }

    #[test]
    fn mismatched_pairs_are_rejected() {
        let (codec, mut pairs) = tiny_setup(3, 2, 4);
        pairs[1].clean = pairs[1].clean.leading(1).unwrap();
        let err = train_denoiser(&pairs, &codec, &tiny_denoiser(), &TrainConfig::default()).unwrap_err();
        assert!(matches!(err, Error::Dimension(_)), "{err}");
        assert!(matches!(
            train_denoiser(&[], &codec, &tiny_denoiser(), &TrainConfig::default()),
            Err(Error::Degenerate(_))
        ));
    }

    proptest! {
        #[test]
        fn total_loss_is_linear(ce in 0.0f64..1e4, er in 0.0f64..1e4, d in 0.0f64..1e3, l1 in 0.0f64..4.0, l2 in 0.0f64..4.0) {
            let base = total_loss(ce, er, l1, l2);
            let dce = total_loss(ce + d, er, l1, l2) - base;
            let der = total_loss(ce, er + d, l1, l2) - base;
            prop_assert!((dce - l1 * d).abs() <= 1e-9 * (1.0 + base.abs()));
            prop_assert!((der - l2 * d).abs() <= 1e-9 * (1.0 + base.abs()));
        }
    }

    #[test]
    fn total_loss_examples() {
        assert_eq!(total_loss(2.0, 4.0, 1.0, 0.5), 4.0);
        assert_eq!(total_loss(2.5, 7.0, 1.0, 0.0), 2.5);
        assert_eq!(total_loss(0.0, 0.0, 1.0, 0.5), 0.0);
    }

    #[test]
    fn default_weights() {
        let c = TrainConfig::default();
        assert_eq!((c.lambda_ce, c.lambda_er, c.p_replace), (1.0, 0.5, 0.5));
    }

    #[test]
    fn invalid_settings_name_fields() {
        let c = TrainConfig {
            lambda_er: -1.0,
            ..TrainConfig::default()
        };
        assert!(matches!(c.validate(), Err(Error::Config { field, .. }) if field == "train.lambda_er"));
        let c = TrainConfig {
            p_replace: 2.0,
            ..TrainConfig::default()
        };
        assert!(c.validate().is_err());
    }
}
