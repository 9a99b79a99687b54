use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::model::TokenProbabilities;
use crate::codec::TokenMatrix;
use crate::error::{Error, Result};
use crate::nn::Tensor;

/// `Σ_k Σ_t −log p_{t,k}[clean_{t,k}]` over the predicted groups.
/// `clean` may carry more groups than were predicted; extra groups are ignored.
pub fn token_ce_loss(probs: &TokenProbabilities, clean: &TokenMatrix) -> Result<f64> {
    if clean.frames() != probs.frames() || clean.groups() < probs.groups() {
        return Err(Error::dim(format!(
            "clean tokens {}×{} for predictions {}×{}",
            clean.frames(),
            clean.groups(),
            probs.frames(),
            probs.groups()
        )));
    }
    let mut loss = 0.0;
    for k in 0..probs.groups() {
        for t in 0..probs.frames() {
            let target = clean.get(t, k);
            if target >= probs.size() {
                return Err(Error::Corruption(format!(
                    "clean token {target} outside [0, {})",
                    probs.size()
                )));
            }
            loss += probs.neg_log_prob(t, k, target);
        }
    }
    Ok(loss)
}

/// `‖Δ‖₁ + ‖Δ‖_F` with `Δ = predicted − target`.
pub fn er_loss(predicted: &Tensor, target: &Tensor) -> Result<f64> {
    if predicted.shape() != target.shape() {
        return Err(Error::dim(format!(
            "predicted {:?} vs target {:?}",
            predicted.shape(),
            target.shape()
        )));
    }
    let (mut l1, mut sq) = (0.0, 0.0);
    for (p, t) in predicted.data().iter().zip(target.data()) {
        let d = p - t;
        l1 += d.abs();
        sq += d * d;
    }
    Ok(l1 + sq.sqrt())
}

/// Replaces each predicted entry by the clean one with probability `p_replace`.
pub fn teacher_force(predicted: &TokenMatrix, clean: &TokenMatrix, p_replace: f64, seed: u64) -> Result<TokenMatrix> {
    if !(0.0..=1.0).contains(&p_replace) {
        return Err(Error::config("p_replace", format!("{p_replace} outside [0, 1]")));
    }
    if predicted.frames() != clean.frames() || predicted.groups() != clean.groups() {
        return Err(Error::dim(format!(
            "predicted {}×{} vs clean {}×{}",
            predicted.frames(),
            predicted.groups(),
            clean.frames(),
            clean.groups()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tokens = predicted
        .tokens()
        .iter()
        .zip(clean.tokens())
        .map(|(&p, &c)| if rng.random_bool(p_replace) { c } else { p })
        .collect();
    TokenMatrix::new(
        predicted.frames(),
        predicted.groups(),
        predicted.codebook_size().max(clean.codebook_size()),
        tokens,
    )
}
