use crate::codec::TokenMatrix;
use crate::error::{Error, Result};

/// Reported ceiling (and floor) of [`si_snr`] in dB.
pub const SI_SNR_CAP_DB: f64 = 60.0;
const SILENT_ENERGY: f64 = 1e-12;

/// Scale-invariant SNR of `estimate` against `reference`, zero-mean, capped to ±60 dB.
pub fn si_snr(estimate: &[f64], reference: &[f64]) -> Result<f64> {
    if estimate.len() != reference.len() {
        return Err(Error::dim(format!(
            "estimate has {} samples, reference {}",
            estimate.len(),
            reference.len()
        )));
    }
    let n = reference.len().max(1) as f64;
    let me = estimate.iter().sum::<f64>() / n;
    let mr = reference.iter().sum::<f64>() / n;
    let (mut dot, mut rr) = (0.0, 0.0);
    for (e, r) in estimate.iter().zip(reference) {
        dot += (e - me) * (r - mr);
        rr += (r - mr) * (r - mr);
    }
    if rr < SILENT_ENERGY {
        return Err(Error::Degenerate("silent reference".into()));
    }
    let alpha = dot / rr;
    let (mut target, mut noise) = (0.0, 0.0);
    for (e, r) in estimate.iter().zip(reference) {
        let s = alpha * (r - mr);
        target += s * s;
        noise += (e - me - s) * (e - me - s);
    }
    if noise == 0.0 {
        return Ok(if target > 0.0 { SI_SNR_CAP_DB } else { -SI_SNR_CAP_DB });
    }
    if target == 0.0 {
        return Ok(-SI_SNR_CAP_DB);
    }
    Ok((10.0 * (target / noise).log10()).clamp(-SI_SNR_CAP_DB, SI_SNR_CAP_DB))
}

/// Fraction of frames whose token in `group` (0-based) matches.
pub fn token_accuracy(predicted: &TokenMatrix, clean: &TokenMatrix, group: usize) -> Result<f64> {
    if predicted.frames() != clean.frames() || group >= predicted.groups() || group >= clean.groups() {
        return Err(Error::dim("token matrices disagree in frames or groups"));
    }
    if predicted.frames() == 0 {
        return Err(Error::Degenerate("no frames".into()));
    }
    let hits = (0..predicted.frames())
        .filter(|&t| predicted.get(t, group) == clean.get(t, group))
        .count();
    Ok(hits as f64 / predicted.frames() as f64)
}
