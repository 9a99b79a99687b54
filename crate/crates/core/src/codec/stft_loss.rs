//! Multi-resolution STFT magnitude loss with an analytic gradient.

use rustfft::num_complex::Complex;

use crate::dsp::spectral::Stft;
use crate::nn::{CustomOp, Tape, Tensor, Var};

const LOG_EPS: f64 = 1e-2;

/// Sum over resolutions of the mean absolute linear- and log-magnitude errors.
pub struct MultiResolutionStft {
    stfts: Vec<Stft>,
}

impl MultiResolutionStft {
    pub fn new(resolutions: &[(usize, usize)]) -> Self {
        Self {
            stfts: resolutions.iter().map(|&(n, hop)| Stft::new(n, hop)).collect(),
        }
    }

    pub fn desk_default() -> Self {
        Self::new(&[(512, 128), (256, 64), (128, 32)])
    }

    /// Loss and its gradient with respect to `estimate`.
    pub fn loss_and_grad(&self, estimate: &[f64], target: &[f64]) -> (f64, Vec<f64>) {
        let mut grad = vec![0.0; estimate.len()];
        let mut loss = 0.0;
        for stft in &self.stfts {
            let ys = stft.spectrum(estimate);
            if ys.is_empty() {
                continue;
            }
            let xs = stft.spectrum(target);
            let ym: Vec<f64> = ys.iter().map(|c| c.norm()).collect();
            let xm: Vec<f64> = xs.iter().map(|c| c.norm()).collect();
            let n = ym.len() as f64;
            let mut lin_l1 = 0.0;
            let mut log_l1 = 0.0;
            let mut gmag = vec![0.0; ym.len()];
            for i in 0..ym.len() {
                let dl = ym[i] - xm[i];
                let ld = (ym[i] + LOG_EPS).ln() - (xm[i] + LOG_EPS).ln();
                lin_l1 += dl.abs();
                log_l1 += ld.abs();
                gmag[i] = (sign(dl) + sign(ld) / (ym[i] + LOG_EPS)) / n;
            }
            loss += (lin_l1 + log_l1) / n;
            let gspec: Vec<Complex<f64>> = ys
                .iter()
                .zip(&ym)
                .zip(&gmag)
                .map(|((y, &m), &g)| if m > 0.0 { y * (g / m) } else { Complex::new(0.0, 0.0) })
                .collect();
            stft.adjoint_add(&gspec, &mut grad);
        }
        (loss, grad)
    }
}

fn sign(x: f64) -> f64 {
    if x == 0.0 {
        0.0
    } else {
        x.signum()
    }
}

struct PrecomputedGrad(Vec<f64>);

impl CustomOp for PrecomputedGrad {
    fn backward(&self, _input: &Tensor, _output: &Tensor, out_grad: &[f64], in_grad: &mut [f64]) {
        in_grad.iter_mut().zip(&self.0).for_each(|(d, g)| *d += out_grad[0] * g);
    }
}

/// Records the loss of waveform `x [L × 1]` against `target` on the tape.
pub fn stft_loss(tape: &mut Tape, x: Var, target: &[f64], mr: &MultiResolutionStft) -> Var {
    let (loss, grad) = mr.loss_and_grad(tape.value(x).data(), target);
    tape.custom(x, Tensor::scalar(loss), Box::new(PrecomputedGrad(grad)))
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn signal(seed: u64, n: usize) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.random_range(-0.5..0.5)).collect()
    }

    #[test]
    fn identical_signals_have_zero_loss() {
        let mr = MultiResolutionStft::new(&[(64, 16), (32, 8)]);
        let x = signal(1, 300);
        let (l, g) = mr.loss_and_grad(&x, &x);
        assert_eq!(l, 0.0);
        assert!(g.iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mr = MultiResolutionStft::new(&[(64, 16), (32, 8)]);
        let y = signal(2, 200);
        let x = signal(3, 200);
        let (_, g) = mr.loss_and_grad(&x, &y);
        let h = 1e-6;
        for i in (0..200).step_by(7) {
            let mut p = x.clone();
            p[i] += h;
            let mut m = x.clone();
            m[i] -= h;
            let num = (mr.loss_and_grad(&p, &y).0 - mr.loss_and_grad(&m, &y).0) / (2.0 * h);
            let err = (num - g[i]).abs() / num.abs().max(g[i].abs()).max(1e-6);
            assert!(err < 1e-4, "sample {i}: analytic {} numeric {num}", g[i]);
        }
    }

    #[test]
    fn tape_gradient_scales_with_upstream() {
        let mr = MultiResolutionStft::new(&[(32, 8)]);
        let y = signal(4, 64);
        let x = signal(5, 64);
        let mut tape = Tape::new();
        let v = tape.input(Tensor::new(vec![64, 1], x.clone()).unwrap());
        let l = stft_loss(&mut tape, v, &y, &mr);
        let l3 = tape.scale(l, 3.0);
        tape.backward(l3).unwrap();
        let (_, g) = mr.loss_and_grad(&x, &y);
        for (a, b) in tape.grad(v).unwrap().iter().zip(&g) {
            assert!((a - 3.0 * b).abs() < 1e-12);
        }
    }

    #[test]
    fn short_signals_contribute_nothing() {
        let mr = MultiResolutionStft::new(&[(512, 128)]);
        let (l, g) = mr.loss_and_grad(&[0.1; 100], &[0.0; 100]);
        assert_eq!(l, 0.0);
        assert_eq!(g, vec![0.0; 100]);
    }
}
