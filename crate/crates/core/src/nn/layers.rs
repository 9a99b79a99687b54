use rand::Rng;

use super::kernels::{self, gemm};
use super::params::{ParamId, ParamStore};
use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// `output[t] = input[t]·W + b` for `input[T×d_in]`, `W[d_in×d_out]`, `b[d_out]`.
pub fn forward_linear(input: &Tensor, weights: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (t, d_in) = (input.rows(), input.cols());
    if weights.shape().len() != 2 || weights.shape()[0] != d_in {
        return Err(Error::dim(format!(
            "input width {d_in} against weights {:?}",
            weights.shape()
        )));
    }
    let d_out = weights.shape()[1];
    if bias.len() != d_out {
        return Err(Error::dim(format!("bias of {} for {d_out} outputs", bias.len())));
    }
    let mut out = Vec::with_capacity(t * d_out);
    for _ in 0..t {
        out.extend_from_slice(bias.data());
    }
    gemm(t, d_in, d_out, input.data(), false, weights.data(), false, &mut out, true);
    Tensor::new(vec![t, d_out], out)
}

/// Row-wise softmax over the last dimension.
pub fn softmax_rows(logits: &Tensor) -> Result<Tensor> {
    if logits.cols() == 0 {
        return Err(Error::dim("softmax over an empty dimension"));
    }
    if !logits.is_finite() {
        return Err(Error::Numeric("softmax of non-finite logits".into()));
    }
    let mut out = logits.clone();
    let c = out.cols();
    out.data_mut()
        .chunks_exact_mut(c)
        .for_each(kernels::softmax_in_place);
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new(ps: &mut ParamStore, name: &str, d_in: usize, d_out: usize, rng: &mut impl Rng) -> Self {
        Self {
            weight: ps.add_uniform(&format!("{name}.weight"), &[d_in, d_out], d_in, rng),
            bias: ps.add_zeros(&format!("{name}.bias"), &[d_out]),
            d_in,
            d_out,
        }
    }

    pub fn forward(&self, tape: &mut Tape, ps: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(ps, self.weight);
        let b = tape.param(ps, self.bias);
        let y = tape.matmul(x, w)?;
        tape.add_bias(y, b)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub const EPS: f64 = 1e-5;

    pub fn new(ps: &mut ParamStore, name: &str, width: usize) -> Self {
        Self {
            gamma: ps.add_ones(&format!("{name}.gamma"), &[width]),
            beta: ps.add_zeros(&format!("{name}.beta"), &[width]),
        }
    }

    pub fn forward(&self, tape: &mut Tape, ps: &ParamStore, x: Var) -> Result<Var> {
        let g = tape.param(ps, self.gamma);
        let b = tape.param(ps, self.beta);
        tape.layer_norm(x, g, b, Self::EPS)
    }
}

/// Strided convolution over `[time × channels]` activations.
#[derive(Clone, Debug)]
pub struct Conv1d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub c_in: usize,
    pub c_out: usize,
}

impl Conv1d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        ps: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let fan_in = kernel * c_in;
        Self {
            weight: ps.add_uniform(&format!("{name}.weight"), &[fan_in, c_out], fan_in, rng),
            bias: ps.add_zeros(&format!("{name}.bias"), &[c_out]),
            kernel,
            stride,
            pad,
            c_in,
            c_out,
        }
    }

    pub fn forward(&self, tape: &mut Tape, ps: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(ps, self.weight);
        let b = tape.param(ps, self.bias);
        tape.conv1d(x, w, b, self.kernel, self.stride, self.pad)
    }
}

/// Transposed convolution upsampling time by exactly `stride`.
#[derive(Clone, Debug)]
pub struct ConvTranspose1d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub kernel: usize,
    pub stride: usize,
    pub c_in: usize,
    pub c_out: usize,
}

impl ConvTranspose1d {
    pub fn new(
        ps: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        stride: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let kernel = 2 * stride;
        // each output sample receives kernel/stride taps from every input channel
        let fan_in = c_in * kernel / stride;
        Self {
            weight: ps.add_uniform(&format!("{name}.weight"), &[c_in, kernel * c_out], fan_in, rng),
            bias: ps.add_zeros(&format!("{name}.bias"), &[c_out]),
            kernel,
            stride,
            c_in,
            c_out,
        }
    }

    pub fn forward(&self, tape: &mut Tape, ps: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(ps, self.weight);
        let b = tape.param(ps, self.bias);
        tape.conv_transpose1d(x, w, b, self.kernel, self.stride)
    }
}

#[derive(Clone, Debug)]
pub struct DepthwiseConv1d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub kernel: usize,
}

impl DepthwiseConv1d {
    pub fn new(ps: &mut ParamStore, name: &str, channels: usize, kernel: usize, rng: &mut impl Rng) -> Self {
        Self {
            weight: ps.add_uniform(&format!("{name}.weight"), &[channels, kernel], kernel, rng),
            bias: ps.add_zeros(&format!("{name}.bias"), &[channels]),
            kernel,
        }
    }

    pub fn forward(&self, tape: &mut Tape, ps: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(ps, self.weight);
        let b = tape.param(ps, self.bias);
        tape.depthwise_conv1d(x, w, b, self.kernel)
    }
}

/// Absolute sinusoidal position table `[len × width]`.
pub fn sinusoidal_positions(len: usize, width: usize) -> Tensor {
    let mut data = vec![0.0; len * width];
    for t in 0..len {
        for i in 0..width {
            let pair = (i / 2) as f64;
            let angle = t as f64 / 10000f64.powf(2.0 * pair / width as f64);
            data[t * width + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    Tensor::new(vec![len, width], data).expect("shape")
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn linear_zero_input_gives_zero_output() {
        let x = Tensor::zeros(&[3, 4]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w = random(&mut rng, &[4, 2]);
        let y = forward_linear(&x, &w, &Tensor::zeros(&[2])).unwrap();
        assert!(y.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn linear_identity_weights_copy_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random(&mut rng, &[3, 4]);
        let mut eye = Tensor::zeros(&[4, 4]);
        for i in 0..4 {
            eye.data_mut()[i * 4 + i] = 1.0;
        }
        let y = forward_linear(&x, &eye, &Tensor::zeros(&[4])).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn linear_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random(&mut rng, &[3, 4]);
        let w = random(&mut rng, &[4, 2]);
        let b = random(&mut rng, &[2]);
        let y = forward_linear(&x, &w, &b).unwrap();
        for t in 0..3 {
            for o in 0..2 {
                let mut acc = b.data()[o];
                for i in 0..4 {
                    acc += x.data()[t * 4 + i] * w.data()[i * 2 + o];
                }
                assert!((y.data()[t * 2 + o] - acc).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn linear_rejects_width_mismatch() {
        let err = forward_linear(&Tensor::zeros(&[2, 3]), &Tensor::zeros(&[4, 2]), &Tensor::zeros(&[2]));
        assert!(matches!(err, Err(Error::Dimension(_))));
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let p = softmax_rows(&Tensor::zeros(&[1, 4])).unwrap();
        assert_eq!(p.data(), &[0.25; 4]);
    }

    #[test]
    fn softmax_survives_large_logits() {
        let p = softmax_rows(&Tensor::new(vec![1, 2], vec![1000.0, 0.0]).unwrap()).unwrap();
        assert!((p.data()[0] - 1.0).abs() < 1e-12);
        assert!(p.data()[1].abs() < 1e-12);
    }

    #[test]
    fn softmax_matches_direct_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = random(&mut rng, &[1, 8]);
        let p = softmax_rows(&x).unwrap();
        let z: f64 = x.data().iter().map(|v| v.exp()).sum();
        for (pi, xi) in p.data().iter().zip(x.data()) {
            assert!((pi - xi.exp() / z).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_rejects_nan() {
        let x = Tensor::new(vec![1, 2], vec![f64::NAN, 0.0]).unwrap();
        assert!(matches!(softmax_rows(&x), Err(Error::Numeric(_))));
    }
}
