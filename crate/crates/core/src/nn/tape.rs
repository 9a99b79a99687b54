//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every op appends a node holding its forward value. [`Tape::backward`] walks
//! the tape once in reverse, accumulating gradients only into nodes that depend
//! on an input or a parameter.

use std::collections::HashMap;

use super::kernels::{self, col2im_add, conv_out_len, gemm, im2col, sigmoid};
use super::params::{ParamId, ParamStore};
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// A differentiable single-input op implemented outside the tape.
pub trait CustomOp {
    /// Adds dL/d(input) into `in_grad` given dL/d(output).
    fn backward(&self, input: &Tensor, output: &Tensor, out_grad: &[f64], in_grad: &mut [f64]);
}

enum Op {
    Constant,
    Input,
    Param,
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Elu(Var),
    /// Keeps σ(x) for the backward pass.
    Silu(Var, Vec<f64>),
    Sigmoid(Var),
    Glu(Var),
    SoftmaxRows(Var, f64),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    Conv1d {
        x: Var,
        w: Var,
        b: Var,
        kernel: usize,
        stride: usize,
        pad: usize,
        cols: Vec<f64>,
    },
    ConvTranspose1d {
        x: Var,
        w: Var,
        b: Var,
        kernel: usize,
        stride: usize,
        crop: usize,
    },
    DepthwiseConv1d {
        x: Var,
        w: Var,
        b: Var,
        kernel: usize,
    },
    Sum(Var),
    SumAbs(Var),
    SumSquares(Var),
    Norm2(Var),
    CrossEntropySum {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
    Custom {
        x: Var,
        op: Box<dyn CustomOp>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    param_leaves: HashMap<ParamId, Var>,
}

fn dims2(t: &Tensor) -> (usize, usize) {
    (t.rows(), t.cols())
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Gradient of the last `backward` loss with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Constant, false)
    }

    /// A leaf whose gradient is tracked.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Input, true)
    }

    pub fn param(&mut self, ps: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.param_leaves.get(&id) {
            return v;
        }
        let p = ps.get(id);
        let value = Tensor::new(p.shape().to_vec(), p.data().to_vec()).expect("shape");
        let v = self.push(value, Op::Param, true);
        self.param_leaves.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = dims2(self.value(a));
        let (k2, n) = dims2(self.value(b));
        if k != k2 || self.value(b).shape().len() != 2 {
            return Err(Error::dim(format!(
                "matmul {:?} x {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), false, &mut out, false);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), rg))
    }

    /// `a · bᵀ` for `a[m×k]`, `b[n×k]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = dims2(self.value(a));
        let (n, k2) = dims2(self.value(b));
        if k != k2 {
            return Err(Error::dim(format!(
                "matmul_nt {:?} x {:?}ᵀ",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), true, &mut out, false);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMulNT(a, b), rg))
    }

    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let xv = self.value(x);
        let n = xv.cols();
        if self.value(b).len() != n {
            return Err(Error::dim(format!(
                "bias of {} for width {n}",
                self.value(b).len()
            )));
        }
        let bias = self.value(b).data();
        let mut out = xv.data().to_vec();
        for row in out.chunks_exact_mut(n) {
            row.iter_mut().zip(bias).for_each(|(o, b)| *o += b);
        }
        let out = Tensor::new(xv.shape().to_vec(), out)?;
        let rg = self.rg(x) || self.rg(b);
        Ok(self.push(out, Op::AddBias(x, b), rg))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::dim(format!(
                "{what}: {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Var {
        let av = self.value(a);
        let data = av
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| f(*x, *y))
            .collect();
        let out = Tensor::new(av.shape().to_vec(), data).expect("shape");
        let rg = self.rg(a) || self.rg(b);
        self.push(out, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        Ok(self.zip_with(a, b, Op::Add(a, b), |x, y| x + y))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        Ok(self.zip_with(a, b, Op::Sub(a, b), |x, y| x - y))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        Ok(self.zip_with(a, b, Op::Mul(a, b), |x, y| x * y))
    }

    fn map(&mut self, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let xv = self.value(x);
        let data = xv.data().iter().map(|v| f(*v)).collect();
        let out = Tensor::new(xv.shape().to_vec(), data).expect("shape");
        let rg = self.rg(x);
        self.push(out, op, rg)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        self.map(x, Op::Scale(x, s), |v| v * s)
    }

    pub fn elu(&mut self, x: Var) -> Var {
        self.map(x, Op::Elu(x), |v| if v > 0.0 { v } else { v.exp_m1() })
    }

    /// Swish / SiLU: `x·σ(x)`.
    pub fn silu(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let sig: Vec<f64> = xv.data().iter().map(|&v| sigmoid(v)).collect();
        let data = xv.data().iter().zip(&sig).map(|(v, s)| v * s).collect();
        let out = Tensor::new(xv.shape().to_vec(), data).expect("shape");
        let rg = self.rg(x);
        self.push(out, Op::Silu(x, sig), rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.map(x, Op::Sigmoid(x), sigmoid)
    }

    /// Gated linear unit over the column halves: `a ⊙ σ(b)`.
    pub fn glu(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let (rows, cols) = dims2(xv);
        if cols % 2 != 0 {
            return Err(Error::dim(format!("glu needs an even width, got {cols}")));
        }
        let h = cols / 2;
        let mut out = Vec::with_capacity(rows * h);
        for row in xv.data().chunks_exact(cols) {
            for j in 0..h {
                out.push(row[j] * sigmoid(row[h + j]));
            }
        }
        let out = Tensor::new(vec![rows, h], out)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::Glu(x), rg))
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        self.scaled_softmax_rows(x, 1.0)
    }

    /// Row softmax of `scale · x`.
    pub fn scaled_softmax_rows(&mut self, x: Var, scale: f64) -> Result<Var> {
        let xv = self.value(x);
        if !xv.is_finite() {
            return Err(Error::Numeric("softmax of non-finite logits".into()));
        }
        let n = xv.cols();
        let mut out: Vec<f64> = xv.data().iter().map(|v| v * scale).collect();
        out.chunks_exact_mut(n).for_each(kernels::softmax_in_place);
        let out = Tensor::new(xv.shape().to_vec(), out)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::SoftmaxRows(x, scale), rg))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let xv = self.value(x);
        let n = xv.cols();
        if self.value(gamma).len() != n || self.value(beta).len() != n {
            return Err(Error::dim(format!("layer norm params for width {n}")));
        }
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let rows = xv.rows();
        let mut xhat = Vec::with_capacity(xv.len());
        let mut inv_std = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(xv.len());
        for row in xv.data().chunks_exact(n) {
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std.push(is);
            for j in 0..n {
                let h = (row[j] - mean) * is;
                xhat.push(h);
                out.push(h * g[j] + b[j]);
            }
        }
        let out = Tensor::new(xv.shape().to_vec(), out)?;
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, width: usize) -> Result<Var> {
        let xv = self.value(x);
        let (rows, cols) = dims2(xv);
        if start + width > cols {
            return Err(Error::dim(format!(
                "column slice {start}..{} of width {cols}",
                start + width
            )));
        }
        let mut out = Vec::with_capacity(rows * width);
        for row in xv.data().chunks_exact(cols) {
            out.extend_from_slice(&row[start..start + width]);
        }
        let out = Tensor::new(vec![rows, width], out)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::SliceCols { x, start }, rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = parts
            .first()
            .map(|p| self.value(*p).rows())
            .ok_or_else(|| Error::dim("concat of nothing"))?;
        if parts.iter().any(|p| self.value(*p).rows() != rows) {
            return Err(Error::dim("concat_cols row mismatch"));
        }
        let total: usize = parts.iter().map(|p| self.value(*p).cols()).sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for p in parts {
                out.extend_from_slice(self.value(*p).row(r));
            }
        }
        let out = Tensor::new(vec![rows, total], out)?;
        let rg = parts.iter().any(|p| self.rg(*p));
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), rg))
    }

    /// Strided 1-D convolution, `x[len×cin]`, `w[(kernel·cin)×cout]`, `b[cout]`.
    pub fn conv1d(
        &mut self,
        x: Var,
        w: Var,
        b: Var,
        kernel: usize,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let (len, cin) = dims2(self.value(x));
        let (wr, cout) = dims2(self.value(w));
        if wr != kernel * cin || self.value(b).len() != cout || stride == 0 {
            return Err(Error::dim(format!(
                "conv1d weight {:?} for kernel {kernel} × {cin} channels",
                self.value(w).shape()
            )));
        }
        let out_len = conv_out_len(len, kernel, stride, pad);
        let cols = im2col(self.value(x).data(), len, cin, kernel, stride, pad, out_len);
        let mut out = vec![0.0; out_len * cout];
        let bias = self.value(b).data();
        for row in out.chunks_exact_mut(cout) {
            row.copy_from_slice(bias);
        }
        gemm(out_len, wr, cout, &cols, false, self.value(w).data(), false, &mut out, true);
        let out = Tensor::new(vec![out_len, cout], out)?;
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        Ok(self.push(
            out,
            Op::Conv1d {
                x,
                w,
                b,
                kernel,
                stride,
                pad,
                cols,
            },
            rg,
        ))
    }

    /// Transposed convolution producing exactly `len·stride` frames:
    /// `x[len×cin]`, `w[cin×(kernel·cout)]`, `(kernel−stride)/2` cropped per side.
    pub fn conv_transpose1d(
        &mut self,
        x: Var,
        w: Var,
        b: Var,
        kernel: usize,
        stride: usize,
    ) -> Result<Var> {
        let (len, cin) = dims2(self.value(x));
        let (wr, wc) = dims2(self.value(w));
        if wr != cin || kernel < stride || (kernel - stride) % 2 != 0 || wc % kernel != 0 {
            return Err(Error::dim(format!(
                "conv_transpose1d weight {:?} for kernel {kernel}, stride {stride}, {cin} channels",
                self.value(w).shape()
            )));
        }
        let cout = wc / kernel;
        if self.value(b).len() != cout {
            return Err(Error::dim("conv_transpose1d bias width"));
        }
        let crop = (kernel - stride) / 2;
        let out_len = len * stride;
        let mut full = vec![0.0; len * wc];
        gemm(len, cin, wc, self.value(x).data(), false, self.value(w).data(), false, &mut full, false);
        let mut out = vec![0.0; out_len * cout];
        col2im_add(&full, &mut out, out_len, cout, kernel, stride, crop, len);
        let bias = self.value(b).data();
        for row in out.chunks_exact_mut(cout) {
            row.iter_mut().zip(bias).for_each(|(o, b)| *o += b);
        }
        let out = Tensor::new(vec![out_len, cout], out)?;
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        Ok(self.push(
            out,
            Op::ConvTranspose1d {
                x,
                w,
                b,
                kernel,
                stride,
                crop,
            },
            rg,
        ))
    }

    /// Per-channel "same" convolution along time, `x[T×ch]`, `w[ch×kernel]`, odd kernel.
    pub fn depthwise_conv1d(&mut self, x: Var, w: Var, b: Var, kernel: usize) -> Result<Var> {
        let (len, ch) = dims2(self.value(x));
        if kernel % 2 == 0 || self.value(w).shape() != [ch, kernel] || self.value(b).len() != ch {
            return Err(Error::dim(format!(
                "depthwise weight {:?} for {ch} channels, kernel {kernel}",
                self.value(w).shape()
            )));
        }
        let pad = kernel / 2;
        let xd = self.value(x).data();
        let wd = self.value(w).data();
        let bd = self.value(b).data();
        let mut out = vec![0.0; len * ch];
        for t in 0..len {
            let row = &mut out[t * ch..(t + 1) * ch];
            row.copy_from_slice(bd);
            for j in 0..kernel {
                let src = t as isize + j as isize - pad as isize;
                if src < 0 || src as usize >= len {
                    continue;
                }
                let xs = &xd[src as usize * ch..(src as usize + 1) * ch];
                for c in 0..ch {
                    row[c] += wd[c * kernel + j] * xs[c];
                }
            }
        }
        let out = Tensor::new(vec![len, ch], out)?;
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        Ok(self.push(out, Op::DepthwiseConv1d { x, w, b, kernel }, rg))
    }

    fn reduce(&mut self, x: Var, op: Op, v: f64) -> Var {
        let rg = self.rg(x);
        self.push(Tensor::scalar(v), op, rg)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let v = self.value(x).data().iter().sum();
        self.reduce(x, Op::Sum(x), v)
    }

    /// Entrywise L1 norm.
    pub fn sum_abs(&mut self, x: Var) -> Var {
        let v = self.value(x).data().iter().map(|v| v.abs()).sum();
        self.reduce(x, Op::SumAbs(x), v)
    }

    pub fn sum_squares(&mut self, x: Var) -> Var {
        let v = self.value(x).data().iter().map(|v| v * v).sum();
        self.reduce(x, Op::SumSquares(x), v)
    }

    /// Frobenius / Euclidean norm over all entries.
    pub fn norm2(&mut self, x: Var) -> Var {
        let v = self
            .value(x)
            .data()
            .iter()
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt();
        self.reduce(x, Op::Norm2(x), v)
    }

    /// Σ_t −log softmax(logits[t])[targets[t]], via log-sum-exp.
    pub fn cross_entropy_sum(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        let (rows, c) = dims2(lv);
        if targets.len() != rows {
            return Err(Error::dim(format!(
                "{} targets for {rows} rows",
                targets.len()
            )));
        }
        if let Some(bad) = targets.iter().find(|&&t| t >= c) {
            return Err(Error::Corruption(format!("target token {bad} outside [0, {c})")));
        }
        if !lv.is_finite() {
            return Err(Error::Numeric("cross entropy of non-finite logits".into()));
        }
        let mut loss = 0.0;
        let mut probs = lv.data().to_vec();
        for (row, &t) in lv.data().chunks_exact(c).zip(targets) {
            loss += kernels::log_sum_exp(row) - row[t];
        }
        probs.chunks_exact_mut(c).for_each(kernels::softmax_in_place);
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropySum {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            rg,
        ))
    }

    pub fn custom(&mut self, x: Var, output: Tensor, op: Box<dyn CustomOp>) -> Var {
        let rg = self.rg(x);
        self.push(output, Op::Custom { x, op }, rg)
    }

    /// Back-propagates from the scalar `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if loss.0 >= self.nodes.len() {
            return Err(Error::State(
                "backward called before a forward pass was recorded".into(),
            ));
        }
        let lv = &self.nodes[loss.0].value;
        if lv.len() != 1 {
            return Err(Error::dim(format!(
                "loss must be a scalar, got shape {:?}",
                lv.shape()
            )));
        }
        if !lv.data()[0].is_finite() {
            return Err(Error::Numeric(format!("loss is {}", lv.data()[0])));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if self.nodes[i].requires_grad {
                self.propagate(i, &g, &mut grads);
            }
            grads[i] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    /// Adds parameter-leaf gradients into the store's gradient buffers.
    pub fn accumulate_param_grads(&self, ps: &mut ParamStore) {
        for (&id, &v) in &self.param_leaves {
            if let Some(g) = self.grad(v) {
                let dst = ps.get_mut(id).grad_mut();
                dst.iter_mut().zip(g).for_each(|(d, s)| *d += s);
            }
        }
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let val = |v: Var| &nodes[v.0].value;
        // Lazily materialised gradient slot for a node that needs one.
        let mut slot = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !nodes[v.0].requires_grad {
                return;
            }
            let buf = grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.len()]);
            f(buf);
        };
        let out = &nodes[i].value;
        match &nodes[i].op {
            Op::Constant | Op::Input | Op::Param => {}
            Op::MatMul(a, b) => {
                let (m, k) = dims2(val(*a));
                let n = val(*b).cols();
                slot(*a, &mut |ga| gemm(m, n, k, g, false, val(*b).data(), true, ga, true));
                slot(*b, &mut |gb| gemm(k, m, n, val(*a).data(), true, g, false, gb, true));
            }
            Op::MatMulNT(a, b) => {
                let (m, k) = dims2(val(*a));
                let n = val(*b).rows();
                slot(*a, &mut |ga| gemm(m, n, k, g, false, val(*b).data(), false, ga, true));
                slot(*b, &mut |gb| gemm(n, m, k, g, true, val(*a).data(), false, gb, true));
            }
            Op::AddBias(x, b) => {
                let n = out.cols();
                slot(*x, &mut |gx| gx.iter_mut().zip(g).for_each(|(d, s)| *d += s));
                slot(*b, &mut |gb| {
                    for row in g.chunks_exact(n) {
                        gb.iter_mut().zip(row).for_each(|(d, s)| *d += s);
                    }
                });
            }
            Op::Add(a, b) => {
                slot(*a, &mut |ga| ga.iter_mut().zip(g).for_each(|(d, s)| *d += s));
                slot(*b, &mut |gb| gb.iter_mut().zip(g).for_each(|(d, s)| *d += s));
            }
            Op::Sub(a, b) => {
                slot(*a, &mut |ga| ga.iter_mut().zip(g).for_each(|(d, s)| *d += s));
                slot(*b, &mut |gb| gb.iter_mut().zip(g).for_each(|(d, s)| *d -= s));
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (val(*a).data(), val(*b).data());
                slot(*a, &mut |ga| {
                    for j in 0..ga.len() {
                        ga[j] += g[j] * bd[j];
                    }
                });
                slot(*b, &mut |gb| {
                    for j in 0..gb.len() {
                        gb[j] += g[j] * ad[j];
                    }
                });
            }
            Op::Scale(x, s) => {
                slot(*x, &mut |gx| gx.iter_mut().zip(g).for_each(|(d, v)| *d += v * s));
            }
            Op::Elu(x) => {
                let (xd, yd) = (val(*x).data(), out.data());
                slot(*x, &mut |gx| {
                    for j in 0..gx.len() {
                        let d = if xd[j] > 0.0 { 1.0 } else { yd[j] + 1.0 };
                        gx[j] += g[j] * d;
                    }
                });
            }
            Op::Silu(x, sig) => {
                let xd = val(*x).data();
                slot(*x, &mut |gx| {
                    for j in 0..gx.len() {
                        let s = sig[j];
                        gx[j] += g[j] * (s + xd[j] * s * (1.0 - s));
                    }
                });
            }
            Op::Sigmoid(x) => {
                let yd = out.data();
                slot(*x, &mut |gx| {
                    for j in 0..gx.len() {
                        gx[j] += g[j] * yd[j] * (1.0 - yd[j]);
                    }
                });
            }
            Op::Glu(x) => {
                let xv = val(*x);
                let cols = xv.cols();
                let h = cols / 2;
                slot(*x, &mut |gx| {
                    for (r, row) in xv.data().chunks_exact(cols).enumerate() {
                        for j in 0..h {
                            let s = sigmoid(row[h + j]);
                            let go = g[r * h + j];
                            gx[r * cols + j] += go * s;
                            gx[r * cols + h + j] += go * row[j] * s * (1.0 - s);
                        }
                    }
                });
            }
            Op::SoftmaxRows(x, scale) => {
                let n = out.cols();
                slot(*x, &mut |gx| {
                    for ((y, gr), gxr) in out
                        .data()
                        .chunks_exact(n)
                        .zip(g.chunks_exact(n))
                        .zip(gx.chunks_exact_mut(n))
                    {
                        let dot: f64 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..n {
                            gxr[j] += scale * y[j] * (gr[j] - dot);
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let n = out.cols();
                let gam = val(*gamma).data();
                slot(*x, &mut |gx| {
                    for (r, &is) in inv_std.iter().enumerate() {
                        let gr = &g[r * n..(r + 1) * n];
                        let hr = &xhat[r * n..(r + 1) * n];
                        let mut sum_d = 0.0;
                        let mut sum_dh = 0.0;
                        for j in 0..n {
                            let d = gr[j] * gam[j];
                            sum_d += d;
                            sum_dh += d * hr[j];
                        }
                        let nf = n as f64;
                        for j in 0..n {
                            let d = gr[j] * gam[j];
                            gx[r * n + j] += is / nf * (nf * d - sum_d - hr[j] * sum_dh);
                        }
                    }
                });
                slot(*gamma, &mut |gg| {
                    for (gr, hr) in g.chunks_exact(n).zip(xhat.chunks_exact(n)) {
                        for j in 0..n {
                            gg[j] += gr[j] * hr[j];
                        }
                    }
                });
                slot(*beta, &mut |gb| {
                    for gr in g.chunks_exact(n) {
                        gb.iter_mut().zip(gr).for_each(|(d, s)| *d += s);
                    }
                });
            }
            Op::SliceCols { x, start } => {
                let w = out.cols();
                let cols = val(*x).cols();
                slot(*x, &mut |gx| {
                    for (r, gr) in g.chunks_exact(w).enumerate() {
                        let dst = &mut gx[r * cols + start..r * cols + start + w];
                        dst.iter_mut().zip(gr).for_each(|(d, s)| *d += s);
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let total = out.cols();
                let mut offset = 0;
                for p in parts {
                    let w = val(*p).cols();
                    slot(*p, &mut |gp| {
                        for (r, gr) in g.chunks_exact(total).enumerate() {
                            let dst = &mut gp[r * w..(r + 1) * w];
                            dst.iter_mut()
                                .zip(&gr[offset..offset + w])
                                .for_each(|(d, s)| *d += s);
                        }
                    });
                    offset += w;
                }
            }
            Op::Conv1d {
                x,
                w,
                b,
                kernel,
                stride,
                pad,
                cols,
            } => {
                let (len, cin) = dims2(val(*x));
                let (out_len, cout) = dims2(out);
                let width = kernel * cin;
                slot(*w, &mut |gw| gemm(width, out_len, cout, cols, true, g, false, gw, true));
                slot(*b, &mut |gb| {
                    for gr in g.chunks_exact(cout) {
                        gb.iter_mut().zip(gr).for_each(|(d, s)| *d += s);
                    }
                });
                slot(*x, &mut |gx| {
                    let mut gcols = vec![0.0; out_len * width];
                    gemm(out_len, cout, width, g, false, val(*w).data(), true, &mut gcols, false);
                    col2im_add(&gcols, gx, len, cin, *kernel, *stride, *pad, out_len);
                });
            }
            Op::ConvTranspose1d {
                x,
                w,
                b,
                kernel,
                stride,
                crop,
            } => {
                let (len, cin) = dims2(val(*x));
                let (out_len, cout) = dims2(out);
                let wc = kernel * cout;
                let gfull = im2col(g, out_len, cout, *kernel, *stride, *crop, len);
                slot(*x, &mut |gx| gemm(len, wc, cin, &gfull, false, val(*w).data(), true, gx, true));
                slot(*w, &mut |gw| gemm(cin, len, wc, val(*x).data(), true, &gfull, false, gw, true));
                slot(*b, &mut |gb| {
                    for gr in g.chunks_exact(cout) {
                        gb.iter_mut().zip(gr).for_each(|(d, s)| *d += s);
                    }
                });
            }
            Op::DepthwiseConv1d { x, w, b, kernel } => {
                let (len, ch) = dims2(val(*x));
                let pad = kernel / 2;
                let (xd, wd) = (val(*x).data(), val(*w).data());
                let taps = |t: usize, j: usize| {
                    let src = t as isize + j as isize - pad as isize;
                    (src >= 0 && (src as usize) < len).then_some(src as usize)
                };
                slot(*x, &mut |gx| {
                    for t in 0..len {
                        for j in 0..*kernel {
                            let Some(s) = taps(t, j) else { continue };
                            for c in 0..ch {
                                gx[s * ch + c] += g[t * ch + c] * wd[c * kernel + j];
                            }
                        }
                    }
                });
                slot(*w, &mut |gw| {
                    for t in 0..len {
                        for j in 0..*kernel {
                            let Some(s) = taps(t, j) else { continue };
                            for c in 0..ch {
                                gw[c * kernel + j] += g[t * ch + c] * xd[s * ch + c];
                            }
                        }
                    }
                });
                slot(*b, &mut |gb| {
                    for gr in g.chunks_exact(ch) {
                        gb.iter_mut().zip(gr).for_each(|(d, s)| *d += s);
                    }
                });
            }
            Op::Sum(x) => {
                slot(*x, &mut |gx| gx.iter_mut().for_each(|d| *d += g[0]));
            }
            Op::SumAbs(x) => {
                let xd = val(*x).data();
                slot(*x, &mut |gx| {
                    for j in 0..gx.len() {
                        let s = if xd[j] > 0.0 {
                            1.0
                        } else if xd[j] < 0.0 {
                            -1.0
                        } else {
                            0.0
                        };
                        gx[j] += g[0] * s;
                    }
                });
            }
            Op::SumSquares(x) => {
                let xd = val(*x).data();
                slot(*x, &mut |gx| {
                    for j in 0..gx.len() {
                        gx[j] += g[0] * 2.0 * xd[j];
                    }
                });
            }
            Op::Norm2(x) => {
                let norm = out.data()[0];
                if norm > 0.0 {
                    let xd = val(*x).data();
                    slot(*x, &mut |gx| {
                        for j in 0..gx.len() {
                            gx[j] += g[0] * xd[j] / norm;
                        }
                    });
                }
            }
            Op::CrossEntropySum {
                logits,
                targets,
                probs,
            } => {
                let c = val(*logits).cols();
                slot(*logits, &mut |gl| {
                    for (r, &t) in targets.iter().enumerate() {
                        for j in 0..c {
                            let onehot = if j == t { 1.0 } else { 0.0 };
                            gl[r * c + j] += g[0] * (probs[r * c + j] - onehot);
                        }
                    }
                });
            }
            Op::Custom { x, op } => {
                slot(*x, &mut |gx| op.backward(val(*x), out, g, gx));
            }
        }
    }
}
