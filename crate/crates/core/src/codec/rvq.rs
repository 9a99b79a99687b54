//! Residual vector quantization over `K` codebooks of `C × D` code vectors.

use std::ops::RangeInclusive;

use rand::Rng;

use super::tokens::TokenMatrix;
use crate::error::{Error, Result};
use crate::nn::checkpoint::{Checkpoint, Record};
use crate::nn::Tensor;

const LAPLACE_EPS: f64 = 1e-5;
/// Codes whose EMA cluster size falls below this are reseeded.
pub const DEAD_CODE_SIZE: f64 = 1e-3;

/// Code vectors plus the EMA k-means statistics that train them.
#[derive(Clone, Debug, PartialEq)]
pub struct Codebooks {
    stages: usize,
    size: usize,
    dim: usize,
    vectors: Vec<Vec<f64>>,
    ema_size: Vec<Vec<f64>>,
    ema_sum: Vec<Vec<f64>>,
}

impl Codebooks {
    /// Builds from `stages` row-major `size × dim` tables.
    pub fn from_vectors(size: usize, dim: usize, vectors: Vec<Vec<f64>>) -> Result<Self> {
        if vectors.is_empty() || size == 0 || dim == 0 {
            return Err(Error::dim("codebooks need ≥1 stage, size and width"));
        }
        for (j, v) in vectors.iter().enumerate() {
            if v.len() != size * dim {
                return Err(Error::dim(format!(
                    "codebook {j} has {} values, expected {size}×{dim}",
                    v.len()
                )));
            }
            if v.iter().any(|x| !x.is_finite()) {
                return Err(Error::Numeric(format!("codebook {j} has a non-finite entry")));
            }
        }
        let ema_size = vec![vec![1.0; size]; vectors.len()];
        let ema_sum = vectors.clone();
        Ok(Self {
            stages: vectors.len(),
            size,
            dim,
            vectors,
            ema_size,
            ema_sum,
        })
    }

    pub fn random(stages: usize, size: usize, dim: usize, scale: f64, rng: &mut impl Rng) -> Self {
        let vectors = (0..stages)
            .map(|_| (0..size * dim).map(|_| rng.random_range(-scale..scale)).collect())
            .collect();
        Self::from_vectors(size, dim, vectors).expect("valid shape")
    }

    pub fn stages(&self) -> usize {
        self.stages
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Row-major `C × D` table of stage `j` (0-based).
    pub fn table(&self, j: usize) -> &[f64] {
        &self.vectors[j]
    }

    pub fn code(&self, j: usize, c: usize) -> &[f64] {
        &self.vectors[j][c * self.dim..(c + 1) * self.dim]
    }

    pub fn ema_sizes(&self, j: usize) -> &[f64] {
        &self.ema_size[j]
    }

    /// Index of the code in stage `j` closest to `r`; ties go to the lowest index.
    pub fn nearest(&self, j: usize, r: &[f64]) -> usize {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for (c, e) in self.vectors[j].chunks_exact(self.dim).enumerate() {
            let d: f64 = r.iter().zip(e).map(|(a, b)| (a - b) * (a - b)).sum();
            if d < best_d {
                best_d = d;
                best = c;
            }
        }
        best
    }

    /// Replaces stage `j` with the given rows (cycled if fewer than `C`).
    pub fn seed_stage(&mut self, j: usize, rows: &[&[f64]]) {
        if rows.is_empty() {
            return;
        }
        for c in 0..self.size {
            let src = rows[c % rows.len()];
            self.vectors[j][c * self.dim..(c + 1) * self.dim].copy_from_slice(src);
        }
        self.ema_sum[j].copy_from_slice(&self.vectors[j]);
        self.ema_size[j].iter_mut().for_each(|s| *s = 1.0);
    }

    /// One EMA k-means step for stage `j` from the batch statistics, then
    /// reseeds dead codes from `pool` rows.
    pub fn ema_update(&mut self, j: usize, stats: &StageStats, decay: f64, pool: &[&[f64]], rng: &mut impl Rng) {
        let (c_n, d) = (self.size, self.dim);
        for c in 0..c_n {
            self.ema_size[j][c] = decay * self.ema_size[j][c] + (1.0 - decay) * stats.counts[c];
            for i in 0..d {
                let k = c * d + i;
                self.ema_sum[j][k] = decay * self.ema_sum[j][k] + (1.0 - decay) * stats.sums[k];
            }
        }
        let total: f64 = self.ema_size[j].iter().sum();
        for c in 0..c_n {
            let smoothed = (self.ema_size[j][c] + LAPLACE_EPS) / (total + c_n as f64 * LAPLACE_EPS) * total;
            for i in 0..d {
                self.vectors[j][c * d + i] = self.ema_sum[j][c * d + i] / smoothed;
            }
        }
        if pool.is_empty() {
            return;
        }
        for c in 0..c_n {
            if self.ema_size[j][c] < DEAD_CODE_SIZE {
                let src = pool[rng.random_range(0..pool.len())];
                self.vectors[j][c * d..(c + 1) * d].copy_from_slice(src);
                self.ema_sum[j][c * d..(c + 1) * d].copy_from_slice(src);
                self.ema_size[j][c] = 1.0;
            }
        }
    }

    pub fn write_records(&self, prefix: &str, ckpt: &mut Checkpoint) {
        for j in 0..self.stages {
            for (kind, data, cols) in [
                ("vectors", &self.vectors[j], self.dim),
                ("ema_size", &self.ema_size[j], 1),
                ("ema_sum", &self.ema_sum[j], self.dim),
            ] {
                let shape = if cols == 1 { vec![self.size] } else { vec![self.size, cols] };
                ckpt.push(Record {
                    name: format!("{prefix}{j}.{kind}"),
                    shape,
                    data: data.clone(),
                });
            }
        }
    }

    pub fn read_records(prefix: &str, ckpt: &Checkpoint, stages: usize, size: usize, dim: usize) -> Result<Self> {
        let fetch = |j: usize, kind: &str, shape: &[usize]| -> Result<Vec<f64>> {
            let name = format!("{prefix}{j}.{kind}");
            let rec = ckpt
                .get(&name)
                .ok_or_else(|| Error::Corruption(format!("checkpoint lacks {name}")))?;
            if rec.shape != shape {
                return Err(Error::Corruption(format!("{name}: shape {:?}, expected {shape:?}", rec.shape)));
            }
            if rec.data.iter().any(|v| !v.is_finite()) {
                return Err(Error::Corruption(format!("{name} holds a non-finite value")));
            }
            Ok(rec.data.clone())
        };
        let mut cb = Self::from_vectors(
            size,
            dim,
            (0..stages)
                .map(|j| fetch(j, "vectors", &[size, dim]))
                .collect::<Result<_>>()?,
        )?;
        for j in 0..stages {
            cb.ema_size[j] = fetch(j, "ema_size", &[size])?;
            cb.ema_sum[j] = fetch(j, "ema_sum", &[size, dim])?;
            if cb.ema_size[j].iter().any(|&s| s < 0.0) {
                return Err(Error::Corruption(format!("{prefix}{j}.ema_size is negative")));
            }
        }
        Ok(cb)
    }
}

/// Per-code assignment counts and residual sums for one stage over a batch.
#[derive(Clone, Debug)]
pub struct StageStats {
    pub counts: Vec<f64>,
    pub sums: Vec<f64>,
}

impl StageStats {
    pub fn new(size: usize, dim: usize) -> Self {
        Self {
            counts: vec![0.0; size],
            sums: vec![0.0; size * dim],
        }
    }

    pub fn add(&mut self, code: usize, residual: &[f64]) {
        let d = residual.len();
        self.counts[code] += 1.0;
        self.sums[code * d..(code + 1) * d]
            .iter_mut()
            .zip(residual)
            .for_each(|(s, r)| *s += r);
    }
}

/// Tokens, summed code vectors and leftover residual of a quantization.
#[derive(Clone, Debug, PartialEq)]
pub struct Quantized {
    pub tokens: TokenMatrix,
    pub quantized: Tensor,
    pub residual: Tensor,
    /// Input to each stage, `stage_inputs[j]` is `r_j` as a `T × D` buffer.
    pub stage_inputs: Vec<Vec<f64>>,
}

/// Greedy residual quantization of `latents [T × D]` through the first `k` stages.
pub fn rvq_quantize(latents: &Tensor, codebooks: &Codebooks, k: usize) -> Result<Quantized> {
    let d = codebooks.dim();
    if latents.shape().len() != 2 || latents.cols() != d {
        return Err(Error::dim(format!(
            "latents {:?} for codebooks of width {d}",
            latents.shape()
        )));
    }
    if k == 0 || k > codebooks.stages() {
        return Err(Error::dim(format!("{k} stages requested of {}", codebooks.stages())));
    }
    let frames = latents.rows();
    let mut residual = latents.data().to_vec();
    let mut quantized = vec![0.0; frames * d];
    let mut tokens = vec![0u16; frames * k];
    let mut stage_inputs = Vec::with_capacity(k);
    for j in 0..k {
        stage_inputs.push(residual.clone());
        for t in 0..frames {
            let r = &mut residual[t * d..(t + 1) * d];
            let c = codebooks.nearest(j, r);
            tokens[t * k + j] = c as u16;
            let e = codebooks.code(j, c);
            r.iter_mut().zip(e).for_each(|(r, e)| *r -= e);
            quantized[t * d..(t + 1) * d]
                .iter_mut()
                .zip(e)
                .for_each(|(q, e)| *q += e);
        }
    }
    Ok(Quantized {
        tokens: TokenMatrix::new(frames, k, codebooks.size(), tokens)?,
        quantized: Tensor::new(vec![frames, d], quantized)?,
        residual: Tensor::new(vec![frames, d], residual)?,
        stage_inputs,
    })
}

/// `Σ_{j ∈ stages} codebook_j[token[t, j]]` per frame; stages are 1-based.
pub fn lookup_sum(tokens: &TokenMatrix, codebooks: &Codebooks, stages: RangeInclusive<usize>) -> Result<Tensor> {
    let (a, b) = (*stages.start(), *stages.end());
    if a == 0 || a > b || b > tokens.groups() || b > codebooks.stages() {
        return Err(Error::dim(format!(
            "stage range {a}..={b} for {} token groups and {} codebooks",
            tokens.groups(),
            codebooks.stages()
        )));
    }
    let d = codebooks.dim();
    let mut out = vec![0.0; tokens.frames() * d];
    for t in 0..tokens.frames() {
        let row = &mut out[t * d..(t + 1) * d];
        for j in a - 1..b {
            let c = tokens.get(t, j);
            if c >= codebooks.size() {
                return Err(Error::Corruption(format!(
                    "token {c} at frame {t}, group {} outside [0, {})",
                    j + 1,
                    codebooks.size()
                )));
            }
            row.iter_mut().zip(codebooks.code(j, c)).for_each(|(o, e)| *o += e);
        }
    }
    Tensor::new(vec![tokens.frames(), d], out)
}

/// `β · mean((z − q)²)`; `q` is treated as a constant.
pub fn commitment_loss(latents: &Tensor, quantized: &Tensor, beta: f64) -> f64 {
    let n = latents.len().max(1) as f64;
    beta * latents
        .data()
        .iter()
        .zip(quantized.data())
        .map(|(z, q)| (z - q) * (z - q))
        .sum::<f64>()
        / n
}
