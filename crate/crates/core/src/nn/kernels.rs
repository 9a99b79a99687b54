//! Raw dense kernels over row-major slices. GEMM goes through `matrixmultiply`;
//! the convolution helpers lower to it via im2col.

/// `c = (accumulate ? c : 0) + op(a) · op(b)` where `op(a)` is m×k and `op(b)` is k×n.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    assert_eq!(a.len(), m * k, "gemm: lhs length");
    assert_eq!(b.len(), k * n, "gemm: rhs length");
    assert_eq!(c.len(), m * n, "gemm: output length");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c.iter_mut().for_each(|v| *v = 0.0);
        }
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the asserts above pin every slice to the extent implied by the
    // dimensions and strides handed to dgemm.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Output length of a strided convolution with symmetric zero padding.
pub fn conv_out_len(len: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    let padded = len + 2 * pad;
    if padded < kernel {
        0
    } else {
        (padded - kernel) / stride + 1
    }
}

/// Gathers `x[len×ch]` into `cols[out_len × (kernel·ch)]`, entry `(o, j·ch + c)` being
/// `x[o·stride + j − pad][c]` or zero outside the signal.
pub fn im2col(
    x: &[f64],
    len: usize,
    ch: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
    out_len: usize,
) -> Vec<f64> {
    let width = kernel * ch;
    let mut cols = vec![0.0; out_len * width];
    for o in 0..out_len {
        let row = &mut cols[o * width..(o + 1) * width];
        for j in 0..kernel {
            let src = (o * stride + j) as isize - pad as isize;
            if src < 0 || src as usize >= len {
                continue;
            }
            let src = src as usize;
            row[j * ch..(j + 1) * ch].copy_from_slice(&x[src * ch..(src + 1) * ch]);
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatter-adds `cols` back into `x`.
#[allow(clippy::too_many_arguments)]
pub fn col2im_add(
    cols: &[f64],
    x: &mut [f64],
    len: usize,
    ch: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
    out_len: usize,
) {
    let width = kernel * ch;
    for o in 0..out_len {
        let row = &cols[o * width..(o + 1) * width];
        for j in 0..kernel {
            let dst = (o * stride + j) as isize - pad as isize;
            if dst < 0 || dst as usize >= len {
                continue;
            }
            let dst = dst as usize;
            for (d, s) in x[dst * ch..(dst + 1) * ch]
                .iter_mut()
                .zip(&row[j * ch..(j + 1) * ch])
            {
                *d += s;
            }
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// In-place numerically stable softmax of one row.
pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// log Σ exp(row), stable.
pub fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Index of the largest entry; ties resolve to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}
