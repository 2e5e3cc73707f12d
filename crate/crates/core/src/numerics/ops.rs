//! Matrix products, normalisations and pointwise activations with their
//! backward rules.
//!
//! Every reduction accumulates in a fixed row-major order, so results are
//! bitwise reproducible for a given build.

use crate::error::{shape_err, Result};

use super::Tensor;

/// `c += a · b` on raw row-major buffers (`a: m×k`, `b: k×n`, `c: m×n`).
///
/// Each output element starts from its current value and is accumulated
/// over `k` in increasing order.
pub fn gemm_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    gemm_strided(a, k, 1, b, c, m, k, n);
}

/// `c += aᵀ · b` (`a: r×m`, `b: r×n`, `c: m×n`), accumulated over `r` in order.
pub fn gemm_tn_acc(a: &[f64], b: &[f64], c: &mut [f64], r: usize, m: usize, n: usize) {
    debug_assert_eq!(a.len(), r * m);
    debug_assert_eq!(b.len(), r * n);
    debug_assert_eq!(c.len(), m * n);
    gemm_strided(a, 1, m, b, c, m, r, n);
}

const MR: usize = 4;
const NR: usize = 8;

/// `c[i, j] += Σ_p a[i·rs + p·cs] · b[p, j]`, `p` ascending.
#[allow(clippy::too_many_arguments)]
fn gemm_strided(a: &[f64], rs: usize, cs: usize, b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    let mut i = 0;
    while i + MR <= m {
        tile_rows::<MR>(a, rs, cs, b, c, i, k, n);
        i += MR;
    }
    while i < m {
        tile_rows::<1>(a, rs, cs, b, c, i, k, n);
        i += 1;
    }
}

#[allow(clippy::too_many_arguments)]
#[inline(always)]
fn tile_rows<const R: usize>(
    a: &[f64],
    rs: usize,
    cs: usize,
    b: &[f64],
    c: &mut [f64],
    i0: usize,
    k: usize,
    n: usize,
) {
    let mut j = 0;
    while j + NR <= n {
        let mut acc = [[0.0; NR]; R];
        for (r, row) in acc.iter_mut().enumerate() {
            row.copy_from_slice(&c[(i0 + r) * n + j..(i0 + r) * n + j + NR]);
        }
        for p in 0..k {
            let bv: &[f64; NR] = b[p * n + j..p * n + j + NR].try_into().unwrap();
            for (r, row) in acc.iter_mut().enumerate() {
                let av = a[(i0 + r) * rs + p * cs];
                for q in 0..NR {
                    row[q] += av * bv[q];
                }
            }
        }
        for (r, row) in acc.iter().enumerate() {
            c[(i0 + r) * n + j..(i0 + r) * n + j + NR].copy_from_slice(row);
        }
        j += NR;
    }
    for r in 0..R {
        for jj in j..n {
            let mut s = c[(i0 + r) * n + jj];
            for p in 0..k {
                s += a[(i0 + r) * rs + p * cs] * b[p * n + jj];
            }
            c[(i0 + r) * n + jj] = s;
        }
    }
}

fn dims2(t: &Tensor, what: &str) -> Result<(usize, usize)> {
    if t.rank() != 2 {
        return shape_err(format!("{what}: expected rank 2, got {:?}", t.shape()));
    }
    Ok((t.shape()[0], t.shape()[1]))
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = dims2(a, "matmul lhs")?;
    let (k2, n) = dims2(b, "matmul rhs")?;
    if k != k2 {
        return shape_err(format!("matmul inner dims {k} vs {k2}"));
    }
    let mut out = Tensor::zeros(&[m, n]);
    gemm_acc(a.data(), b.data(), out.data_mut(), m, k, n);
    Ok(out)
}

/// `aᵀ · b`.
pub fn matmul_tn(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (r, m) = dims2(a, "matmul_tn lhs")?;
    let (r2, n) = dims2(b, "matmul_tn rhs")?;
    if r != r2 {
        return shape_err(format!("matmul_tn row counts {r} vs {r2}"));
    }
    let mut out = Tensor::zeros(&[m, n]);
    gemm_tn_acc(a.data(), b.data(), out.data_mut(), r, m, n);
    Ok(out)
}

/// `a · bᵀ`.
pub fn matmul_nt(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    matmul(a, &b.transpose()?)
}

/// Numerically stable softmax along `axis`.
pub fn softmax(x: &Tensor, axis: usize) -> Result<Tensor> {
    let shape = x.shape();
    if axis >= shape.len() {
        return shape_err(format!("softmax axis {axis} out of range for {shape:?}"));
    }
    let n = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    let mut out = x.clone();
    let data = out.data_mut();
    let mut buf = vec![0.0; n];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |j: usize| (o * n + j) * inner + i;
            for (j, b) in buf.iter_mut().enumerate() {
                *b = data[idx(j)];
            }
            softmax_in_place(&mut buf);
            for (j, b) in buf.iter().enumerate() {
                data[idx(j)] = *b;
            }
        }
    }
    Ok(out)
}

pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Softmax over the last axis of a rank-2 tensor.
pub fn softmax_rows(x: &Tensor) -> Result<Tensor> {
    dims2(x, "softmax_rows")?;
    let mut out = x.clone();
    let c = out.cols();
    for row in out.data_mut().chunks_exact_mut(c) {
        softmax_in_place(row);
    }
    Ok(out)
}

/// Given `y = softmax(x)` row-wise and `dy`, returns `dx`.
pub fn softmax_rows_backward(y: &Tensor, dy: &Tensor) -> Result<Tensor> {
    y.check_same_shape(dy)?;
    let c = y.cols();
    let mut dx = Tensor::zeros_like(y);
    for ((yr, dyr), dxr) in y
        .data()
        .chunks_exact(c)
        .zip(dy.data().chunks_exact(c))
        .zip(dx.data_mut().chunks_exact_mut(c))
    {
        let dot: f64 = yr.iter().zip(dyr).map(|(a, b)| a * b).sum();
        for ((d, &yv), &g) in dxr.iter_mut().zip(yr).zip(dyr) {
            *d = yv * (g - dot);
        }
    }
    Ok(dx)
}

pub const LN_EPS: f64 = 1e-6;

/// Row statistics kept for the layer-norm backward pass.
#[derive(Debug, Clone)]
pub struct LayerNormCache {
    pub normalized: Tensor,
    pub rstd: Vec<f64>,
}

/// Layer normalisation over the last axis, no affine parameters.
pub fn layer_norm(x: &Tensor, eps: f64) -> Tensor {
    layer_norm_cached(x, eps).normalized
}

pub fn layer_norm_cached(x: &Tensor, eps: f64) -> LayerNormCache {
    let d = x.cols();
    let mut out = x.clone();
    let mut rstd = Vec::with_capacity(x.len() / d);
    for row in out.data_mut().chunks_exact_mut(d) {
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let r = 1.0 / (var + eps).sqrt();
        for v in row.iter_mut() {
            *v = (*v - mean) * r;
        }
        rstd.push(r);
    }
    LayerNormCache {
        normalized: out,
        rstd,
    }
}

pub fn layer_norm_backward(cache: &LayerNormCache, dy: &Tensor) -> Tensor {
    let y = &cache.normalized;
    let d = y.cols();
    let mut dx = Tensor::zeros_like(y);
    for (((yr, dyr), dxr), &r) in y
        .data()
        .chunks_exact(d)
        .zip(dy.data().chunks_exact(d))
        .zip(dx.data_mut().chunks_exact_mut(d))
        .zip(&cache.rstd)
    {
        let mean_g = dyr.iter().sum::<f64>() / d as f64;
        let mean_gy = dyr.iter().zip(yr).map(|(g, y)| g * y).sum::<f64>() / d as f64;
        for ((o, &g), &yv) in dxr.iter_mut().zip(dyr).zip(yr) {
            *o = r * (g - mean_g - yv * mean_gy);
        }
    }
    dx
}

pub fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

pub fn silu_grad(x: f64) -> f64 {
    let s = 1.0 / (1.0 + (-x).exp());
    s * (1.0 + x * (1.0 - s))
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// tanh-approximated GELU.
pub fn gelu(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let th = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * du
}
