//! Layers with explicit backward passes and a named-parameter visitor.

use crate::error::{shape_err, Result};
use crate::numerics::{
    gemm_acc, gemm_tn_acc, matmul, matmul_nt, softmax_in_place, softmax_rows_backward,
    SeededRng, Tensor,
};

/// Walks the named tensors of a parameter tree in a fixed order.
pub trait Parameters {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor));

    fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        self.visit("", &mut |n, t| out.push((n, t)));
        out
    }

    fn param_count(&self) -> usize {
        self.named().iter().map(|(_, t)| t.len()).sum()
    }

    fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        self.visit("", &mut |_, t| out.extend_from_slice(t.data()));
        out
    }

    fn assign_flat(&mut self, flat: &[f64]) {
        let mut off = 0;
        self.visit_mut("", &mut |_, t| {
            let n = t.len();
            t.data_mut().copy_from_slice(&flat[off..off + n]);
            off += n;
        });
        assert_eq!(off, flat.len(), "flat parameter length mismatch");
    }

    fn zero(&mut self) {
        self.visit_mut("", &mut |_, t| t.fill(0.0));
    }

    /// `self += other`, element-wise over matching trees.
    fn accumulate(&mut self, other: &Self)
    where
        Self: Sized,
    {
        let flat = other.flatten();
        let mut off = 0;
        self.visit_mut("", &mut |_, t| {
            for v in t.data_mut() {
                *v += flat[off];
                off += 1;
            }
        });
    }

    fn scale_all(&mut self, s: f64) {
        self.visit_mut("", &mut |_, t| {
            for v in t.data_mut() {
                *v *= s;
            }
        });
    }

    fn all_finite(&self) -> bool {
        let mut ok = true;
        self.visit("", &mut |_, t| ok &= t.all_finite());
        ok
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// `y = x·W + b` with `W: [in, out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
}

impl Linear {
    pub fn zeros(input: usize, output: usize, bias: bool) -> Self {
        Self {
            weight: Tensor::zeros(&[input, output]),
            bias: bias.then(|| Tensor::zeros(&[output])),
        }
    }

    /// Xavier-uniform weights, zero bias.
    pub fn xavier(rng: &mut SeededRng, input: usize, output: usize, bias: bool) -> Self {
        let a = (6.0 / (input + output) as f64).sqrt();
        let data = (0..input * output)
            .map(|_| (2.0 * rng.uniform() - 1.0) * a)
            .collect();
        Self {
            weight: Tensor::new(&[input, output], data).expect("dims"),
            bias: bias.then(|| Tensor::zeros(&[output])),
        }
    }

    pub fn normal(rng: &mut SeededRng, input: usize, output: usize, std: f64, bias: bool) -> Self {
        Self {
            weight: rng.normal_tensor(&[input, output], std),
            bias: bias.then(|| Tensor::zeros(&[output])),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn output_dim(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut y = matmul(x, &self.weight)?;
        if let Some(b) = &self.bias {
            let n = b.len();
            for row in y.data_mut().chunks_exact_mut(n) {
                for (v, bb) in row.iter_mut().zip(b.data()) {
                    *v += bb;
                }
            }
        }
        Ok(y)
    }

    /// Accumulates parameter gradients into `grad` and returns `dx`.
    pub fn backward(&self, x: &Tensor, dy: &Tensor, grad: &mut Linear) -> Result<Tensor> {
        self.backward_params(x, dy, grad)?;
        matmul_nt(dy, &self.weight)
    }

    /// Parameter gradients only.
    pub fn backward_params(&self, x: &Tensor, dy: &Tensor, grad: &mut Linear) -> Result<()> {
        let (r, i, o) = (x.rows(), self.input_dim(), self.output_dim());
        if dy.rows() != r || dy.cols() != o || x.cols() != i {
            return shape_err(format!(
                "linear backward: x {:?}, dy {:?}, W {:?}",
                x.shape(),
                dy.shape(),
                self.weight.shape()
            ));
        }
        gemm_tn_acc(x.data(), dy.data(), grad.weight.data_mut(), r, i, o);
        if let Some(gb) = &mut grad.bias {
            add_col_sums(gb, dy);
        }
        Ok(())
    }
}

impl Parameters for Linear {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        f(join(prefix, "weight"), &self.weight);
        if let Some(b) = &self.bias {
            f(join(prefix, "bias"), b);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        f(join(prefix, "weight"), &mut self.weight);
        if let Some(b) = &mut self.bias {
            f(join(prefix, "bias"), b);
        }
    }
}

/// `acc[j] += Σ_i m[i, j]`.
pub fn add_col_sums(acc: &mut Tensor, m: &Tensor) {
    let n = acc.len();
    for row in m.data().chunks_exact(n) {
        for (a, v) in acc.data_mut().iter_mut().zip(row) {
            *a += v;
        }
    }
}

/// `acc[j] += Σ_i a[i, j]·b[i, j]`.
pub fn add_col_dot(acc: &mut [f64], a: &Tensor, b: &Tensor) {
    let n = acc.len();
    for (ra, rb) in a.data().chunks_exact(n).zip(b.data().chunks_exact(n)) {
        for ((s, x), y) in acc.iter_mut().zip(ra).zip(rb) {
            *s += x * y;
        }
    }
}

/// Row-broadcast `x ⊙ scale + shift` where both are length `cols`.
pub fn modulate(x: &Tensor, scale_plus_one: &[f64], shift: &[f64]) -> Tensor {
    let mut y = x.clone();
    let n = scale_plus_one.len();
    for row in y.data_mut().chunks_exact_mut(n) {
        for ((v, s), b) in row.iter_mut().zip(scale_plus_one).zip(shift) {
            *v = *v * s + b;
        }
    }
    y
}

/// Row-broadcast `x ⊙ v`.
pub fn mul_cols(x: &Tensor, v: &[f64]) -> Tensor {
    let mut y = x.clone();
    for row in y.data_mut().chunks_exact_mut(v.len()) {
        for (a, b) in row.iter_mut().zip(v) {
            *a *= b;
        }
    }
    y
}

/// Columns `[h·dh, (h+1)·dh)` as a contiguous `[rows, dh]` tensor.
fn head_slice(t: &Tensor, h: usize, dh: usize) -> Tensor {
    let cols = t.cols();
    let mut out = Vec::with_capacity(t.rows() * dh);
    for row in t.data().chunks_exact(cols) {
        out.extend_from_slice(&row[h * dh..(h + 1) * dh]);
    }
    Tensor::new(&[t.rows(), dh], out).expect("dims")
}

fn head_scatter(dst: &mut Tensor, src: &Tensor, h: usize, dh: usize) {
    let cols = dst.cols();
    for (drow, srow) in dst.data_mut().chunks_exact_mut(cols).zip(src.data().chunks_exact(dh)) {
        drow[h * dh..(h + 1) * dh].copy_from_slice(srow);
    }
}

/// Per-head attention weights kept for the backward pass.
#[derive(Debug, Clone)]
pub struct AttentionCache {
    pub q: Tensor,
    pub k: Tensor,
    pub v: Tensor,
    /// `heads × [Lq, Lk]`
    pub probs: Vec<Tensor>,
    pub heads: usize,
}

/// Scaled dot-product attention with `heads` equal column groups.
/// `q: [Lq, D]`, `k, v: [Lk, D]`.
pub fn multi_head_attention(
    q: Tensor,
    k: Tensor,
    v: Tensor,
    heads: usize,
) -> Result<(Tensor, AttentionCache)> {
    let d = q.cols();
    if k.cols() != d || v.cols() != d || k.rows() != v.rows() || !d.is_multiple_of(heads) {
        return shape_err(format!(
            "attention: q {:?}, k {:?}, v {:?}, heads {heads}",
            q.shape(),
            k.shape(),
            v.shape()
        ));
    }
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let (lq, lk) = (q.rows(), k.rows());
    let mut out = Tensor::zeros(&[lq, d]);
    let mut probs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = head_slice(&q, h, dh);
        let kh = head_slice(&k, h, dh);
        let vh = head_slice(&v, h, dh);
        let mut s = matmul_nt(&qh, &kh)?;
        for row in s.data_mut().chunks_exact_mut(lk) {
            for x in row.iter_mut() {
                *x *= scale;
            }
            softmax_in_place(row);
        }
        let mut oh = Tensor::zeros(&[lq, dh]);
        gemm_acc(s.data(), vh.data(), oh.data_mut(), lq, lk, dh);
        head_scatter(&mut out, &oh, h, dh);
        probs.push(s);
    }
    Ok((
        out,
        AttentionCache {
            q,
            k,
            v,
            probs,
            heads,
        },
    ))
}

/// Returns `(dq, dk, dv)`.
pub fn multi_head_attention_backward(
    cache: &AttentionCache,
    dout: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let d = cache.q.cols();
    let heads = cache.heads;
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let (lq, lk) = (cache.q.rows(), cache.k.rows());
    let mut dq = Tensor::zeros(&[lq, d]);
    let mut dk = Tensor::zeros(&[lk, d]);
    let mut dv = Tensor::zeros(&[lk, d]);
    for h in 0..heads {
        let p = &cache.probs[h];
        let qh = head_slice(&cache.q, h, dh);
        let kh = head_slice(&cache.k, h, dh);
        let vh = head_slice(&cache.v, h, dh);
        let doh = head_slice(dout, h, dh);
        // dV = Pᵀ dO
        let mut dvh = Tensor::zeros(&[lk, dh]);
        gemm_tn_acc(p.data(), doh.data(), dvh.data_mut(), lq, lk, dh);
        // dP = dO Vᵀ
        let dp = matmul_nt(&doh, &vh)?;
        let ds = softmax_rows_backward(p, &dp)?.scale(scale);
        let mut dqh = Tensor::zeros(&[lq, dh]);
        gemm_acc(ds.data(), kh.data(), dqh.data_mut(), lq, lk, dh);
        let mut dkh = Tensor::zeros(&[lk, dh]);
        gemm_tn_acc(ds.data(), qh.data(), dkh.data_mut(), lq, lk, dh);
        head_scatter(&mut dq, &dqh, h, dh);
        head_scatter(&mut dk, &dkh, h, dh);
        head_scatter(&mut dv, &dvh, h, dh);
    }
    Ok((dq, dk, dv))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::grad_check;

    #[test]
    fn linear_backward_matches_differences() {
        let mut rng = SeededRng::new(4);
        let mut lin = Linear::xavier(&mut rng, 3, 5, true);
        lin.bias = Some(rng.normal_tensor(&[5], 0.5));
        let x = rng.normal_tensor(&[4, 3], 1.0);
        let w = rng.normal_tensor(&[4, 5], 1.0);
        let loss = |l: &Linear| -> f64 {
            let y = l.forward(&x).unwrap();
            y.data().iter().zip(w.data()).map(|(a, b)| a * b).sum()
        };
        let mut grad = Linear::zeros(3, 5, true);
        lin.backward(&x, &w, &mut grad).unwrap();
        let params = lin.flatten();
        let r = grad_check(
            |p| {
                let mut l = lin.clone();
                l.assign_flat(p);
                loss(&l)
            },
            &params,
            &grad.flatten(),
            1e-5,
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-8, "{r:?}");
    }

    #[test]
    fn attention_backward_matches_differences() {
        let mut rng = SeededRng::new(8);
        let q = rng.normal_tensor(&[3, 4], 1.0);
        let k = rng.normal_tensor(&[5, 4], 1.0);
        let v = rng.normal_tensor(&[5, 4], 1.0);
        let w = rng.normal_tensor(&[3, 4], 1.0);
        let loss = |q: &Tensor, k: &Tensor, v: &Tensor| -> f64 {
            let (o, _) = multi_head_attention(q.clone(), k.clone(), v.clone(), 2).unwrap();
            o.data().iter().zip(w.data()).map(|(a, b)| a * b).sum()
        };
        let (_, cache) = multi_head_attention(q.clone(), k.clone(), v.clone(), 2).unwrap();
        let (dq, dk, dv) = multi_head_attention_backward(&cache, &w).unwrap();
        let mut flat = q.data().to_vec();
        flat.extend_from_slice(k.data());
        flat.extend_from_slice(v.data());
        let mut analytic = dq.data().to_vec();
        analytic.extend_from_slice(dk.data());
        analytic.extend_from_slice(dv.data());
        let r = grad_check(
            |p| {
                let q = Tensor::new(&[3, 4], p[..12].to_vec()).unwrap();
                let k = Tensor::new(&[5, 4], p[12..32].to_vec()).unwrap();
                let v = Tensor::new(&[5, 4], p[32..].to_vec()).unwrap();
                loss(&q, &k, &v)
            },
            &flat,
            &analytic,
            1e-5,
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-5, "{r:?}");
    }

    #[test]
    fn identical_keys_give_uniform_attention() {
        let mut rng = SeededRng::new(1);
        let q = rng.normal_tensor(&[2, 4], 1.0);
        let k = Tensor::full(&[6, 4], 0.3);
        let v = rng.normal_tensor(&[6, 4], 1.0);
        let (_, cache) = multi_head_attention(q, k, v, 1).unwrap();
        for &p in cache.probs[0].data() {
            assert!((p - 1.0 / 6.0).abs() < 1e-15);
        }
    }
}
