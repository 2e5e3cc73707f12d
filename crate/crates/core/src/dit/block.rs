//! One Saliency-DiT block: modulated self attention, cross attention over
//! the condition tokens with a normalised output, and a modulated MLP, each
//! on a residual path.

use crate::error::{shape_err, Result};
use crate::nn::{
    add_col_dot, add_col_sums, join, modulate, mul_cols, multi_head_attention,
    multi_head_attention_backward, AttentionCache, Linear, Parameters,
};
use crate::numerics::{
    gelu, gelu_grad, layer_norm_backward, layer_norm_cached, LayerNormCache, SeededRng, Tensor,
    LN_EPS,
};
use crate::sitr::ConditionTokens;

/// The six per-block vectors derived from the timestep embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct ModulationParams {
    pub msa_shift: Tensor,
    pub msa_scale: Tensor,
    pub msa_gate: Tensor,
    pub mlp_shift: Tensor,
    pub mlp_scale: Tensor,
    pub mlp_gate: Tensor,
}

impl ModulationParams {
    /// Splits a `6·d` vector in the order shift, scale, gate (attention),
    /// shift, scale, gate (MLP).
    pub fn from_flat(v: &[f64]) -> Result<Self> {
        if v.is_empty() || !v.len().is_multiple_of(6) {
            return shape_err(format!("modulation vector of length {}", v.len()));
        }
        let d = v.len() / 6;
        let part = |i: usize| Tensor::new(&[d], v[i * d..(i + 1) * d].to_vec()).expect("d > 0");
        Ok(Self {
            msa_shift: part(0),
            msa_scale: part(1),
            msa_gate: part(2),
            mlp_shift: part(3),
            mlp_scale: part(4),
            mlp_gate: part(5),
        })
    }

    pub fn to_flat(&self) -> Vec<f64> {
        [
            &self.msa_shift,
            &self.msa_scale,
            &self.msa_gate,
            &self.mlp_shift,
            &self.mlp_scale,
            &self.mlp_gate,
        ]
        .iter()
        .flat_map(|t| t.data().iter().copied())
        .collect()
    }

    pub fn zeros(d: usize) -> Self {
        Self::from_flat(&vec![0.0; 6 * d]).expect("d > 0")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CrossAttention {
    pub query: Linear,
    /// Keys and values from the condition tokens, `[d, 2d]`.
    pub key_value: Linear,
    pub out: Linear,
    /// Affine of the layer norm applied to the attention output.
    pub norm_gain: Tensor,
    pub norm_bias: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams {
    pub heads: usize,
    pub modulation: Linear,
    pub attn_qkv: Linear,
    pub attn_out: Linear,
    /// Absent when the condition is routed through the timestep embedding.
    pub cross: Option<CrossAttention>,
    pub mlp_in: Linear,
    pub mlp_out: Linear,
}

impl BlockParams {
    /// adaLN-Zero: modulation heads and the cross-attention norm gain start
    /// at zero, so the block is the identity map.
    pub fn init(rng: &mut SeededRng, d: usize, heads: usize, hidden: usize, cross: bool) -> Self {
        Self {
            heads,
            modulation: Linear::zeros(d, 6 * d, true),
            attn_qkv: Linear::xavier(rng, d, 3 * d, false),
            attn_out: Linear::xavier(rng, d, d, true),
            cross: cross.then(|| CrossAttention {
                query: Linear::xavier(rng, d, d, false),
                key_value: Linear::xavier(rng, d, 2 * d, false),
                out: Linear::xavier(rng, d, d, true),
                norm_gain: Tensor::zeros(&[d]),
                norm_bias: Tensor::zeros(&[d]),
            }),
            mlp_in: Linear::xavier(rng, d, hidden, true),
            mlp_out: Linear::xavier(rng, hidden, d, true),
        }
    }

    pub fn d_model(&self) -> usize {
        self.attn_out.output_dim()
    }
}

impl Parameters for BlockParams {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        self.modulation.visit(&join(prefix, "modulation"), f);
        self.attn_qkv.visit(&join(prefix, "attn_qkv"), f);
        self.attn_out.visit(&join(prefix, "attn_out"), f);
        if let Some(c) = &self.cross {
            c.query.visit(&join(prefix, "cross_query"), f);
            c.key_value.visit(&join(prefix, "cross_kv"), f);
            c.out.visit(&join(prefix, "cross_out"), f);
            f(join(prefix, "cross_norm.gain"), &c.norm_gain);
            f(join(prefix, "cross_norm.bias"), &c.norm_bias);
        }
        self.mlp_in.visit(&join(prefix, "mlp_in"), f);
        self.mlp_out.visit(&join(prefix, "mlp_out"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        self.modulation.visit_mut(&join(prefix, "modulation"), f);
        self.attn_qkv.visit_mut(&join(prefix, "attn_qkv"), f);
        self.attn_out.visit_mut(&join(prefix, "attn_out"), f);
        if let Some(c) = &mut self.cross {
            c.query.visit_mut(&join(prefix, "cross_query"), f);
            c.key_value.visit_mut(&join(prefix, "cross_kv"), f);
            c.out.visit_mut(&join(prefix, "cross_out"), f);
            f(join(prefix, "cross_norm.gain"), &mut c.norm_gain);
            f(join(prefix, "cross_norm.bias"), &mut c.norm_bias);
        }
        self.mlp_in.visit_mut(&join(prefix, "mlp_in"), f);
        self.mlp_out.visit_mut(&join(prefix, "mlp_out"), f);
    }
}

/// Column blocks of equal width `t.cols() / parts`.
fn split_cols(t: &Tensor, parts: usize) -> Vec<Tensor> {
    let w = t.cols() / parts;
    (0..parts)
        .map(|p| {
            let mut out = Vec::with_capacity(t.rows() * w);
            for row in t.data().chunks_exact(t.cols()) {
                out.extend_from_slice(&row[p * w..(p + 1) * w]);
            }
            Tensor::new(&[t.rows(), w], out).expect("dims")
        })
        .collect()
}

fn concat_cols(parts: &[&Tensor]) -> Tensor {
    let rows = parts[0].rows();
    let width: usize = parts.iter().map(|p| p.cols()).sum();
    let mut out = Vec::with_capacity(rows * width);
    for r in 0..rows {
        for p in parts {
            out.extend_from_slice(p.row(r));
        }
    }
    Tensor::new(&[rows, width], out).expect("dims")
}

fn plus_one(t: &Tensor) -> Vec<f64> {
    t.data().iter().map(|v| 1.0 + v).collect()
}

#[derive(Debug, Clone)]
struct CrossCache {
    query_ln: LayerNormCache,
    attn: AttentionCache,
    attn_merged: Tensor,
    out_ln: LayerNormCache,
}

/// Intermediate values of one block evaluation.
#[derive(Debug, Clone)]
pub struct BlockCache {
    x: Tensor,
    ln1: LayerNormCache,
    n1: Tensor,
    attn: AttentionCache,
    attn_merged: Tensor,
    attn_proj: Tensor,
    cond: Option<Tensor>,
    cross: Option<CrossCache>,
    ln3: LayerNormCache,
    n4: Tensor,
    hidden_pre: Tensor,
    hidden: Tensor,
    mlp_proj: Tensor,
    m: ModulationParams,
}

pub fn block_forward(
    x: &Tensor,
    c: &ConditionTokens,
    m: &ModulationParams,
    w: &BlockParams,
) -> Result<Tensor> {
    Ok(block_forward_cached(x, Some(c), m, w)?.0)
}

/// `c` is required iff the block has cross attention.
pub fn block_forward_cached(
    x: &Tensor,
    c: Option<&ConditionTokens>,
    m: &ModulationParams,
    w: &BlockParams,
) -> Result<(Tensor, BlockCache)> {
    let d = w.d_model();
    if x.rank() != 2 || x.cols() != d {
        return shape_err(format!("block input {:?} for d_model {d}", x.shape()));
    }
    let ln1 = layer_norm_cached(x, LN_EPS);
    let n1 = modulate(&ln1.normalized, &plus_one(&m.msa_scale), m.msa_shift.data());
    let qkv = split_cols(&w.attn_qkv.forward(&n1)?, 3);
    let [q, k, v]: [Tensor; 3] = qkv.try_into().expect("three parts");
    let (attn_merged, attn) = multi_head_attention(q, k, v, w.heads)?;
    let attn_proj = w.attn_out.forward(&attn_merged)?;
    let mut n2 = x.clone();
    n2.add_assign(&mul_cols(&attn_proj, m.msa_gate.data()))?;

    let (n3, cond, cross) = match &w.cross {
        Some(ca) => {
            let c = match c {
                Some(c) => c,
                None => return shape_err("block with cross attention needs condition tokens"),
            };
            if c.width() != d {
                return shape_err(format!("condition width {} != d_model {d}", c.width()));
            }
            let query_ln = layer_norm_cached(&n2, LN_EPS);
            let q = ca.query.forward(&query_ln.normalized)?;
            let kv = split_cols(&ca.key_value.forward(&c.tokens)?, 2);
            let [k, v]: [Tensor; 2] = kv.try_into().expect("two parts");
            let (attn_merged, attn) = multi_head_attention(q, k, v, w.heads)?;
            let out = ca.out.forward(&attn_merged)?;
            let out_ln = layer_norm_cached(&out, LN_EPS);
            let core = modulate(&out_ln.normalized, ca.norm_gain.data(), ca.norm_bias.data());
            let n3 = n2.add(&core)?;
            (
                n3,
                Some(c.tokens.clone()),
                Some(CrossCache {
                    query_ln,
                    attn,
                    attn_merged,
                    out_ln,
                }),
            )
        }
        None => (n2.clone(), None, None),
    };

    let ln3 = layer_norm_cached(&n3, LN_EPS);
    let n4 = modulate(&ln3.normalized, &plus_one(&m.mlp_scale), m.mlp_shift.data());
    let hidden_pre = w.mlp_in.forward(&n4)?;
    let hidden = hidden_pre.map(gelu);
    let mlp_proj = w.mlp_out.forward(&hidden)?;
    let mut n5 = n3;
    n5.add_assign(&mul_cols(&mlp_proj, m.mlp_gate.data()))?;
    Ok((
        n5,
        BlockCache {
            x: x.clone(),
            ln1,
            n1,
            attn,
            attn_merged,
            attn_proj,
            cond,
            cross,
            ln3,
            n4,
            hidden_pre,
            hidden,
            mlp_proj,
            m: m.clone(),
        },
    ))
}

/// Gradients flowing out of a block.
#[derive(Debug, Clone)]
pub struct BlockInputGrads {
    pub dx: Tensor,
    /// Present iff the block has cross attention.
    pub dcond: Option<Tensor>,
    pub dmod: ModulationParams,
}

/// Accumulates parameter gradients into `grad`.
pub fn block_backward(
    w: &BlockParams,
    cache: &BlockCache,
    dout: &Tensor,
    grad: &mut BlockParams,
) -> Result<BlockInputGrads> {
    let d = w.d_model();
    let m = &cache.m;
    let mut dmod = ModulationParams::zeros(d);

    // n5 = n3 + gate ⊙ mlp
    let mut dn3 = dout.clone();
    add_col_dot(dmod.mlp_gate.data_mut(), dout, &cache.mlp_proj);
    let d_mlp = mul_cols(dout, m.mlp_gate.data());
    let d_hidden = w.mlp_out.backward(&cache.hidden, &d_mlp, &mut grad.mlp_out)?;
    let d_pre = d_hidden.zip_map(&cache.hidden_pre, |g, x| g * gelu_grad(x))?;
    let dn4 = w.mlp_in.backward(&cache.n4, &d_pre, &mut grad.mlp_in)?;
    // n4 = ln3 ⊙ (1 + scale) + shift
    add_col_sums(&mut dmod.mlp_shift, &dn4);
    add_col_dot(dmod.mlp_scale.data_mut(), &dn4, &cache.ln3.normalized);
    let d_ln3 = mul_cols(&dn4, &plus_one(&m.mlp_scale));
    dn3.add_assign(&layer_norm_backward(&cache.ln3, &d_ln3))?;

    // n3 = n2 + gain ⊙ LN(out) + bias
    let mut dn2 = dn3.clone();
    let mut dcond = None;
    if let (Some(ca), Some(cc)) = (&w.cross, &cache.cross) {
        let gca = grad.cross.as_mut().expect("cross grad");
        add_col_sums(&mut gca.norm_bias, &dn3);
        add_col_dot(gca.norm_gain.data_mut(), &dn3, &cc.out_ln.normalized);
        let d_out_ln = mul_cols(&dn3, ca.norm_gain.data());
        let d_out = layer_norm_backward(&cc.out_ln, &d_out_ln);
        let d_merged = ca.out.backward(&cc.attn_merged, &d_out, &mut gca.out)?;
        let (dq, dk, dv) = multi_head_attention_backward(&cc.attn, &d_merged)?;
        let cond = cache.cond.as_ref().expect("condition cached");
        dcond = Some(ca.key_value.backward(cond, &concat_cols(&[&dk, &dv]), &mut gca.key_value)?);
        let d_qln = ca.query.backward(&cc.query_ln.normalized, &dq, &mut gca.query)?;
        dn2.add_assign(&layer_norm_backward(&cc.query_ln, &d_qln))?;
    }

    // n2 = x + gate ⊙ attn
    let mut dx = dn2.clone();
    add_col_dot(dmod.msa_gate.data_mut(), &dn2, &cache.attn_proj);
    let d_attn = mul_cols(&dn2, m.msa_gate.data());
    let d_merged = w.attn_out.backward(&cache.attn_merged, &d_attn, &mut grad.attn_out)?;
    let (dq, dk, dv) = multi_head_attention_backward(&cache.attn, &d_merged)?;
    let dn1 = w
        .attn_qkv
        .backward(&cache.n1, &concat_cols(&[&dq, &dk, &dv]), &mut grad.attn_qkv)?;
    add_col_sums(&mut dmod.msa_shift, &dn1);
    add_col_dot(dmod.msa_scale.data_mut(), &dn1, &cache.ln1.normalized);
    let d_ln1 = mul_cols(&dn1, &plus_one(&m.msa_scale));
    dx.add_assign(&layer_norm_backward(&cache.ln1, &d_ln1))?;
    debug_assert_eq!(cache.x.shape(), dx.shape());
    Ok(BlockInputGrads { dx, dcond, dmod })
}
