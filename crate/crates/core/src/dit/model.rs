//! The full denoiser: patch tokens, timestep embedding, a stack of blocks
//! and a per-token linear head predicting the clean map.

use crate::dit::block::{
    block_backward, block_forward_cached, BlockCache, BlockParams, ModulationParams,
};
use crate::dit::config::{ConditioningMode, ModelConfig};
use crate::dit::layers::{patchify, sincos_2d, timestep_sinusoid, unpatchify};
use crate::error::{shape_err, Error, Result};
use crate::features::{AudioFeatures, TextFeatures};
use crate::nn::{join, Linear, Parameters};
use crate::numerics::{
    layer_norm_backward, layer_norm_cached, silu, silu_grad, LayerNormCache, SeededRng, Tensor,
    LN_EPS,
};
use crate::sitr::{condition_backward, condition_forward, ConditionCache, ConditionTokens, SitrParams};

pub const MAX_TIMESTEP: usize = 1000;

/// Every learnable tensor of the model, condition front end included.
#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserState {
    pub cfg: ModelConfig,
    pub patch_embed: Linear,
    pub pos_embed: Tensor,
    pub time_in: Linear,
    pub time_out: Linear,
    /// Undecoupled mode only: mean condition → timestep embedding.
    pub cond_proj: Option<Linear>,
    pub blocks: Vec<BlockParams>,
    pub head: Linear,
    pub sitr: SitrParams,
}

impl DenoiserState {
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = SeededRng::new(seed);
        let d = cfg.d_model;
        let (gh, gw) = cfg.grid();
        let p2 = cfg.patch * cfg.patch;
        let decoupled = cfg.conditioning == ConditioningMode::Decoupled;
        let sitr = SitrParams::init(&mut rng, cfg.sitr_dims(), cfg.fusion)?;
        Ok(Self {
            cfg: cfg.clone(),
            patch_embed: Linear::xavier(&mut rng, p2, d, true),
            pos_embed: sincos_2d(gh, gw, d),
            time_in: Linear::normal(&mut rng, d, d, 0.02, true),
            time_out: Linear::normal(&mut rng, d, d, 0.02, true),
            cond_proj: (!decoupled).then(|| Linear::xavier(&mut rng, d, d, true)),
            blocks: (0..cfg.depth)
                .map(|_| BlockParams::init(&mut rng, d, cfg.heads, cfg.mlp_hidden(), decoupled))
                .collect(),
            head: Linear::zeros(d, p2, true),
            sitr,
        })
    }

    pub fn zeros_like(&self) -> Self {
        let mut g = self.clone();
        g.zero();
        g
    }
}

impl Parameters for DenoiserState {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        self.patch_embed.visit(&join(prefix, "patch_embed"), f);
        f(join(prefix, "pos_embed"), &self.pos_embed);
        self.time_in.visit(&join(prefix, "time_in"), f);
        self.time_out.visit(&join(prefix, "time_out"), f);
        if let Some(c) = &self.cond_proj {
            c.visit(&join(prefix, "cond_proj"), f);
        }
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&join(prefix, &format!("blocks.{i}")), f);
        }
        self.head.visit(&join(prefix, "head"), f);
        self.sitr.visit(&join(prefix, "sitr"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        self.patch_embed.visit_mut(&join(prefix, "patch_embed"), f);
        f(join(prefix, "pos_embed"), &mut self.pos_embed);
        self.time_in.visit_mut(&join(prefix, "time_in"), f);
        self.time_out.visit_mut(&join(prefix, "time_out"), f);
        if let Some(c) = &mut self.cond_proj {
            c.visit_mut(&join(prefix, "cond_proj"), f);
        }
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&join(prefix, &format!("blocks.{i}")), f);
        }
        self.head.visit_mut(&join(prefix, "head"), f);
        self.sitr.visit_mut(&join(prefix, "sitr"), f);
    }
}

/// Timestep embedding `e_t`: sinusoid → linear → SiLU → linear.
pub fn embed_timestep(t: usize, state: &DenoiserState) -> Result<Tensor> {
    Ok(time_embedding(t, state)?.e)
}

struct TimeCache {
    raw: Tensor,
    h: Tensor,
    a: Tensor,
    e: Tensor,
}

fn time_embedding(t: usize, state: &DenoiserState) -> Result<TimeCache> {
    if t > MAX_TIMESTEP {
        return Err(Error::Argument(format!("timestep {t} outside [0, {MAX_TIMESTEP}]")));
    }
    let d = state.cfg.d_model;
    let raw = Tensor::new(&[1, d], timestep_sinusoid(t as f64, d))?;
    let h = state.time_in.forward(&raw)?;
    let a = h.map(silu);
    let e = state.time_out.forward(&a)?;
    Ok(TimeCache { raw, h, a, e })
}

/// Modulation vectors of block `i` for a (possibly condition-augmented)
/// embedding `e_t`.
pub fn modulation(e_t: &Tensor, block: &BlockParams) -> Result<ModulationParams> {
    let s = e_t.map(silu);
    ModulationParams::from_flat(block.modulation.forward(&s)?.data())
}

/// Values kept from a forward pass for [`backward`].
pub struct ForwardCache {
    patches: Tensor,
    time: TimeCache,
    cond_mean: Option<Tensor>,
    e_full: Tensor,
    blocks: Vec<BlockCache>,
    final_ln: LayerNormCache,
    cond_rows: usize,
}

pub fn forward(s_t: &Tensor, t: usize, c: &ConditionTokens, state: &DenoiserState) -> Result<Tensor> {
    Ok(forward_cached(s_t, t, c, state)?.0)
}

pub fn forward_cached(
    s_t: &Tensor,
    t: usize,
    c: &ConditionTokens,
    state: &DenoiserState,
) -> Result<(Tensor, ForwardCache)> {
    let cfg = &state.cfg;
    if s_t.shape() != [cfg.map_h, cfg.map_w] {
        return shape_err(format!(
            "expected a {}x{} map, got {:?}",
            cfg.map_h,
            cfg.map_w,
            s_t.shape()
        ));
    }
    if c.width() != cfg.d_model {
        return shape_err(format!("condition width {} != d_model {}", c.width(), cfg.d_model));
    }
    let patches = patchify(s_t, cfg.patch)?;
    let mut x = state.patch_embed.forward(&patches)?;
    x.add_assign(&state.pos_embed)?;

    let time = time_embedding(t, state)?;
    let (e_full, cond_mean) = match &state.cond_proj {
        Some(proj) => {
            let mean = c.tokens.mean_axis0()?.reshape(&[1, cfg.d_model])?;
            let e = time.e.add(&proj.forward(&mean)?)?;
            (e, Some(mean))
        }
        None => (time.e.clone(), None),
    };

    let cond = state.cond_proj.is_none().then_some(c);
    let mut caches = Vec::with_capacity(state.blocks.len());
    for (i, block) in state.blocks.iter().enumerate() {
        let m = modulation(&e_full, block)?;
        let (next, cache) = block_forward_cached(&x, cond, &m, block)?;
        if !next.all_finite() {
            return Err(Error::Numeric(format!(
                "non-finite activations after block {i} (t = {t}, input max |x| = {:.3e})",
                x.max_abs()
            )));
        }
        x = next;
        caches.push(cache);
    }
    let final_ln = layer_norm_cached(&x, LN_EPS);
    let tokens = state.head.forward(&final_ln.normalized)?;
    let out = unpatchify(&tokens, cfg.patch, cfg.map_h, cfg.map_w)?;
    if !out.all_finite() {
        return Err(Error::Numeric(format!("non-finite prediction at t = {t}")));
    }
    Ok((
        out,
        ForwardCache {
            patches,
            time,
            cond_mean,
            e_full,
            blocks: caches,
            final_ln,
            cond_rows: c.len(),
        },
    ))
}

/// Accumulates gradients into `grad` for `d_out = ∂L/∂prediction` and
/// returns `∂L/∂C`.
pub fn backward(
    state: &DenoiserState,
    cache: &ForwardCache,
    d_out: &Tensor,
    grad: &mut DenoiserState,
) -> Result<Tensor> {
    let cfg = &state.cfg;
    let d = cfg.d_model;
    let d_tokens = patchify(d_out, cfg.patch)?;
    let d_ln = state
        .head
        .backward(&cache.final_ln.normalized, &d_tokens, &mut grad.head)?;
    let mut dx = layer_norm_backward(&cache.final_ln, &d_ln);

    let mut dc = Tensor::zeros(&[cache.cond_rows, d]);
    let s = cache.e_full.map(silu);
    let mut ds = Tensor::zeros(&[1, d]);
    for i in (0..state.blocks.len()).rev() {
        let block = &state.blocks[i];
        let g = block_backward(block, &cache.blocks[i], &dx, &mut grad.blocks[i])?;
        dx = g.dx;
        if let Some(gc) = g.dcond {
            dc.add_assign(&gc)?;
        }
        let dmod = Tensor::new(&[1, 6 * d], g.dmod.to_flat())?;
        ds.add_assign(&block.modulation.backward(&s, &dmod, &mut grad.blocks[i].modulation)?)?;
    }
    let de = ds.zip_map(&cache.e_full, |g, e| g * silu_grad(e))?;
    if let (Some(proj), Some(mean)) = (&state.cond_proj, &cache.cond_mean) {
        let dmean = proj.backward(mean, &de, grad.cond_proj.as_mut().expect("cond grad"))?;
        let inv = 1.0 / cache.cond_rows as f64;
        for r in 0..cache.cond_rows {
            for (o, g) in dc.row_mut(r).iter_mut().zip(dmean.data()) {
                *o += g * inv;
            }
        }
    }
    let da = state.time_out.backward(&cache.time.a, &de, &mut grad.time_out)?;
    let dh = da.zip_map(&cache.time.h, |g, h| g * silu_grad(h))?;
    state.time_in.backward_params(&cache.time.raw, &dh, &mut grad.time_in)?;

    grad.pos_embed.add_assign(&dx)?;
    state
        .patch_embed
        .backward_params(&cache.patches, &dx, &mut grad.patch_embed)?;
    Ok(dc)
}

/// Condition inputs of one sample.
#[derive(Debug, Clone, Copy)]
pub struct SampleInputs<'a> {
    pub text: &'a TextFeatures,
    pub visual_pooled: &'a Tensor,
    pub audio: &'a AudioFeatures,
}

/// Condition tokens for a sample; `gt` selects the training-time response.
pub fn condition_tokens(
    state: &DenoiserState,
    inputs: SampleInputs<'_>,
    gt: Option<&Tensor>,
) -> Result<(ConditionTokens, ConditionCache)> {
    condition_forward(
        state.cfg.fusion,
        &state.sitr,
        inputs.text,
        inputs.visual_pooled,
        inputs.audio,
        gt,
    )
}

/// Loss `mean((pred − target)²)` and its gradient through the denoiser and
/// the condition front end, accumulated into `grad`.
pub fn mse_loss_and_grad(
    state: &DenoiserState,
    inputs: SampleInputs<'_>,
    gt: Option<&Tensor>,
    s_t: &Tensor,
    t: usize,
    target: &Tensor,
    grad: &mut DenoiserState,
) -> Result<f64> {
    let (c, ccache) = condition_tokens(state, inputs, gt)?;
    let (pred, cache) = forward_cached(s_t, t, &c, state)?;
    let n = pred.len() as f64;
    let diff = pred.sub(target)?;
    let loss = diff.data().iter().map(|v| v * v).sum::<f64>() / n;
    let d_out = diff.scale(2.0 / n);
    let dc = backward(state, &cache, &d_out, grad)?;
    condition_backward(&state.sitr, &ccache, &dc, &mut grad.sitr)?;
    Ok(loss)
}
