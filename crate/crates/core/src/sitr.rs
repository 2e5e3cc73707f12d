//! Saliency-oriented image-text response.
//!
//! Each text token queries the pooled visual grid through multi-head cross
//! attention. The head-averaged attention weights form one spatial response
//! map per token. One map is selected (by ground-truth overlap during
//! training, by concentration at inference) and used to rescale the visual
//! value tokens, which are then concatenated with projected audio tokens to
//! form the condition sequence for the denoiser.
//!
//! The same module hosts the text-fusion baselines used for comparison.

use std::fmt;
use std::str::FromStr;

use crate::error::{shape_err, Error, Result};
use crate::features::{AudioFeatures, TextFeatures};
use crate::nn::{add_col_sums, join, Linear, Parameters};
use crate::numerics::{softmax_in_place, softmax_rows_backward, SeededRng, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum FusionStrategy {
    Sitr,
    Concatenate,
    RepeatAdd,
    RepeatAverage,
}

impl FusionStrategy {
    pub const ALL: [FusionStrategy; 4] = [
        FusionStrategy::Sitr,
        FusionStrategy::Concatenate,
        FusionStrategy::RepeatAdd,
        FusionStrategy::RepeatAverage,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            FusionStrategy::Sitr => "sitr",
            FusionStrategy::Concatenate => "concatenate",
            FusionStrategy::RepeatAdd => "repeat_add",
            FusionStrategy::RepeatAverage => "repeat_average",
        }
    }

    fn uses_text_projection(self) -> bool {
        self != FusionStrategy::Sitr
    }
}

impl fmt::Display for FusionStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for FusionStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown fusion strategy {s:?}")))
    }
}

/// Spatial response maps, one per text token.
#[derive(Debug, Clone)]
pub struct ResponseMaps {
    /// `[n, h_v, w_v]`, each map a probability distribution.
    pub maps: Tensor,
    /// Value-attended vectors, `[n, d_model]`.
    pub scores: Tensor,
    cache: Option<ResponseCache>,
}

#[derive(Debug, Clone)]
struct ResponseCache {
    text: Tensor,
    visual: Tensor,
    q: Tensor,
    k: Tensor,
    /// `heads × [n, P]`
    probs: Vec<Tensor>,
}

impl ResponseMaps {
    /// Wraps precomputed maps `[n, h, w]`; such maps carry no attention
    /// cache and cannot be backpropagated.
    pub fn from_maps(maps: Tensor) -> Result<Self> {
        if maps.rank() != 3 {
            return shape_err(format!("response maps must be rank 3, got {:?}", maps.shape()));
        }
        let n = maps.shape()[0];
        Ok(Self {
            scores: Tensor::zeros(&[n, 1]),
            maps,
            cache: None,
        })
    }

    pub fn count(&self) -> usize {
        self.maps.shape()[0]
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.maps.shape()[1], self.maps.shape()[2])
    }

    /// Map `i` flattened over the grid.
    pub fn map(&self, i: usize) -> &[f64] {
        let p = self.maps.shape()[1] * self.maps.shape()[2];
        &self.maps.data()[i * p..(i + 1) * p]
    }
}

/// Condition sequence fed to the denoiser's cross attention.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionTokens {
    /// `[L, d_model]`
    pub tokens: Tensor,
}

impl ConditionTokens {
    pub fn new(tokens: Tensor) -> Result<Self> {
        if tokens.rank() != 2 || tokens.rows() < 2 {
            return shape_err(format!("condition needs >= 2 tokens, got {:?}", tokens.shape()));
        }
        Ok(Self { tokens })
    }

    pub fn len(&self) -> usize {
        self.tokens.rows()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn width(&self) -> usize {
        self.tokens.cols()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SitrParams {
    pub heads: usize,
    pub head_dim: usize,
    /// text → queries, `[c_t, heads·head_dim]`
    pub query: Linear,
    /// visual → keys, `[c_v, heads·head_dim]`, no bias
    pub key: Linear,
    /// visual → values, `[c_v, d_model]`; the value tokens double as the
    /// projected visual tokens of the condition.
    pub value: Linear,
    pub audio: Linear,
    /// Only present for the baseline fusions.
    pub text: Option<Linear>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SitrDims {
    pub text_dim: usize,
    pub visual_dim: usize,
    pub audio_dim: usize,
    pub d_model: usize,
    pub heads: usize,
    pub head_dim: usize,
}

impl SitrParams {
    pub fn init(rng: &mut SeededRng, dims: SitrDims, strategy: FusionStrategy) -> Result<Self> {
        if dims.head_dim == 0 || dims.heads == 0 {
            return Err(Error::Config("SITR needs heads >= 1 and head_dim >= 1".into()));
        }
        if !dims.d_model.is_multiple_of(dims.heads) {
            return Err(Error::Config(format!(
                "d_model {} not divisible by SITR heads {}",
                dims.d_model, dims.heads
            )));
        }
        let qk = dims.heads * dims.head_dim;
        let std_t = 1.0 / (dims.text_dim as f64).sqrt();
        let std_v = 1.0 / (dims.visual_dim as f64).sqrt();
        Ok(Self {
            heads: dims.heads,
            head_dim: dims.head_dim,
            query: Linear::normal(rng, dims.text_dim, qk, std_t, true),
            key: Linear::normal(rng, dims.visual_dim, qk, std_v, false),
            value: Linear::xavier(rng, dims.visual_dim, dims.d_model, true),
            audio: Linear::xavier(rng, dims.audio_dim, dims.d_model, true),
            text: strategy
                .uses_text_projection()
                .then(|| Linear::xavier(rng, dims.text_dim, dims.d_model, true)),
        })
    }

    pub fn zeros_like(&self) -> Self {
        let mut g = self.clone();
        g.zero();
        g
    }

    pub fn d_model(&self) -> usize {
        self.value.output_dim()
    }

    fn text_projection(&self) -> Result<&Linear> {
        self.text
            .as_ref()
            .ok_or_else(|| Error::Config("baseline fusion needs a text projection".into()))
    }
}

impl Parameters for SitrParams {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        self.query.visit(&join(prefix, "query"), f);
        self.key.visit(&join(prefix, "key"), f);
        self.value.visit(&join(prefix, "value"), f);
        self.audio.visit(&join(prefix, "audio"), f);
        if let Some(t) = &self.text {
            t.visit(&join(prefix, "text"), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        self.query.visit_mut(&join(prefix, "query"), f);
        self.key.visit_mut(&join(prefix, "key"), f);
        self.value.visit_mut(&join(prefix, "value"), f);
        self.audio.visit_mut(&join(prefix, "audio"), f);
        if let Some(t) = &mut self.text {
            t.visit_mut(&join(prefix, "text"), f);
        }
    }
}

/// `[h, w, c] -> [h·w, c]`
fn flatten_grid(v: &Tensor) -> Result<Tensor> {
    if v.rank() != 3 {
        return shape_err(format!("pooled visual grid must be rank 3, got {:?}", v.shape()));
    }
    let s = v.shape();
    v.clone().reshape(&[s[0] * s[1], s[2]])
}

/// Head-averaged text→visual attention maps.
pub fn response_maps(
    text: &TextFeatures,
    visual_pooled: &Tensor,
    p: &SitrParams,
) -> Result<ResponseMaps> {
    if p.head_dim == 0 {
        return Err(Error::Config("d_k must be positive".into()));
    }
    let visual = flatten_grid(visual_pooled)?;
    let (gh, gw) = (visual_pooled.shape()[0], visual_pooled.shape()[1]);
    let cells = gh * gw;
    let n = text.tokens.rows();
    let q = p.query.forward(&text.tokens)?;
    let k = p.key.forward(&visual)?;
    let scale = 1.0 / (p.head_dim as f64).sqrt();
    let dk = p.head_dim;
    let mut maps = Tensor::zeros(&[n, gh, gw]);
    let mut probs = Vec::with_capacity(p.heads);
    for h in 0..p.heads {
        let mut a = Tensor::zeros(&[n, cells]);
        for i in 0..n {
            let qi = &q.row(i)[h * dk..(h + 1) * dk];
            let row = a.row_mut(i);
            for (j, r) in row.iter_mut().enumerate() {
                let kj = &k.row(j)[h * dk..(h + 1) * dk];
                *r = qi.iter().zip(kj).map(|(x, y)| x * y).sum::<f64>() * scale;
            }
            softmax_in_place(row);
        }
        for (m, v) in maps.data_mut().iter_mut().zip(a.data()) {
            *m += v / p.heads as f64;
        }
        probs.push(a);
    }
    // value-attended vectors, each head reading its own column group
    let v = p.value.forward(&visual)?;
    let d = v.cols();
    let dh = d / p.heads;
    let mut scores = Tensor::zeros(&[n, d]);
    for (h, a) in probs.iter().enumerate() {
        for i in 0..n {
            let out = &mut scores.row_mut(i)[h * dh..(h + 1) * dh];
            for (j, &w) in a.row(i).iter().enumerate() {
                for (o, x) in out.iter_mut().zip(&v.row(j)[h * dh..(h + 1) * dh]) {
                    *o += w * x;
                }
            }
        }
    }
    Ok(ResponseMaps {
        maps,
        scores,
        cache: Some(ResponseCache {
            text: text.tokens.clone(),
            visual,
            q,
            k,
            probs,
        }),
    })
}

/// Area-average `[H, W]` down to `[h, w]`; `H, W` must be multiples.
pub fn downsample_area(map: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let (mh, mw) = (map.shape()[0], map.shape()[1]);
    if mh % h != 0 || mw % w != 0 {
        return shape_err(format!("cannot area-downsample {mh}x{mw} to {h}x{w}"));
    }
    let (fy, fx) = (mh / h, mw / w);
    let mut out = Tensor::zeros(&[h, w]);
    for r in 0..mh {
        for c in 0..mw {
            out.data_mut()[(r / fy) * w + c / fx] += map.at2(r, c);
        }
    }
    Ok(out.scale(1.0 / (fy * fx) as f64))
}

fn argmax_first(values: impl Iterator<Item = f64>) -> usize {
    let mut best = 0;
    let mut best_v = f64::NEG_INFINITY;
    for (i, v) in values.enumerate() {
        if v > best_v {
            best = i;
            best_v = v;
        }
    }
    best
}

/// Map with the largest overlap `Σ map ⊙ gt↓`; lowest index on ties.
/// An all-zero ground truth falls back to [`select_response_inference`].
pub fn select_response_training(r: &ResponseMaps, gt: &Tensor) -> Result<usize> {
    let (gh, gw) = r.grid();
    let down = downsample_area(gt, gh, gw)?;
    if down.data().iter().all(|&v| v == 0.0) {
        return Ok(select_response_inference(r));
    }
    Ok(argmax_first((0..r.count()).map(|i| {
        r.map(i)
            .iter()
            .zip(down.data())
            .map(|(a, b)| a * b)
            .sum::<f64>()
    })))
}

/// Most concentrated map, by `Σ map²`; lowest index on ties.
pub fn select_response_inference(r: &ResponseMaps) -> usize {
    argmax_first((0..r.count()).map(|i| r.map(i).iter().map(|v| v * v).sum::<f64>()))
}

/// Everything needed to backpropagate from the condition tokens.
#[derive(Debug, Clone)]
pub struct ConditionCache {
    strategy: FusionStrategy,
    visual: Tensor,
    audio: Tensor,
    text: Tensor,
    /// Projected visual tokens before any fusion.
    value: Tensor,
    /// SITR only: responses, selected index and per-position scale.
    response: Option<(ResponseMaps, usize, Vec<f64>)>,
    visual_tokens: usize,
}

fn build_from_maps(
    r: ResponseMaps,
    selected: usize,
    visual: Tensor,
    audio: &AudioFeatures,
    p: &SitrParams,
) -> Result<(ConditionTokens, ConditionCache)> {
    if selected >= r.count() {
        return Err(Error::Argument(format!(
            "selected map {selected} out of range for {} maps",
            r.count()
        )));
    }
    let cells = visual.rows();
    if r.map(selected).len() != cells {
        return shape_err("response grid does not match visual grid");
    }
    let value = p.value.forward(&visual)?;
    let scale: Vec<f64> = r.map(selected).iter().map(|m| m * cells as f64).collect();
    let mut tv = value.clone();
    let d = tv.cols();
    for (row, s) in tv.data_mut().chunks_exact_mut(d).zip(&scale) {
        for v in row.iter_mut() {
            *v *= s;
        }
    }
    let a = p.audio.forward(&audio.tokens)?;
    let tokens = ConditionTokens::new(Tensor::concat_rows(&[&tv, &a])?)?;
    let text = r
        .cache
        .as_ref()
        .map_or_else(|| Tensor::zeros(&[1, 1]), |c| c.text.clone());
    Ok((
        tokens,
        ConditionCache {
            strategy: FusionStrategy::Sitr,
            visual,
            audio: audio.tokens.clone(),
            text,
            value,
            response: Some((r, selected, scale)),
            visual_tokens: cells,
        },
    ))
}

/// Condition tokens from a chosen response map: visual value tokens scaled
/// per position by `cells · map[selected]`, followed by audio tokens.
pub fn build_condition(
    r: &ResponseMaps,
    selected: usize,
    visual_pooled: &Tensor,
    audio: &AudioFeatures,
    p: &SitrParams,
) -> Result<ConditionTokens> {
    let visual = flatten_grid(visual_pooled)?;
    Ok(build_from_maps(r.clone(), selected, visual, audio, p)?.0)
}

/// The text-fusion baselines.
pub fn baseline_fuse(
    strategy: FusionStrategy,
    text: &TextFeatures,
    visual_pooled: &Tensor,
    audio: &AudioFeatures,
    p: &SitrParams,
) -> Result<ConditionTokens> {
    Ok(baseline_cached(strategy, text, flatten_grid(visual_pooled)?, audio, p)?.0)
}

fn baseline_cached(
    strategy: FusionStrategy,
    text: &TextFeatures,
    visual: Tensor,
    audio: &AudioFeatures,
    p: &SitrParams,
) -> Result<(ConditionTokens, ConditionCache)> {
    let value = p.value.forward(&visual)?;
    let a = p.audio.forward(&audio.tokens)?;
    let tp = p.text_projection()?;
    let tokens = match strategy {
        FusionStrategy::Sitr => {
            return Err(Error::Config("sitr is not a baseline fusion".into()));
        }
        FusionStrategy::Concatenate => {
            let t = tp.forward(&text.tokens)?;
            Tensor::concat_rows(&[&value, &a, &t])?
        }
        FusionStrategy::RepeatAdd | FusionStrategy::RepeatAverage => {
            let mean_text = text.tokens.mean_axis0()?.reshape(&[1, text.tokens.cols()])?;
            let t = tp.forward(&mean_text)?;
            let half = strategy == FusionStrategy::RepeatAverage;
            let mut fused = value.clone();
            let d = fused.cols();
            for row in fused.data_mut().chunks_exact_mut(d) {
                for (v, tv) in row.iter_mut().zip(t.data()) {
                    *v = if half { 0.5 * (*v + tv) } else { *v + tv };
                }
            }
            Tensor::concat_rows(&[&fused, &a])?
        }
    };
    let cells = visual.rows();
    Ok((
        ConditionTokens::new(tokens)?,
        ConditionCache {
            strategy,
            visual,
            audio: audio.tokens.clone(),
            text: text.tokens.clone(),
            value,
            response: None,
            visual_tokens: cells,
        },
    ))
}

/// Full condition pipeline for one sample. With `gt` the training-time
/// selection is used, otherwise the inference-time one.
pub fn condition_forward(
    strategy: FusionStrategy,
    p: &SitrParams,
    text: &TextFeatures,
    visual_pooled: &Tensor,
    audio: &AudioFeatures,
    gt: Option<&Tensor>,
) -> Result<(ConditionTokens, ConditionCache)> {
    match strategy {
        FusionStrategy::Sitr => {
            let r = response_maps(text, visual_pooled, p)?;
            let selected = match gt {
                Some(g) => select_response_training(&r, g)?,
                None => select_response_inference(&r),
            };
            build_from_maps(r, selected, flatten_grid(visual_pooled)?, audio, p)
        }
        s => baseline_cached(s, text, flatten_grid(visual_pooled)?, audio, p),
    }
}

impl ConditionCache {
    pub fn selected(&self) -> Option<usize> {
        self.response.as_ref().map(|(_, s, _)| *s)
    }
}

/// Accumulates parameter gradients for `dc = ∂L/∂C`. Selection is treated
/// as fixed: text parameters receive gradient only through the attention
/// weights of the selected map.
pub fn condition_backward(
    p: &SitrParams,
    cache: &ConditionCache,
    dc: &Tensor,
    grad: &mut SitrParams,
) -> Result<()> {
    let cells = cache.visual_tokens;
    let ta = cache.audio.rows();
    let d = p.d_model();
    if dc.cols() != d {
        return shape_err("condition gradient width mismatch");
    }
    let d_audio = dc.slice_rows(cells, cells + ta);
    p.audio.backward_params(&cache.audio, &d_audio, &mut grad.audio)?;
    let d_vis = dc.slice_rows(0, cells);
    match cache.strategy {
        FusionStrategy::Sitr => {
            let (r, selected, scale) = cache.response.as_ref().expect("sitr cache");
            // f_tv[j] = scale[j] · value[j]
            let mut d_value = d_vis.clone();
            let mut d_map = vec![0.0; cells];
            for j in 0..cells {
                let g = d_vis.row(j);
                d_map[j] = cells as f64
                    * g.iter().zip(cache.value.row(j)).map(|(a, b)| a * b).sum::<f64>();
                for v in d_value.row_mut(j) {
                    *v *= scale[j];
                }
            }
            p.value.backward_params(&cache.visual, &d_value, &mut grad.value)?;
            let rc = r.cache.as_ref().ok_or_else(|| {
                Error::Argument("response maps without attention cache".into())
            })?;
            response_backward(p, rc, *selected, &d_map, grad)?;
        }
        FusionStrategy::Concatenate => {
            p.value.backward_params(&cache.visual, &d_vis, &mut grad.value)?;
            let nt = cache.text.rows();
            let d_text = dc.slice_rows(cells + ta, cells + ta + nt);
            let tp = p.text_projection()?;
            tp.backward_params(&cache.text, &d_text, grad.text.as_mut().expect("text grad"))?;
        }
        FusionStrategy::RepeatAdd | FusionStrategy::RepeatAverage => {
            let f = if cache.strategy == FusionStrategy::RepeatAverage {
                0.5
            } else {
                1.0
            };
            let dv = d_vis.scale(f);
            p.value.backward_params(&cache.visual, &dv, &mut grad.value)?;
            let mut d_t = Tensor::zeros(&[1, d]);
            add_col_sums(&mut d_t, &dv);
            let mean_text = cache
                .text
                .mean_axis0()?
                .reshape(&[1, cache.text.cols()])?;
            let tp = p.text_projection()?;
            tp.backward_params(&mean_text, &d_t, grad.text.as_mut().expect("text grad"))?;
        }
    }
    Ok(())
}

/// Backward through the head-averaged softmax of row `selected`.
fn response_backward(
    p: &SitrParams,
    c: &ResponseCache,
    selected: usize,
    d_map: &[f64],
    grad: &mut SitrParams,
) -> Result<()> {
    let cells = c.visual.rows();
    let dk = p.head_dim;
    let width = p.heads * dk;
    let scale = 1.0 / (dk as f64).sqrt();
    let mut dq = Tensor::zeros(&[1, width]);
    let mut dkey = Tensor::zeros(&[cells, width]);
    let q_sel = c.q.row(selected);
    for (h, probs) in c.probs.iter().enumerate() {
        let a = Tensor::new(&[1, cells], probs.row(selected).to_vec())?;
        let da = Tensor::new(&[1, cells], d_map.iter().map(|g| g / p.heads as f64).collect())?;
        let ds = softmax_rows_backward(&a, &da)?;
        let qh = &q_sel[h * dk..(h + 1) * dk];
        for j in 0..cells {
            let g = ds.data()[j] * scale;
            let kj = &c.k.row(j)[h * dk..(h + 1) * dk];
            for (o, x) in dq.data_mut()[h * dk..(h + 1) * dk].iter_mut().zip(kj) {
                *o += g * x;
            }
            for (o, x) in dkey.row_mut(j)[h * dk..(h + 1) * dk].iter_mut().zip(qh) {
                *o += g * x;
            }
        }
    }
    let text_row = c.text.slice_rows(selected, selected + 1);
    p.query.backward_params(&text_row, &dq, &mut grad.query)?;
    p.key.backward_params(&c.visual, &dkey, &mut grad.key)?;
    Ok(())
}
