//! Deterministic DDIM sampling from pure noise.

use rayon::prelude::*;

use crate::diffusion::schedule::{ddim_step, sample_times, NoiseSchedule, TargetRange};
use crate::diffusion::train::sample_inputs;
use crate::dit::{condition_tokens, forward, DenoiserState, SampleInputs};
use crate::error::{Error, Result};
use crate::features::DatasetSample;
use crate::numerics::{SeededRng, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct InferenceConfig {
    pub steps: usize,
    pub seed: u64,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self { steps: 4, seed: 0 }
    }
}

/// Runs the DDIM ladder and returns the final signal before range decoding.
pub fn sample_raw(
    state: &DenoiserState,
    inputs: SampleInputs<'_>,
    sched: &NoiseSchedule,
    steps: usize,
    rng: &mut SeededRng,
) -> Result<Tensor> {
    let times = sample_times(sched.steps(), steps)?;
    let (c, _) = condition_tokens(state, inputs, None)?;
    let mut s = rng.normal_tensor(&[state.cfg.map_h, state.cfg.map_w], 1.0);
    for pair in times.windows(2) {
        let pred = forward(&s, pair[0], &c, state)?;
        s = ddim_step(&s, &pred, pair[0], pair[1], sched)?;
    }
    if !s.all_finite() {
        return Err(Error::Numeric("non-finite sample".into()));
    }
    Ok(s)
}

/// A predicted saliency map in `[0, 1]`.
pub fn sample(
    state: &DenoiserState,
    inputs: SampleInputs<'_>,
    sched: &NoiseSchedule,
    steps: usize,
    rng: &mut SeededRng,
    range: TargetRange,
) -> Result<Tensor> {
    Ok(range.decode(&sample_raw(state, inputs, sched, steps, rng)?))
}

/// Maps for a whole split, sample `i` drawing its noise from
/// `SeededRng::for_index(seed, i)`.
pub fn sample_split(
    state: &DenoiserState,
    samples: &[DatasetSample],
    sched: &NoiseSchedule,
    icfg: InferenceConfig,
    range: TargetRange,
) -> Result<Vec<Tensor>> {
    samples
        .par_iter()
        .enumerate()
        .map(|(i, s)| {
            let pooled = s.visual.pooled();
            let mut rng = SeededRng::for_index(icfg.seed, i as u64);
            sample(state, sample_inputs(s, &pooled), sched, icfg.steps, &mut rng, range)
        })
        .collect()
}
