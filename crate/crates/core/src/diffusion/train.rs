//! Training loop: noise the target at a random step, predict the clean map,
//! minimise the pixel MSE.

use rayon::prelude::*;

use crate::diffusion::optim::{clip_grad_norm, AdamW, ReduceOnPlateau};
use crate::diffusion::schedule::{forward_noise, make_schedule, NoiseSchedule, TargetRange};
use crate::dit::{condition_tokens, forward, mse_loss_and_grad, DenoiserState, SampleInputs};
use crate::error::{Error, Result};
use crate::features::DatasetSample;
use crate::nn::Parameters;
use crate::numerics::{SeededRng, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub lr_decay_factor: f64,
    pub lr_patience: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub weight_decay: f64,
    /// Global gradient-norm cap; 0 disables clipping.
    pub grad_clip: f64,
    pub timesteps: usize,
    pub beta_min: f64,
    pub beta_max: f64,
    pub target_range: TargetRange,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            lr_decay_factor: 0.2,
            lr_patience: 5,
            batch_size: 8,
            epochs: 20,
            seed: 0,
            weight_decay: 0.01,
            grad_clip: 1.0,
            timesteps: 1000,
            beta_min: 1e-4,
            beta_max: 0.02,
            target_range: TargetRange::Unit,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning_rate must be positive, got {}", self.learning_rate)));
        }
        if !(self.lr_decay_factor > 0.0 && self.lr_decay_factor < 1.0) {
            return Err(Error::Config(format!(
                "lr_decay_factor must lie in (0, 1), got {}",
                self.lr_decay_factor
            )));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Config("batch_size and epochs must be >= 1".into()));
        }
        if self.weight_decay < 0.0 || self.grad_clip < 0.0 {
            return Err(Error::Config("weight_decay and grad_clip must be >= 0".into()));
        }
        self.schedule().map(|_| ())
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        make_schedule(self.timesteps, self.beta_min, self.beta_max)
    }
}

/// `(1/N)·Σ(p − g)²`.
pub fn mse_loss(p: &Tensor, g: &Tensor) -> Result<f64> {
    p.check_same_shape(g)?;
    Ok(p.data().iter().zip(g.data()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / p.len() as f64)
}

pub fn sample_inputs<'a>(s: &'a DatasetSample, pooled: &'a Tensor) -> SampleInputs<'a> {
    SampleInputs {
        text: &s.text,
        visual_pooled: pooled,
        audio: &s.audio,
    }
}

struct Draw {
    t: usize,
    eps: Tensor,
}

fn draw(rng: &mut SeededRng, sched: &NoiseSchedule, shape: &[usize]) -> Draw {
    Draw {
        t: rng.int_inclusive(1, sched.steps()),
        eps: rng.normal_tensor(shape, 1.0),
    }
}

/// Per-sample loss and gradient, evaluated in parallel and summed in batch
/// order so the result does not depend on the worker count.
fn batch_gradient(
    batch: &[&DatasetSample],
    draws: &[Draw],
    state: &DenoiserState,
    sched: &NoiseSchedule,
    range: TargetRange,
) -> Result<(f64, DenoiserState)> {
    let parts: Vec<Result<(f64, DenoiserState)>> = batch
        .par_iter()
        .zip(draws.par_iter())
        .map(|(s, d)| {
            let target = range.encode(&s.gt_map);
            let s_t = forward_noise(&target, d.t, &d.eps, sched)?;
            let pooled = s.visual.pooled();
            let mut g = state.zeros_like();
            let loss = mse_loss_and_grad(
                state,
                sample_inputs(s, &pooled),
                Some(&s.gt_map),
                &s_t,
                d.t,
                &target,
                &mut g,
            )?;
            Ok((loss, g))
        })
        .collect();
    let mut total = 0.0;
    let mut grad = state.zeros_like();
    for p in parts {
        let (l, g) = p?;
        total += l;
        grad.accumulate(&g);
    }
    let n = batch.len() as f64;
    grad.scale_all(1.0 / n);
    Ok((total / n, grad))
}

/// One optimiser update on `batch`; returns the mean loss before the update.
pub fn train_step(
    batch: &[&DatasetSample],
    state: &mut DenoiserState,
    opt: &mut AdamW,
    sched: &NoiseSchedule,
    rng: &mut SeededRng,
    cfg: &TrainConfig,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Argument("empty batch".into()));
    }
    let draws: Vec<Draw> = batch
        .iter()
        .map(|s| draw(rng, sched, s.gt_map.shape()))
        .collect();
    let (loss, mut grad) = batch_gradient(batch, &draws, state, sched, cfg.target_range)?;
    if !loss.is_finite() {
        return Err(Error::Numeric(format!(
            "non-finite training loss at optimiser step {}",
            opt.steps_taken() + 1
        )));
    }
    clip_grad_norm(&mut grad, cfg.grad_clip);
    opt.step(state, &grad)?;
    Ok(loss)
}

/// Mean denoising loss with a fixed step and noise per sample index, using
/// the inference-time response selection.
pub fn validation_loss(
    samples: &[DatasetSample],
    state: &DenoiserState,
    sched: &NoiseSchedule,
    cfg: &TrainConfig,
) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Argument("empty validation set".into()));
    }
    let losses: Vec<Result<f64>> = samples
        .par_iter()
        .enumerate()
        .map(|(i, s)| {
            let mut rng = SeededRng::for_index(cfg.seed ^ 0x5641_4c5f_4c4f_5353, i as u64);
            let d = draw(&mut rng, sched, s.gt_map.shape());
            let target = cfg.target_range.encode(&s.gt_map);
            let s_t = forward_noise(&target, d.t, &d.eps, sched)?;
            let pooled = s.visual.pooled();
            let (c, _) = condition_tokens(state, sample_inputs(s, &pooled), None)?;
            mse_loss(&forward(&s_t, d.t, &c, state)?, &target)
        })
        .collect();
    let mut total = 0.0;
    for l in losses {
        total += l?;
    }
    Ok(total / samples.len() as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub epochs: Vec<EpochLog>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
}

/// Runs `cfg.epochs` epochs. After each epoch `on_epoch` receives the log
/// line, the current weights and whether they are the best so far.
pub fn fit(
    state: &mut DenoiserState,
    train: &[DatasetSample],
    val: &[DatasetSample],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog, &DenoiserState, bool) -> Result<()>,
) -> Result<TrainReport> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Argument("empty training set".into()));
    }
    let sched = cfg.schedule()?;
    let mut opt = AdamW::new(cfg.learning_rate, cfg.weight_decay);
    let mut plateau = ReduceOnPlateau::new(cfg.lr_decay_factor, cfg.lr_patience)?;
    let mut rng = SeededRng::new(cfg.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut report = TrainReport {
        epochs: Vec::new(),
        best_epoch: 0,
        best_val_loss: f64::INFINITY,
    };
    for epoch in 1..=cfg.epochs {
        rng.shuffle(&mut order);
        let mut sum = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&DatasetSample> = chunk.iter().map(|&i| &train[i]).collect();
            sum += train_step(&batch, state, &mut opt, &sched, &mut rng, cfg)?;
            batches += 1;
        }
        let train_loss = sum / batches as f64;
        let val_loss = if val.is_empty() {
            train_loss
        } else {
            validation_loss(val, state, &sched, cfg)?
        };
        let log = EpochLog {
            epoch,
            train_loss,
            val_loss,
            lr: opt.lr,
        };
        let is_best = val_loss < report.best_val_loss;
        if is_best {
            report.best_val_loss = val_loss;
            report.best_epoch = epoch;
        }
        on_epoch(&log, state, is_best)?;
        report.epochs.push(log);
        opt.lr = plateau.observe(val_loss, opt.lr);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dit::ModelConfig;
    use crate::features::{generate_indexed, BlobWorldConfig, SyntheticEncoders};

    pub(crate) fn tiny_model() -> ModelConfig {
        ModelConfig {
            d_model: 16,
            heads: 2,
            depth: 1,
            mlp_ratio: 2.0,
            sitr_heads: 2,
            sitr_head_dim: 8,
            ..ModelConfig::default()
        }
    }

    fn data(n: usize) -> Vec<DatasetSample> {
        let cfg = BlobWorldConfig::default();
        let enc = SyntheticEncoders::new(&cfg.features).unwrap();
        (0..n).map(|i| generate_indexed(3, i, &enc, &cfg).unwrap()).collect()
    }

    #[test]
    fn mse_examples() {
        let g = Tensor::new(&[2, 2], vec![0.1, 0.5, 0.9, 0.0]).unwrap();
        assert_eq!(mse_loss(&g, &g).unwrap(), 0.0);
        assert!((mse_loss(&g.map(|v| v + 1.0), &g).unwrap() - 1.0).abs() < 1e-15);
        assert!(mse_loss(&g, &Tensor::zeros(&[4])).is_err());
    }

    #[test]
    fn loss_decreases_on_frozen_batch() {
        let samples = data(4);
        let batch: Vec<&DatasetSample> = samples.iter().collect();
        let cfg = TrainConfig {
            learning_rate: 3e-3,
            ..TrainConfig::default()
        };
        let sched = cfg.schedule().unwrap();
        let mut state = DenoiserState::init(&tiny_model(), 0).unwrap();
        let mut opt = AdamW::new(cfg.learning_rate, cfg.weight_decay);
        // identical draws every step isolate the optimisation
        let eval = |state: &DenoiserState| {
            let mut rng = SeededRng::new(9);
            let draws: Vec<Draw> = batch.iter().map(|s| draw(&mut rng, &sched, s.gt_map.shape())).collect();
            batch_gradient(&batch, &draws, state, &sched, cfg.target_range).unwrap()
        };
        let first = eval(&state).0;
        for _ in 0..50 {
            let (_, mut g) = eval(&state);
            clip_grad_norm(&mut g, cfg.grad_clip);
            opt.step(&mut state, &g).unwrap();
        }
        let last = eval(&state).0;
        assert!(last < 0.5 * first, "{first} -> {last}");
    }

    #[test]
    fn modulation_depends_on_t_after_one_step() {
        let samples = data(4);
        let batch: Vec<&DatasetSample> = samples.iter().collect();
        let cfg = TrainConfig::default();
        let sched = cfg.schedule().unwrap();
        let mut state = DenoiserState::init(&tiny_model(), 0).unwrap();
        let mods = |state: &DenoiserState, t: usize| {
            let e = crate::dit::embed_timestep(t, state).unwrap();
            crate::dit::modulation(&e, &state.blocks[0]).unwrap().to_flat()
        };
        let mut opt = AdamW::new(cfg.learning_rate, cfg.weight_decay);
        let mut rng = SeededRng::new(4);
        let mut step = |state: &mut DenoiserState| {
            let draws: Vec<Draw> = batch.iter().map(|s| draw(&mut rng, &sched, s.gt_map.shape())).collect();
            let (_, g) = batch_gradient(&batch, &draws, state, &sched, cfg.target_range).unwrap();
            opt.step(state, &g).unwrap();
        };
        assert_eq!(mods(&state, 10), mods(&state, 900));
        // the zero head blocks all gradient into the blocks on the first step
        step(&mut state);
        assert_eq!(mods(&state, 10), mods(&state, 900));
        step(&mut state);
        let (a, b) = (mods(&state, 10), mods(&state, 900));
        assert!(a.iter().zip(&b).any(|(x, y)| x != y));
    }

    #[test]
    fn training_is_deterministic_and_thread_independent() {
        let samples = data(6);
        let cfg = TrainConfig {
            epochs: 1,
            batch_size: 3,
            ..TrainConfig::default()
        };
        let run = |threads: usize| {
            let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
            pool.install(|| {
                let mut state = DenoiserState::init(&tiny_model(), 1).unwrap();
                let report = fit(&mut state, &samples[..4], &samples[4..], &cfg, |_, _, _| Ok(())).unwrap();
                (state, report)
            })
        };
        let (a, ra) = run(1);
        let (b, rb) = run(3);
        assert_eq!(a, b);
        assert_eq!(ra, rb);
        assert_eq!(ra.epochs.len(), 1);
    }

    #[test]
    fn config_validation() {
        let mut c = TrainConfig::default();
        c.lr_decay_factor = 1.5;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        let mut c = TrainConfig::default();
        c.learning_rate = 0.0;
        assert!(c.validate().is_err());
        let mut c = TrainConfig::default();
        c.beta_max = 2.0;
        assert!(c.validate().is_err());
    }
}
