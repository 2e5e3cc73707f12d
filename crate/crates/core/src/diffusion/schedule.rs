//! Noise schedule, forward noising and the deterministic DDIM update.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::numerics::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    /// `beta[t - 1]` for `t = 1..=T`.
    pub beta: Vec<f64>,
    /// `alpha_bar[t]` for `t = 0..=T`, `alpha_bar[0] = 1`.
    pub alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    pub fn beta_at(&self, t: usize) -> f64 {
        self.beta[t - 1]
    }
}

/// Linear `beta` from `beta_min` to `beta_max` over `T` steps.
pub fn make_schedule(steps: usize, beta_min: f64, beta_max: f64) -> Result<NoiseSchedule> {
    if steps == 0 {
        return Err(Error::Config("schedule needs at least one step".into()));
    }
    if !(beta_min > 0.0 && beta_min <= beta_max && beta_max < 1.0) {
        return Err(Error::Config(format!(
            "need 0 < beta_min <= beta_max < 1, got {beta_min}, {beta_max}"
        )));
    }
    let beta: Vec<f64> = (1..=steps)
        .map(|t| {
            if steps == 1 {
                beta_min
            } else {
                beta_min + (t - 1) as f64 * (beta_max - beta_min) / (steps - 1) as f64
            }
        })
        .collect();
    let mut alpha_bar = Vec::with_capacity(steps + 1);
    alpha_bar.push(1.0);
    let mut acc = 1.0;
    for b in &beta {
        acc *= 1.0 - b;
        alpha_bar.push(acc);
    }
    Ok(NoiseSchedule { beta, alpha_bar })
}

/// `S_t = √ᾱ_t·S_0 + √(1−ᾱ_t)·ε`.
pub fn forward_noise(s0: &Tensor, t: usize, eps: &Tensor, sched: &NoiseSchedule) -> Result<Tensor> {
    if t == 0 || t > sched.steps() {
        return Err(Error::Argument(format!(
            "timestep {t} outside [1, {}]",
            sched.steps()
        )));
    }
    let a = sched.alpha_bar[t];
    let (sa, sn) = (a.sqrt(), (1.0 - a).sqrt());
    s0.zip_map(eps, |x, e| sa * x + sn * e)
}

/// Deterministic DDIM update for a network that predicts `S_0`.
pub fn ddim_step(
    s_t: &Tensor,
    s_pred: &Tensor,
    t_now: usize,
    t_next: usize,
    sched: &NoiseSchedule,
) -> Result<Tensor> {
    if t_next >= t_now || t_now > sched.steps() {
        return Err(Error::Argument(format!(
            "ddim step needs 0 <= t_next < t_now <= {}, got {t_now} -> {t_next}",
            sched.steps()
        )));
    }
    if t_next == 0 {
        s_pred.check_same_shape(s_t)?;
        return Ok(s_pred.clone());
    }
    let a_now = sched.alpha_bar[t_now];
    let a_next = sched.alpha_bar[t_next];
    let (sa_now, sn_now) = (a_now.sqrt(), (1.0 - a_now).sqrt());
    let (sa_next, sn_next) = (a_next.sqrt(), (1.0 - a_next).sqrt());
    s_t.zip_map(s_pred, |x, p| {
        let eps = (x - sa_now * p) / sn_now;
        sa_next * p + sn_next * eps
    })
}

/// `[S·T/S, (S−1)·T/S, …, 0]` rounded to the nearest integer when `S`
/// does not divide `T`.
pub fn sample_times(total: usize, steps: usize) -> Result<Vec<usize>> {
    if steps == 0 || steps > total {
        return Err(Error::Config(format!("denoising steps must lie in [1, {total}], got {steps}")));
    }
    Ok((0..=steps)
        .rev()
        .map(|i| ((i * total) as f64 / steps as f64).round() as usize)
        .collect())
}

/// How ground-truth maps are mapped into the diffused signal.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TargetRange {
    /// `[0, 1]`, as stored.
    Unit,
    /// `[-1, 1]` via `2x − 1`.
    Symmetric,
}

impl TargetRange {
    pub fn as_str(self) -> &'static str {
        match self {
            TargetRange::Unit => "unit",
            TargetRange::Symmetric => "symmetric",
        }
    }

    pub fn encode(self, map: &Tensor) -> Tensor {
        match self {
            TargetRange::Unit => map.clone(),
            TargetRange::Symmetric => map.map(|v| 2.0 * v - 1.0),
        }
    }

    /// Back to `[0, 1]`, clamped.
    pub fn decode(self, x: &Tensor) -> Tensor {
        match self {
            TargetRange::Unit => x.map(|v| v.clamp(0.0, 1.0)),
            TargetRange::Symmetric => x.map(|v| ((v + 1.0) / 2.0).clamp(0.0, 1.0)),
        }
    }
}

impl fmt::Display for TargetRange {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TargetRange {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "unit" => Ok(TargetRange::Unit),
            "symmetric" => Ok(TargetRange::Symmetric),
            _ => Err(Error::Config(format!("unknown target range {s:?}"))),
        }
    }
}
