//! AdamW and a reduce-on-plateau learning-rate controller.

use crate::error::{Error, Result};
use crate::nn::Parameters;

#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled decay, applied to matrices only (not biases, gains or
    /// vectors).
    pub weight_decay: f64,
    step: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl AdamW {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn step<P: Parameters>(&mut self, params: &mut P, grad: &P) -> Result<()> {
        let g = grad.flatten();
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite gradient".into()));
        }
        if self.m.is_empty() {
            self.m = vec![0.0; g.len()];
            self.v = vec![0.0; g.len()];
        }
        if self.m.len() != g.len() {
            return Err(Error::Argument("optimizer bound to a different parameter set".into()));
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let (lr, wd, b1, b2, eps) = (self.lr, self.weight_decay, self.beta1, self.beta2, self.eps);
        let (m, v) = (&mut self.m, &mut self.v);
        let mut off = 0;
        params.visit_mut("", &mut |_, t| {
            let decay = if t.rank() >= 2 { 1.0 - lr * wd } else { 1.0 };
            for p in t.data_mut() {
                let gi = g[off];
                m[off] = b1 * m[off] + (1.0 - b1) * gi;
                v[off] = b2 * v[off] + (1.0 - b2) * gi * gi;
                let mh = m[off] / bc1;
                let vh = v[off] / bc2;
                *p = *p * decay - lr * mh / (vh.sqrt() + eps);
                off += 1;
            }
        });
        Ok(())
    }
}

/// Scales `g` so its global L2 norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_grad_norm<P: Parameters>(g: &mut P, max_norm: f64) -> f64 {
    let norm = g.flatten().iter().map(|v| v * v).sum::<f64>().sqrt();
    if max_norm > 0.0 && norm > max_norm {
        g.scale_all(max_norm / norm);
    }
    norm
}

/// Multiplies the learning rate by `factor` after `patience` epochs
/// without a new best validation loss.
#[derive(Debug, Clone, PartialEq)]
pub struct ReduceOnPlateau {
    pub factor: f64,
    pub patience: usize,
    best: f64,
    stale: usize,
}

impl ReduceOnPlateau {
    pub fn new(factor: f64, patience: usize) -> Result<Self> {
        if !(factor > 0.0 && factor < 1.0) {
            return Err(Error::Config(format!("lr decay factor must lie in (0, 1), got {factor}")));
        }
        Ok(Self {
            factor,
            patience,
            best: f64::INFINITY,
            stale: 0,
        })
    }

    /// Records a validation loss; returns the new learning rate.
    pub fn observe(&mut self, val_loss: f64, lr: f64) -> f64 {
        if val_loss < self.best {
            self.best = val_loss;
            self.stale = 0;
            return lr;
        }
        self.stale += 1;
        if self.stale > self.patience {
            self.stale = 0;
            return lr * self.factor;
        }
        lr
    }

    pub fn best(&self) -> f64 {
        self.best
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Linear;
    use crate::numerics::Tensor;

    #[test]
    fn adamw_first_step_moves_by_lr() {
        let mut p = Linear {
            weight: Tensor::new(&[1, 2], vec![1.0, -1.0]).unwrap(),
            bias: Some(Tensor::new(&[2], vec![0.5, 0.5]).unwrap()),
        };
        let g = Linear {
            weight: Tensor::new(&[1, 2], vec![3.0, -0.2]).unwrap(),
            bias: Some(Tensor::new(&[2], vec![0.0, 1.0]).unwrap()),
        };
        let mut opt = AdamW::new(0.1, 0.0);
        opt.step(&mut p, &g).unwrap();
        // bias-corrected first step is lr · sign(g)
        assert!((p.weight.data()[0] - 0.9).abs() < 1e-6);
        assert!((p.weight.data()[1] + 0.9).abs() < 1e-6);
        assert_eq!(p.bias.as_ref().unwrap().data()[0], 0.5);
        assert!((p.bias.as_ref().unwrap().data()[1] - 0.4).abs() < 1e-6);
    }

    #[test]
    fn weight_decay_on_matrices_only() {
        let mut p = Linear {
            weight: Tensor::new(&[1, 1], vec![2.0]).unwrap(),
            bias: Some(Tensor::new(&[1], vec![2.0]).unwrap()),
        };
        let mut g = p.clone();
        g.zero();
        let mut opt = AdamW::new(0.1, 0.5);
        opt.step(&mut p, &g).unwrap();
        assert!((p.weight.data()[0] - 2.0 * 0.95).abs() < 1e-15);
        assert_eq!(p.bias.as_ref().unwrap().data()[0], 2.0);
    }

    #[test]
    fn adamw_minimises_quadratic() {
        let mut p = Linear::zeros(1, 3, false);
        let target = [1.0, -2.0, 0.5];
        let mut opt = AdamW::new(0.05, 0.0);
        for _ in 0..2000 {
            let mut g = p.clone();
            for (gv, (pv, t)) in g.weight.data_mut().iter_mut().zip(p.weight.data().iter().zip(target)) {
                *gv = 2.0 * (pv - t);
            }
            opt.step(&mut p, &g).unwrap();
        }
        for (a, b) in p.weight.data().iter().zip(target) {
            assert!((a - b).abs() < 1e-3);
        }
    }

    #[test]
    fn non_finite_gradient_rejected() {
        let mut p = Linear::zeros(1, 1, false);
        let mut g = p.clone();
        g.weight.data_mut()[0] = f64::NAN;
        assert!(matches!(AdamW::new(0.1, 0.0).step(&mut p, &g), Err(Error::Numeric(_))));
    }

    #[test]
    fn clipping() {
        let mut g = Linear {
            weight: Tensor::new(&[1, 2], vec![3.0, 4.0]).unwrap(),
            bias: None,
        };
        assert_eq!(clip_grad_norm(&mut g, 1.0), 5.0);
        assert!((g.weight.data()[0] - 0.6).abs() < 1e-15);
        assert_eq!(clip_grad_norm(&mut g, 0.0), 1.0);
    }

    #[test]
    fn plateau_schedule() {
        let mut s = ReduceOnPlateau::new(0.2, 2).unwrap();
        let mut lr = 1.0;
        for loss in [5.0, 4.0, 4.5, 4.5] {
            lr = s.observe(loss, lr);
        }
        assert_eq!(lr, 1.0);
        lr = s.observe(4.2, lr);
        assert_eq!(lr, 0.2);
        lr = s.observe(3.0, lr);
        assert_eq!(lr, 0.2);
        assert_eq!(s.best(), 3.0);
        assert!(ReduceOnPlateau::new(1.0, 5).is_err());
    }
}
