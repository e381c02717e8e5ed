use serde::{Deserialize, Serialize};

use crate::error::{GidError, Result};
use crate::nn::{Param, Real};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Fractions of the total step count at which the rate drops tenfold.
    pub milestones: Vec<f64>,
    /// Linear ramp from `lr / 10` over this many steps.
    pub warmup_steps: usize,
    /// Global L2 norm cap on the gradient; 0 disables clipping.
    pub grad_clip: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr: 0.01,
            momentum: 0.9,
            weight_decay: 1e-4,
            milestones: vec![2.0 / 3.0, 8.0 / 9.0],
            warmup_steps: 100,
            grad_clip: 10.0,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(GidError::config("optim.lr", "must be positive"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(GidError::config("optim.momentum", "must lie in [0, 1)"));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(GidError::config("optim.weight_decay", "must be non-negative"));
        }
        if self.milestones.iter().any(|m| !(0.0..=1.0).contains(m)) {
            return Err(GidError::config("optim.milestones", "fractions must lie in [0, 1]"));
        }
        if !(self.grad_clip >= 0.0) {
            return Err(GidError::config("optim.grad_clip", "must be non-negative"));
        }
        Ok(())
    }

    /// Learning rate for `step` (0-based) of `total`.
    pub fn lr_at(&self, step: usize, total: usize) -> f64 {
        let drops = self
            .milestones
            .iter()
            .filter(|&&m| step >= (m * total as f64).round() as usize)
            .count();
        let mut lr = self.lr * 0.1f64.powi(drops as i32);
        if step < self.warmup_steps {
            let t = step as f64 / self.warmup_steps as f64;
            lr *= 0.1 + 0.9 * t;
        }
        lr
    }
}

/// SGD with heavy-ball momentum and L2 weight decay added to the gradient.
#[derive(Debug, Clone, Default)]
pub struct Sgd<F> {
    velocity: Vec<Vec<F>>,
}

impl<F: Real> Sgd<F> {
    pub fn new() -> Self {
        Self { velocity: Vec::new() }
    }

    /// Global gradient norm of `params`.
    pub fn grad_norm(params: &[(String, &mut Param<F>)]) -> f64 {
        params
            .iter()
            .flat_map(|(_, p)| p.grad.iter())
            .map(|g| g.as_f64() * g.as_f64())
            .sum::<f64>()
            .sqrt()
    }

    /// Applies one update. `params` must come in the same order every call.
    pub fn step(&mut self, params: &mut [(String, &mut Param<F>)], cfg: &OptimConfig, lr: f64) {
        if self.velocity.is_empty() {
            self.velocity = params.iter().map(|(_, p)| vec![F::zero(); p.value.len()]).collect();
        }
        assert_eq!(self.velocity.len(), params.len(), "parameter set changed between steps");
        let mut scale = 1.0;
        if cfg.grad_clip > 0.0 {
            let norm = Self::grad_norm(params);
            if norm > cfg.grad_clip {
                scale = cfg.grad_clip / norm;
            }
        }
        let (scale, wd, mom, lr) = (
            F::from_f64_lossy(scale),
            F::from_f64_lossy(cfg.weight_decay),
            F::from_f64_lossy(cfg.momentum),
            F::from_f64_lossy(lr),
        );
        for ((_, p), vel) in params.iter_mut().zip(&mut self.velocity) {
            for ((w, g), v) in p.value.iter_mut().zip(&p.grad).zip(vel.iter_mut()) {
                let d = *g * scale + wd * *w;
                *v = mom * *v + d;
                *w = *w - lr * *v;
            }
        }
    }
}
