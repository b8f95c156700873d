use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub min_lr: f64,
    pub warmup_steps: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip; 0 disables clipping.
    pub grad_clip: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            lr: 3e-3,
            min_lr: 3e-4,
            warmup_steps: 100,
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-8,
            weight_decay: 0.0,
            grad_clip: 1.0,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::Config(format!("optimizer: {msg}")));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be positive");
        }
        if !(0.0..=self.lr).contains(&self.min_lr) {
            return bad("min_lr must lie in [0, lr]");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("betas must lie in [0, 1)");
        }
        if self.eps <= 0.0 || self.weight_decay < 0.0 || self.grad_clip < 0.0 {
            return bad("eps must be positive; weight_decay and grad_clip non-negative");
        }
        Ok(())
    }

    /// Linear warmup to `lr`, then cosine decay to `min_lr` at `total_steps`.
    pub fn learning_rate(&self, step: u64, total_steps: u64) -> f64 {
        if step < self.warmup_steps {
            return self.lr * (step + 1) as f64 / self.warmup_steps as f64;
        }
        let span = total_steps.saturating_sub(self.warmup_steps).max(1) as f64;
        let progress = ((step - self.warmup_steps) as f64 / span).min(1.0);
        self.min_lr + 0.5 * (self.lr - self.min_lr) * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

/// Adam moments plus the number of updates applied.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub updates: u64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        AdamState {
            m: vec![0.0; n],
            v: vec![0.0; n],
            updates: 0,
        }
    }

    /// Clips `grads` in place, applies one decoupled-weight-decay Adam update
    /// and returns the pre-clip gradient norm.
    pub fn step(&mut self, cfg: &OptimizerConfig, lr: f64, params: &mut [f64], grads: &mut [f64]) -> f64 {
        assert_eq!(params.len(), grads.len());
        assert_eq!(params.len(), self.m.len());
        let norm = grads.iter().map(|g| g * g).sum::<f64>().sqrt();
        if cfg.grad_clip > 0.0 && norm > cfg.grad_clip {
            let s = cfg.grad_clip / norm;
            grads.iter_mut().for_each(|g| *g *= s);
        }
        self.updates += 1;
        let t = self.updates as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = cfg.beta1 * self.m[i] + (1.0 - cfg.beta1) * g;
            self.v[i] = cfg.beta2 * self.v[i] + (1.0 - cfg.beta2) * g * g;
            let mhat = self.m[i] / bc1;
            let vhat = self.v[i] / bc2;
            params[i] -= lr * (mhat / (vhat.sqrt() + cfg.eps) + cfg.weight_decay * params[i]);
        }
        norm
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_warms_up_then_decays() {
        let cfg = OptimizerConfig {
            lr: 1.0,
            min_lr: 0.1,
            warmup_steps: 10,
            ..Default::default()
        };
        assert!((cfg.learning_rate(0, 110) - 0.1).abs() < 1e-12);
        assert!((cfg.learning_rate(9, 110) - 1.0).abs() < 1e-12);
        assert!((cfg.learning_rate(10, 110) - 1.0).abs() < 1e-12);
        assert!((cfg.learning_rate(60, 110) - 0.55).abs() < 1e-12);
        assert!((cfg.learning_rate(110, 110) - 0.1).abs() < 1e-12);
        let mut prev = f64::INFINITY;
        for t in 10..110 {
            let lr = cfg.learning_rate(t, 110);
            assert!(lr <= prev);
            prev = lr;
        }
    }

    #[test]
    fn first_adam_step_moves_by_lr() {
        let cfg = OptimizerConfig {
            grad_clip: 0.0,
            eps: 1e-12,
            ..Default::default()
        };
        let mut st = AdamState::new(2);
        let mut p = vec![1.0, -1.0];
        let mut g = vec![0.5, -2.0];
        st.step(&cfg, 0.1, &mut p, &mut g);
        assert!((p[0] - 0.9).abs() < 1e-9);
        assert!((p[1] + 0.9).abs() < 1e-9);
    }

    #[test]
    fn clipping_bounds_the_norm() {
        let cfg = OptimizerConfig {
            grad_clip: 1.0,
            ..Default::default()
        };
        let mut st = AdamState::new(2);
        let mut p = vec![0.0; 2];
        let mut g = vec![3.0, 4.0];
        let norm = st.step(&cfg, 0.0, &mut p, &mut g);
        assert_eq!(norm, 5.0);
        assert!((g[0] - 0.6).abs() < 1e-12 && (g[1] - 0.8).abs() < 1e-12);
    }

    #[test]
    fn validation() {
        assert!(OptimizerConfig::default().validate().is_ok());
        let bad = OptimizerConfig {
            lr: -1.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }
}
