//! First-order optimizers over flat parameter vectors.

use std::fmt;
use std::str::FromStr;

/// Scales `grads` in place so their L2 norm is at most `max_norm`; returns
/// the norm before clipping.
pub fn clip_grad_norm(grads: &mut [f64], max_norm: f64) -> f64 {
    let norm = grads.iter().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        grads.iter_mut().for_each(|g| *g *= s);
    }
    norm
}

pub trait Optimizer {
    fn step(&mut self, params: &mut [f64], grads: &[f64]);
    fn set_lr(&mut self, lr: f64);
}

/// SGD with heavy-ball momentum: `v ← μv + g; θ ← θ − lr·v`.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    velocity: Vec<f64>,
}

impl Sgd {
    pub fn new(n: usize, lr: f64, momentum: f64) -> Self {
        Self {
            lr,
            momentum,
            velocity: vec![0.0; n],
        }
    }
}

impl Optimizer for Sgd {
    fn step(&mut self, params: &mut [f64], grads: &[f64]) {
        for ((p, v), g) in params.iter_mut().zip(&mut self.velocity).zip(grads) {
            *v = self.momentum * *v + g;
            *p -= self.lr * *v;
        }
    }

    fn set_lr(&mut self, lr: f64) {
        self.lr = lr;
    }
}

#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(n: usize, lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }
}

impl Optimizer for Adam {
    fn step(&mut self, params: &mut [f64], grads: &[f64]) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            params[i] -= self.lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + self.eps);
        }
    }

    fn set_lr(&mut self, lr: f64) {
        self.lr = lr;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

impl fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            OptimizerKind::Sgd => "sgd",
            OptimizerKind::Adam => "adam",
        })
    }
}

impl FromStr for OptimizerKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "sgd" => Ok(OptimizerKind::Sgd),
            "adam" => Ok(OptimizerKind::Adam),
            other => Err(format!("unknown optimizer {other:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub momentum: f64,
    /// Gradient-norm clip; non-positive disables.
    pub clip: f64,
    /// Learning rate at the last step as a fraction of `lr`, reached by a
    /// cosine schedule. 1 keeps the rate constant.
    pub final_lr_scale: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            kind: OptimizerKind::Sgd,
            lr: 1e-3,
            momentum: 0.9,
            clip: 10.0,
            final_lr_scale: 1.0,
        }
    }
}

impl OptimizerConfig {
    pub fn build(&self, n: usize) -> Box<dyn Optimizer + Send> {
        match self.kind {
            OptimizerKind::Sgd => Box::new(Sgd::new(n, self.lr, self.momentum)),
            OptimizerKind::Adam => Box::new(Adam::new(n, self.lr)),
        }
    }

    pub fn lr_at(&self, step: usize, total: usize) -> f64 {
        if total <= 1 || self.final_lr_scale == 1.0 {
            return self.lr;
        }
        let t = step as f64 / (total - 1) as f64;
        let cos = 0.5 * (1.0 + (std::f64::consts::PI * t).cos());
        self.lr * (self.final_lr_scale + (1.0 - self.final_lr_scale) * cos)
    }

    /// Clips (if enabled) and applies one update; returns the raw gradient norm.
    pub fn apply(&self, opt: &mut dyn Optimizer, params: &mut [f64], grads: &mut [f64]) -> f64 {
        let norm = if self.clip > 0.0 {
            clip_grad_norm(grads, self.clip)
        } else {
            grads.iter().map(|g| g * g).sum::<f64>().sqrt()
        };
        opt.step(params, grads);
        norm
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clip_scales_to_max() {
        let mut g = vec![3.0, 4.0];
        assert_eq!(clip_grad_norm(&mut g, 1.0), 5.0);
        assert!((g[0] - 0.6).abs() < 1e-15 && (g[1] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn both_minimize_a_quadratic() {
        for cfg in [
            OptimizerConfig { lr: 0.05, ..Default::default() },
            OptimizerConfig { kind: OptimizerKind::Adam, lr: 0.05, ..Default::default() },
        ] {
            let mut opt = cfg.build(2);
            let mut p = vec![3.0, -2.0];
            for _ in 0..2000 {
                let mut g = vec![2.0 * p[0], 4.0 * p[1]];
                cfg.apply(opt.as_mut(), &mut p, &mut g);
            }
            assert!(p[0].abs() < 1e-3 && p[1].abs() < 1e-3, "{cfg:?} -> {p:?}");
        }
    }
}
