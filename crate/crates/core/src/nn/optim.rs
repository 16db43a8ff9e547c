//! SGD with momentum and Adam over flat parameter lists.

use std::f64::consts::PI;

/// `base_lr * 0.5 * (1 + cos(pi * step / total))`, clamped at `step >= total`.
pub fn cosine_lr(base_lr: f64, step: usize, total: usize) -> f64 {
    if total == 0 {
        return base_lr;
    }
    let t = step.min(total) as f64 / total as f64;
    base_lr * 0.5 * (1.0 + (PI * t).cos())
}

#[derive(Debug, Clone)]
pub struct Sgd {
    pub momentum: f64,
    velocity: Vec<Vec<f64>>,
    pub steps: usize,
}

impl Sgd {
    pub fn new(momentum: f64) -> Self {
        Self { momentum, velocity: Vec::new(), steps: 0 }
    }

    pub fn step(&mut self, params: &mut [&mut Vec<f64>], grads: &[Vec<f64>], lr: f64) {
        if self.velocity.is_empty() {
            self.velocity = grads.iter().map(|g| vec![0.0; g.len()]).collect();
        }
        for ((p, g), v) in params.iter_mut().zip(grads).zip(&mut self.velocity) {
            for ((pi, gi), vi) in p.iter_mut().zip(g).zip(v.iter_mut()) {
                *vi = self.momentum * *vi + gi;
                *pi -= lr * *vi;
            }
        }
        self.steps += 1;
    }
}

#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Default for Adam {
    fn default() -> Self {
        Self::new(0.9, 0.999, 1e-8)
    }
}

impl Adam {
    pub fn new(beta1: f64, beta2: f64, eps: f64) -> Self {
        Self { beta1, beta2, eps, t: 0, m: Vec::new(), v: Vec::new() }
    }

    pub fn steps(&self) -> usize {
        self.t as usize
    }

    pub fn step(&mut self, params: &mut [&mut Vec<f64>], grads: &[Vec<f64>], lr: f64) {
        if self.m.is_empty() {
            self.m = grads.iter().map(|g| vec![0.0; g.len()]).collect();
            self.v = self.m.clone();
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            for i in 0..p.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                p[i] -= lr * mh / (vh.sqrt() + self.eps);
            }
        }
    }
}
