//! Layers with explicit forward/backward passes.
//!
//! Tensors are flat row-major `f64` buffers. Sequences are laid out as
//! `(time, channels)` so that a convolution's receptive field at output step
//! `t` is the contiguous slice `x[t*C .. (t+K)*C]`.

use rand::Rng as _;

use crate::seed::Rng;

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 4];
    let ca = a.chunks_exact(4);
    let cb = b.chunks_exact(4);
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        acc[0] += x[0] * y[0];
        acc[1] += x[1] * y[1];
        acc[2] += x[2] * y[2];
        acc[3] += x[3] * y[3];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// `y += alpha * x`
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Kaiming-uniform initialisation for ReLU networks: U(-b, b), b = sqrt(6 / fan_in).
pub fn kaiming_uniform(n: usize, fan_in: usize, rng: &mut Rng) -> Vec<f64> {
    let bound = (6.0 / fan_in as f64).sqrt();
    (0..n).map(|_| rng.random_range(-bound..bound)).collect()
}

/// Valid (unpadded) 1-D convolution, stride 1.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv1d {
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    /// `(out_ch, kernel, in_ch)`
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Conv1d {
    pub fn new(in_ch: usize, out_ch: usize, kernel: usize, rng: &mut Rng) -> Self {
        let fan_in = kernel * in_ch;
        Self {
            in_ch,
            out_ch,
            kernel,
            weight: kaiming_uniform(out_ch * fan_in, fan_in, rng),
            bias: vec![0.0; out_ch],
        }
    }

    pub fn out_len(&self, len: usize) -> Option<usize> {
        (len >= self.kernel).then(|| len - self.kernel + 1)
    }

    /// `x` is `(len, in_ch)`; returns `(len - kernel + 1, out_ch)`.
    pub fn forward(&self, x: &[f64], len: usize) -> Vec<f64> {
        debug_assert_eq!(x.len(), len * self.in_ch);
        let out_len = self.out_len(len).expect("input shorter than kernel");
        let field = self.kernel * self.in_ch;
        let mut y = vec![0.0; out_len * self.out_ch];
        for t in 0..out_len {
            let xs = &x[t * self.in_ch..t * self.in_ch + field];
            let row = &mut y[t * self.out_ch..(t + 1) * self.out_ch];
            for (o, yo) in row.iter_mut().enumerate() {
                *yo = self.bias[o] + dot(&self.weight[o * field..(o + 1) * field], xs);
            }
        }
        y
    }

    /// Accumulates parameter gradients into `gw`/`gb` and returns `dL/dx`.
    pub fn backward(&self, x: &[f64], len: usize, grad_out: &[f64], gw: &mut [f64], gb: &mut [f64]) -> Vec<f64> {
        let out_len = self.out_len(len).expect("input shorter than kernel");
        let field = self.kernel * self.in_ch;
        let mut gx = vec![0.0; x.len()];
        for t in 0..out_len {
            let lo = t * self.in_ch;
            let xs = &x[lo..lo + field];
            let g = &grad_out[t * self.out_ch..(t + 1) * self.out_ch];
            for (o, &go) in g.iter().enumerate() {
                if go == 0.0 {
                    continue;
                }
                gb[o] += go;
                axpy(go, xs, &mut gw[o * field..(o + 1) * field]);
                axpy(go, &self.weight[o * field..(o + 1) * field], &mut gx[lo..lo + field]);
            }
        }
        gx
    }
}

/// Fully connected layer, `y = W x + b` with `W` stored `(out, in)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Dense {
    pub fn new(in_dim: usize, out_dim: usize, rng: &mut Rng) -> Self {
        Self {
            in_dim,
            out_dim,
            weight: kaiming_uniform(in_dim * out_dim, in_dim, rng),
            bias: vec![0.0; out_dim],
        }
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.in_dim);
        (0..self.out_dim)
            .map(|o| self.bias[o] + dot(&self.weight[o * self.in_dim..(o + 1) * self.in_dim], x))
            .collect()
    }

    pub fn backward(&self, x: &[f64], grad_out: &[f64], gw: &mut [f64], gb: &mut [f64]) -> Vec<f64> {
        let mut gx = vec![0.0; self.in_dim];
        for (o, &go) in grad_out.iter().enumerate() {
            if go == 0.0 {
                continue;
            }
            gb[o] += go;
            let rows = o * self.in_dim..(o + 1) * self.in_dim;
            axpy(go, x, &mut gw[rows.clone()]);
            axpy(go, &self.weight[rows], &mut gx);
        }
        gx
    }
}

pub fn relu(x: &[f64]) -> Vec<f64> {
    x.iter().map(|&v| v.max(0.0)).collect()
}

/// Gradient through ReLU given its output.
pub fn relu_backward(out: &[f64], grad: &[f64]) -> Vec<f64> {
    out.iter().zip(grad).map(|(&o, &g)| if o > 0.0 { g } else { 0.0 }).collect()
}

/// Global max pooling over time of a `(len, ch)` buffer. Returns the pooled
/// vector and the winning time index per channel (first maximum wins).
pub fn global_max_pool(x: &[f64], len: usize, ch: usize) -> (Vec<f64>, Vec<usize>) {
    let mut best = x[..ch].to_vec();
    let mut arg = vec![0usize; ch];
    for t in 1..len {
        for c in 0..ch {
            let v = x[t * ch + c];
            if v > best[c] {
                best[c] = v;
                arg[c] = t;
            }
        }
    }
    (best, arg)
}

pub fn global_max_pool_backward(arg: &[usize], len: usize, grad: &[f64]) -> Vec<f64> {
    let ch = arg.len();
    let mut gx = vec![0.0; len * ch];
    for c in 0..ch {
        gx[arg[c] * ch + c] = grad[c];
    }
    gx
}

/// Inverted dropout mask: each entry is 0 with probability `rate`, otherwise `1 / (1 - rate)`.
pub fn dropout_mask(n: usize, rate: f64, rng: &mut Rng) -> Vec<f64> {
    if rate <= 0.0 {
        return vec![1.0; n];
    }
    let keep = 1.0 / (1.0 - rate);
    (0..n).map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep }).collect()
}

pub fn mul(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x * y).collect()
}
