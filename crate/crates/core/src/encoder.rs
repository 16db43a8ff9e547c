//! Window → embedding.
//!
//! Two backends share the [`Encoder`] interface:
//!
//! * a fixed statistical-feature extractor (18 values per window), and
//! * a three-stage 1-D convolutional network with global max pooling,
//!   pre-trained contrastively on pairs of randomly rotated views.

use std::ops::Deref;

use log::debug;
use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};

use crate::dataset::SensorWindow;
use crate::error::{Error, Result};
use crate::nn::layers::{self, Conv1d, Dense};
use crate::nn::{cosine_lr, nt_xent, Sgd};
use crate::params::ParamContainer;
use crate::seed::{self, Rng};

/// Latent vector produced by an encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding(pub Vec<f64>);

impl Deref for Embedding {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl From<Vec<f64>> for Embedding {
    fn from(v: Vec<f64>) -> Self {
        Self(v)
    }
}

pub const STAT_FEATURES: usize = 18;

/// Per axis: mean, standard deviation, min, max, energy (mean of squares);
/// then Pearson correlations xy, xz, yz. A correlation involving a constant
/// axis is 0.
pub fn extract_stat_features(window: &SensorWindow) -> Embedding {
    let n = window.len() as f64;
    let mut out = Vec::with_capacity(STAT_FEATURES);
    let mut means = [0.0; 3];
    let mut stds = [0.0; 3];
    for axis in 0..3 {
        let vals = window.values.iter().map(|v| v[axis]);
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        let mut sum = 0.0;
        let mut sq = 0.0;
        for v in vals {
            lo = lo.min(v);
            hi = hi.max(v);
            sum += v;
            sq += v * v;
        }
        let mean = sum / n;
        let std = if lo == hi {
            0.0
        } else {
            (window.values.iter().map(|v| (v[axis] - mean).powi(2)).sum::<f64>() / n).sqrt()
        };
        means[axis] = mean;
        stds[axis] = std;
        out.extend_from_slice(&[mean, std, lo, hi, sq / n]);
    }
    for (a, b) in [(0, 1), (0, 2), (1, 2)] {
        let corr = if stds[a] == 0.0 || stds[b] == 0.0 {
            0.0
        } else {
            let cov = window.values.iter().map(|v| (v[a] - means[a]) * (v[b] - means[b])).sum::<f64>() / n;
            (cov / (stds[a] * stds[b])).clamp(-1.0, 1.0)
        };
        out.push(corr);
    }
    Embedding(out)
}

/// 3×3 rotation applied to every sample of a window.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rotation(pub [[f64; 3]; 3]);

impl Rotation {
    pub fn identity() -> Self {
        Rotation([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]])
    }

    /// Uniform over SO(3): normalised Gaussian quaternion.
    pub fn random(rng: &mut Rng) -> Self {
        let mut q: [f64; 4] = [0.0; 4];
        let mut norm = 0.0;
        while norm < 1e-12 {
            q = [0; 4].map(|_| StandardNormal.sample(rng));
            norm = q.iter().map(|v| v * v).sum::<f64>().sqrt();
        }
        let [w, x, y, z] = q.map(|v| v / norm);
        Rotation([
            [1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - z * w), 2.0 * (x * z + y * w)],
            [2.0 * (x * y + z * w), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - x * w)],
            [2.0 * (x * z - y * w), 2.0 * (y * z + x * w), 1.0 - 2.0 * (x * x + y * y)],
        ])
    }

    pub fn apply(&self, window: &SensorWindow) -> SensorWindow {
        let r = &self.0;
        let values = window
            .values
            .iter()
            .map(|v| [0, 1, 2].map(|i| r[i][0] * v[0] + r[i][1] * v[1] + r[i][2] * v[2]))
            .collect();
        SensorWindow { values, ..window.clone() }
    }
}

pub fn random_rotation(window: &SensorWindow, rng: &mut Rng) -> SensorWindow {
    Rotation::random(rng).apply(window)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvArch {
    pub filters: [usize; 3],
    pub kernels: [usize; 3],
}

impl Default for ConvArch {
    fn default() -> Self {
        Self { filters: [32, 64, 96], kernels: [24, 16, 8] }
    }
}

impl ConvArch {
    /// Shortest window that survives all three valid convolutions.
    pub fn min_len(&self) -> usize {
        self.kernels.iter().sum::<usize>() - 2
    }
}

/// Per-axis affine standardisation applied to raw windows before the
/// first convolution.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InputNorm {
    pub mean: [f64; 3],
    pub scale: [f64; 3],
}

impl InputNorm {
    pub fn identity() -> Self {
        Self { mean: [0.0; 3], scale: [1.0; 3] }
    }

    /// Mean and standard deviation of each axis over every sample of
    /// `windows`. Axes with (near) zero spread keep unit scale.
    pub fn fit(windows: &[SensorWindow]) -> Self {
        let n = windows.iter().map(|w| w.len()).sum::<usize>();
        if n == 0 {
            return Self::identity();
        }
        let mut mean = [0.0; 3];
        for row in windows.iter().flat_map(|w| &w.values) {
            for k in 0..3 {
                mean[k] += row[k];
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut var = [0.0; 3];
        for row in windows.iter().flat_map(|w| &w.values) {
            for k in 0..3 {
                var[k] += (row[k] - mean[k]).powi(2);
            }
        }
        let scale = var.map(|v| {
            let sd = (v / n as f64).sqrt();
            if sd > 1e-9 { sd } else { 1.0 }
        });
        Self { mean, scale }
    }

    pub fn apply(&self, window: &SensorWindow) -> SensorWindow {
        let values = window
            .values
            .iter()
            .map(|r| std::array::from_fn(|k| (r[k] - self.mean[k]) / self.scale[k]))
            .collect();
        SensorWindow { values, ..window.clone() }
    }
}

/// Convolutional feature extractor. Dropout is only used by training code.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderModel {
    pub arch: ConvArch,
    pub convs: [Conv1d; 3],
    pub dropout: f64,
    /// Fitted on the pre-training windows; applied by [`Self::encode`] and
    /// [`Self::prepare`].
    pub input_norm: InputNorm,
}

/// Activations kept for the backward pass.
#[derive(Debug, Clone)]
pub struct EncoderTrace {
    input: Vec<f64>,
    lens: [usize; 4],
    acts: [Vec<f64>; 3],
    masks: [Option<Vec<f64>>; 2],
    dropped: [Vec<f64>; 2],
    argmax: Vec<usize>,
}

impl EncoderModel {
    pub fn new(arch: ConvArch, dropout: f64, rng: &mut Rng) -> Self {
        let c1 = Conv1d::new(3, arch.filters[0], arch.kernels[0], rng);
        let c2 = Conv1d::new(arch.filters[0], arch.filters[1], arch.kernels[1], rng);
        let c3 = Conv1d::new(arch.filters[1], arch.filters[2], arch.kernels[2], rng);
        Self { arch, convs: [c1, c2, c3], dropout, input_norm: InputNorm::identity() }
    }

    pub fn output_dim(&self) -> usize {
        self.arch.filters[2]
    }

    fn check_len(&self, len: usize) -> Result<()> {
        if len < self.arch.min_len() {
            return Err(Error::Data(format!(
                "window of {len} samples is shorter than the encoder's receptive field ({})",
                self.arch.min_len()
            )));
        }
        Ok(())
    }

    /// Inference: deterministic, dropout off.
    pub fn encode(&self, window: &SensorWindow) -> Result<Embedding> {
        self.check_len(window.len())?;
        Ok(Embedding(self.forward(self.prepare(window).flat(), window.len(), None).0))
    }

    /// The standardised window that [`Self::forward`] expects.
    pub fn prepare(&self, window: &SensorWindow) -> SensorWindow {
        self.input_norm.apply(window)
    }

    /// Forward pass on an already standardised window; `dropout_rng`
    /// enables dropout between conv stages.
    pub fn forward(&self, x: &[f64], len: usize, mut dropout_rng: Option<&mut Rng>) -> (Vec<f64>, EncoderTrace) {
        let mut lens = [len, 0, 0, 0];
        let mut acts: [Vec<f64>; 3] = Default::default();
        let mut masks: [Option<Vec<f64>>; 2] = [None, None];
        let mut dropped: [Vec<f64>; 2] = Default::default();
        for (i, conv) in self.convs.iter().enumerate() {
            let input: &[f64] = match i {
                0 => x,
                _ => &dropped[i - 1],
            };
            let a = layers::relu(&conv.forward(input, lens[i]));
            lens[i + 1] = lens[i] - conv.kernel + 1;
            if i < 2 {
                let d = match dropout_rng.as_deref_mut() {
                    Some(rng) if self.dropout > 0.0 => {
                        let m = layers::dropout_mask(a.len(), self.dropout, rng);
                        let d = layers::mul(&a, &m);
                        masks[i] = Some(m);
                        d
                    }
                    _ => a.clone(),
                };
                dropped[i] = d;
            }
            acts[i] = a;
        }
        let (pooled, argmax) = layers::global_max_pool(&acts[2], lens[3], self.arch.filters[2]);
        let trace = EncoderTrace { input: x.to_vec(), lens, acts, masks, dropped, argmax };
        (pooled, trace)
    }

    /// Accumulate parameter gradients (ordered as [`Self::params_mut`]) for `dL/dembedding`.
    pub fn backward(&self, trace: &EncoderTrace, grad: &[f64], grads: &mut [Vec<f64>]) {
        let mut g = layers::global_max_pool_backward(&trace.argmax, trace.lens[3], grad);
        for i in (0..3).rev() {
            g = layers::relu_backward(&trace.acts[i], &g);
            let input: &[f64] = if i == 0 { &trace.input } else { &trace.dropped[i - 1] };
            let (gw, gb) = grads[2 * i..2 * i + 2].split_at_mut(1);
            let gx = self.convs[i].backward(input, trace.lens[i], &g, &mut gw[0], &mut gb[0]);
            if i == 0 {
                break;
            }
            g = match &trace.masks[i - 1] {
                Some(m) => layers::mul(&gx, m),
                None => gx,
            };
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Vec<f64>> {
        self.convs.iter_mut().flat_map(|c| [&mut c.weight, &mut c.bias]).collect()
    }

    pub fn zero_grads(&self) -> Vec<Vec<f64>> {
        self.convs.iter().flat_map(|c| [vec![0.0; c.weight.len()], vec![0.0; c.bias.len()]]).collect()
    }

    pub fn to_container(&self) -> ParamContainer {
        let mut c = ParamContainer::new("encoder");
        self.write_into(&mut c, "encoder");
        c
    }

    pub(crate) fn write_into(&self, c: &mut ParamContainer, prefix: &str) {
        c.meta.push((format!("{prefix}.filters"), join(&self.arch.filters)));
        c.meta.push((format!("{prefix}.kernels"), join(&self.arch.kernels)));
        c.meta.push((format!("{prefix}.dropout"), self.dropout.to_string()));
        c.push(format!("{prefix}.input_mean"), vec![3], &self.input_norm.mean);
        c.push(format!("{prefix}.input_scale"), vec![3], &self.input_norm.scale);
        for (i, conv) in self.convs.iter().enumerate() {
            c.push(format!("{prefix}.conv{i}.weight"), vec![conv.out_ch, conv.kernel, conv.in_ch], &conv.weight);
            c.push(format!("{prefix}.conv{i}.bias"), vec![conv.out_ch], &conv.bias);
        }
    }

    /// Load, requiring the stored architecture to equal `expected` when given.
    pub fn from_container(c: &ParamContainer, expected: Option<ConvArch>) -> Result<Self> {
        c.expect_kind("encoder")?;
        Self::read_from(c, "encoder", expected)
    }

    pub(crate) fn read_from(c: &ParamContainer, prefix: &str, expected: Option<ConvArch>) -> Result<Self> {
        let arch = ConvArch {
            filters: parse3(c.require_meta(&format!("{prefix}.filters"))?)?,
            kernels: parse3(c.require_meta(&format!("{prefix}.kernels"))?)?,
        };
        if let Some(exp) = expected {
            if exp != arch {
                return Err(Error::Format(format!("stored encoder architecture {arch:?} does not match configured {exp:?}")));
            }
        }
        let dropout = c
            .require_meta(&format!("{prefix}.dropout"))?
            .parse()
            .map_err(|_| Error::Format("bad dropout".into()))?;
        let to3 = |v: Vec<f64>| -> [f64; 3] { [v[0], v[1], v[2]] };
        let input_norm = InputNorm {
            mean: to3(c.take(&format!("{prefix}.input_mean"), &[3])?),
            scale: to3(c.take(&format!("{prefix}.input_scale"), &[3])?),
        };
        if input_norm.scale.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(Error::Format("encoder input scale must be positive".into()));
        }
        let mut ins = 3;
        let mut convs = Vec::with_capacity(3);
        for i in 0..3 {
            let (o, k) = (arch.filters[i], arch.kernels[i]);
            convs.push(Conv1d {
                in_ch: ins,
                out_ch: o,
                kernel: k,
                weight: c.take(&format!("{prefix}.conv{i}.weight"), &[o, k, ins])?,
                bias: c.take(&format!("{prefix}.conv{i}.bias"), &[o])?,
            });
            ins = o;
        }
        let convs: [Conv1d; 3] = convs.try_into().expect("three stages");
        Ok(Self { arch, convs, dropout, input_norm })
    }
}

fn join(v: &[usize; 3]) -> String {
    format!("{},{},{}", v[0], v[1], v[2])
}

fn parse3(s: &str) -> Result<[usize; 3]> {
    let v: Vec<usize> = s
        .split(',')
        .map(|p| p.trim().parse())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::Format(format!("bad triple '{s}'")))?;
    v.try_into().map_err(|_| Error::Format(format!("bad triple '{s}'")))
}

/// Pre-training head: dense layers with ReLU between them.
#[derive(Debug, Clone)]
pub struct ProjectionHead {
    pub layers: Vec<Dense>,
}

struct HeadTrace {
    inputs: Vec<Vec<f64>>,
    outputs: Vec<Vec<f64>>,
}

impl ProjectionHead {
    pub fn new(input_dim: usize, sizes: &[usize], rng: &mut Rng) -> Self {
        let mut layers = Vec::with_capacity(sizes.len());
        let mut d = input_dim;
        for &s in sizes {
            layers.push(Dense::new(d, s, rng));
            d = s;
        }
        Self { layers }
    }

    fn forward(&self, x: &[f64]) -> (Vec<f64>, HeadTrace) {
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut outputs = Vec::with_capacity(self.layers.len());
        let mut h = x.to_vec();
        let last = self.layers.len() - 1;
        for (i, l) in self.layers.iter().enumerate() {
            let mut y = l.forward(&h);
            if i < last {
                y = layers::relu(&y);
            }
            inputs.push(std::mem::replace(&mut h, y.clone()));
            outputs.push(y);
        }
        (h, HeadTrace { inputs, outputs })
    }

    fn backward(&self, trace: &HeadTrace, grad: &[f64], grads: &mut [Vec<f64>]) -> Vec<f64> {
        let mut g = grad.to_vec();
        let last = self.layers.len() - 1;
        for i in (0..self.layers.len()).rev() {
            if i < last {
                g = layers::relu_backward(&trace.outputs[i], &g);
            }
            let (gw, gb) = grads[2 * i..2 * i + 2].split_at_mut(1);
            g = self.layers[i].backward(&trace.inputs[i], &g, &mut gw[0], &mut gb[0]);
        }
        g
    }

    fn params_mut(&mut self) -> Vec<&mut Vec<f64>> {
        self.layers.iter_mut().flat_map(|l| [&mut l.weight, &mut l.bias]).collect()
    }

    fn zero_grads(&self) -> Vec<Vec<f64>> {
        self.layers.iter().flat_map(|l| [vec![0.0; l.weight.len()], vec![0.0; l.bias.len()]]).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub momentum: f64,
    pub temperature: f64,
    pub dropout: f64,
    pub arch: ConvArch,
    pub projection: Vec<usize>,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 64,
            base_lr: 0.05,
            momentum: 0.9,
            temperature: 0.1,
            dropout: 0.1,
            arch: ConvArch::default(),
            projection: vec![256, 128, 50],
            seed: 0,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("pretrain epochs must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("pretrain batch_size must be >= 1".into()));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::Config("temperature must be > 0".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config("dropout must be in [0, 1)".into()));
        }
        if self.projection.is_empty() {
            return Err(Error::Config("projection head needs at least one layer".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct PretrainOutcome {
    pub model: EncoderModel,
    /// Mean batch loss per epoch.
    pub epoch_losses: Vec<f64>,
    pub steps: usize,
}

/// Contrastive pre-training on unlabeled windows.
///
/// Windows are first standardised per axis with statistics fitted on
/// `windows` (stored in the returned model). Each batch is encoded twice under independent random rotations, passed
/// through the projection head and scored with NT-Xent. Parameters follow
/// SGD with momentum and a per-step cosine-decayed learning rate. The
/// projection head is dropped from the result.
pub fn pretrain(windows: &[SensorWindow], config: &PretrainConfig) -> Result<PretrainOutcome> {
    config.validate()?;
    if windows.is_empty() {
        return Err(Error::Data("no windows to pre-train on".into()));
    }
    let len = windows[0].len();
    if windows.iter().any(|w| w.len() != len) {
        return Err(Error::Data("pre-training windows differ in length".into()));
    }
    if len < config.arch.min_len() {
        return Err(Error::Data(format!(
            "window of {len} samples is shorter than the encoder's receptive field ({})",
            config.arch.min_len()
        )));
    }

    let mut init_rng = seed::derived_rng(config.seed, "pretrain/init");
    let mut aug_rng = seed::derived_rng(config.seed, "pretrain/augment");
    let mut drop_rng = seed::derived_rng(config.seed, "pretrain/dropout");
    let mut order_rng = seed::derived_rng(config.seed, "pretrain/order");

    let mut model = EncoderModel::new(config.arch, config.dropout, &mut init_rng);
    model.input_norm = InputNorm::fit(windows);
    let windows: Vec<SensorWindow> = windows.iter().map(|w| model.prepare(w)).collect();
    let mut head = ProjectionHead::new(model.output_dim(), &config.projection, &mut init_rng);

    let batch = config.batch_size.min(windows.len());
    let steps_per_epoch = windows.len() / batch;
    let total = steps_per_epoch * config.epochs;
    let mut sgd_enc = Sgd::new(config.momentum);
    let mut sgd_head = Sgd::new(config.momentum);
    let mut order: Vec<usize> = (0..windows.len()).collect();
    let mut epoch_losses = Vec::with_capacity(config.epochs);
    let mut step = 0;

    for epoch in 0..config.epochs {
        order.shuffle(&mut order_rng);
        let mut epoch_loss = 0.0;
        for b in 0..steps_per_epoch {
            let idx = &order[b * batch..(b + 1) * batch];
            let mut enc_traces = Vec::with_capacity(2 * batch);
            let mut head_traces = Vec::with_capacity(2 * batch);
            let mut za = Vec::with_capacity(batch);
            let mut zb = Vec::with_capacity(batch);
            for view in 0..2 {
                for &i in idx {
                    let rotated = random_rotation(&windows[i], &mut aug_rng);
                    let (emb, et) = model.forward(rotated.flat(), len, Some(&mut drop_rng));
                    let (z, ht) = head.forward(&emb);
                    enc_traces.push(et);
                    head_traces.push(ht);
                    if view == 0 { za.push(z) } else { zb.push(z) }
                }
            }
            let out = nt_xent(&za, &zb, config.temperature)?;
            let mut g_enc = model.zero_grads();
            let mut g_head = head.zero_grads();
            for (k, gz) in out.grad_a.iter().chain(&out.grad_b).enumerate() {
                let g_emb = head.backward(&head_traces[k], gz, &mut g_head);
                model.backward(&enc_traces[k], &g_emb, &mut g_enc);
            }
            let lr = cosine_lr(config.base_lr, step, total);
            sgd_enc.step(&mut model.params_mut(), &g_enc, lr);
            sgd_head.step(&mut head.params_mut(), &g_head, lr);
            step += 1;
            epoch_loss += out.loss;
        }
        let mean = epoch_loss / steps_per_epoch as f64;
        debug!("pretrain epoch {} loss {:.5}", epoch + 1, mean);
        epoch_losses.push(mean);
    }
    Ok(PretrainOutcome { model, epoch_losses, steps: step })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BackendKind {
    Statistical,
    Conv,
}

impl BackendKind {
    pub fn name(&self) -> &'static str {
        match self {
            BackendKind::Statistical => "statistical",
            BackendKind::Conv => "conv",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.trim() {
            "statistical" | "stat" => Ok(BackendKind::Statistical),
            "conv" => Ok(BackendKind::Conv),
            other => Err(Error::Config(format!("unknown backend '{other}' (statistical | conv)"))),
        }
    }
}

/// Embedding backend selected for a session.
#[derive(Debug, Clone, PartialEq)]
pub enum Encoder {
    Statistical,
    Conv(EncoderModel),
}

impl Encoder {
    pub fn kind(&self) -> BackendKind {
        match self {
            Encoder::Statistical => BackendKind::Statistical,
            Encoder::Conv(_) => BackendKind::Conv,
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            Encoder::Statistical => STAT_FEATURES,
            Encoder::Conv(m) => m.output_dim(),
        }
    }

    pub fn embed(&self, window: &SensorWindow) -> Result<Embedding> {
        match self {
            Encoder::Statistical => Ok(extract_stat_features(window)),
            Encoder::Conv(m) => m.encode(window),
        }
    }
}
