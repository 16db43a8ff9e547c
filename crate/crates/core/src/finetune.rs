//! Personalized classifier trained on the actively labeled windows.
//!
//! The head is sized from the labels actually collected: a standardisation
//! of the embedding, a ReLU hidden layer and one softmax output per class.
//! With the convolutional backend the encoder is optionally trained jointly.

use std::collections::BTreeSet;

use log::{debug, info};
use rand::seq::SliceRandom;

use crate::dataset::SensorWindow;
use crate::encoder::{Encoder, EncoderModel, EncoderTrace};
use crate::error::{Error, Result};
use crate::nn::layers::{self, Dense};
use crate::nn::{cross_entropy, softmax, Adam};
use crate::params::ParamContainer;
use crate::seed::{self, Rng};

#[derive(Debug, Clone, PartialEq)]
pub struct FineTuneConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub patience: usize,
    pub val_fraction: f64,
    pub unfreeze_encoder: bool,
    pub hidden: usize,
    pub seed: u64,
}

impl Default for FineTuneConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 1,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            patience: 5,
            val_fraction: 0.1,
            unfreeze_encoder: true,
            hidden: 1024,
            seed: 0,
        }
    }
}

impl FineTuneConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return Err(Error::Config(format!("validation fraction {} outside (0, 1)", self.val_fraction)));
        }
        if self.patience < 1 || self.epochs < 1 || self.batch_size < 1 || self.hidden < 1 {
            return Err(Error::Config("epochs, batch_size, patience and hidden must be >= 1".into()));
        }
        if !(self.lr > 0.0) {
            return Err(Error::Config("learning rate must be > 0".into()));
        }
        Ok(())
    }
}

/// Dense(1024) + ReLU, then one softmax unit per class.
#[derive(Debug, Clone, PartialEq)]
pub struct FineTuneHead {
    /// Class index → label, sorted.
    pub labels: Vec<String>,
    pub input_mean: Vec<f64>,
    pub input_scale: Vec<f64>,
    pub hidden: Dense,
    pub output: Dense,
}

struct HeadTrace {
    scaled: Vec<f64>,
    hidden: Vec<f64>,
}

impl FineTuneHead {
    /// One output unit per distinct label; weights seeded-random.
    pub fn build(labels: &[String], input_dim: usize, hidden: usize, rng: &mut Rng) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::Data("cannot build a classification head without labeled samples".into()));
        }
        let table: Vec<String> = labels.iter().cloned().collect::<BTreeSet<_>>().into_iter().collect();
        let hidden_layer = Dense::new(input_dim, hidden, rng);
        let output = Dense::new(hidden, table.len(), rng);
        Ok(Self { labels: table, input_mean: vec![0.0; input_dim], input_scale: vec![1.0; input_dim], hidden: hidden_layer, output })
    }

    pub fn n_classes(&self) -> usize {
        self.labels.len()
    }

    pub fn class_index(&self, label: &str) -> Option<usize> {
        self.labels.iter().position(|l| l == label)
    }

    /// Standardise inputs with per-dimension mean and std of `embeddings`.
    pub fn fit_scaler(&mut self, embeddings: &[Vec<f64>]) {
        let dim = self.input_mean.len();
        let n = embeddings.len() as f64;
        for d in 0..dim {
            let mean = embeddings.iter().map(|e| e[d]).sum::<f64>() / n;
            let var = embeddings.iter().map(|e| (e[d] - mean).powi(2)).sum::<f64>() / n;
            self.input_mean[d] = mean;
            self.input_scale[d] = if var > 1e-24 { 1.0 / var.sqrt() } else { 1.0 };
        }
    }

    pub fn logits(&self, emb: &[f64]) -> Vec<f64> {
        self.forward(emb).0
    }

    pub fn probabilities(&self, emb: &[f64]) -> Vec<f64> {
        softmax(&self.logits(emb))
    }

    fn forward(&self, emb: &[f64]) -> (Vec<f64>, HeadTrace) {
        let scaled: Vec<f64> = emb.iter().zip(&self.input_mean).zip(&self.input_scale).map(|((e, m), s)| (e - m) * s).collect();
        let hidden = layers::relu(&self.hidden.forward(&scaled));
        let logits = self.output.forward(&hidden);
        (logits, HeadTrace { scaled, hidden })
    }

    /// Accumulates into `grads` (hidden.w, hidden.b, output.w, output.b); returns `dL/dembedding`.
    fn backward(&self, trace: &HeadTrace, grad_logits: &[f64], grads: &mut [Vec<f64>]) -> Vec<f64> {
        let (gh, go) = grads.split_at_mut(2);
        let (gow, gob) = go.split_at_mut(1);
        let g_hidden = self.output.backward(&trace.hidden, grad_logits, &mut gow[0], &mut gob[0]);
        let g_pre = layers::relu_backward(&trace.hidden, &g_hidden);
        let (ghw, ghb) = gh.split_at_mut(1);
        let g_scaled = self.hidden.backward(&trace.scaled, &g_pre, &mut ghw[0], &mut ghb[0]);
        g_scaled.iter().zip(&self.input_scale).map(|(g, s)| g * s).collect()
    }

    /// Cross-entropy loss of one sample and its parameter gradients.
    pub fn loss_and_grads(&self, emb: &[f64], target: usize) -> (f64, Vec<Vec<f64>>) {
        let (logits, trace) = self.forward(emb);
        let (loss, gl) = cross_entropy(&logits, target);
        let mut grads = self.zero_grads();
        self.backward(&trace, &gl, &mut grads);
        (loss, grads)
    }

    pub fn params_mut(&mut self) -> Vec<&mut Vec<f64>> {
        vec![&mut self.hidden.weight, &mut self.hidden.bias, &mut self.output.weight, &mut self.output.bias]
    }

    pub fn zero_grads(&self) -> Vec<Vec<f64>> {
        vec![
            vec![0.0; self.hidden.weight.len()],
            vec![0.0; self.hidden.bias.len()],
            vec![0.0; self.output.weight.len()],
            vec![0.0; self.output.bias.len()],
        ]
    }
}

/// Encoder plus head; immutable after training.
#[derive(Debug, Clone, PartialEq)]
pub struct Classifier {
    pub encoder: Encoder,
    pub head: FineTuneHead,
}

impl Classifier {
    pub fn labels(&self) -> &[String] {
        &self.head.labels
    }

    pub fn probabilities(&self, window: &SensorWindow) -> Result<Vec<f64>> {
        Ok(self.head.probabilities(&self.encoder.embed(window)?))
    }

    /// Most probable label (smallest class index on ties) and its probability.
    pub fn predict(&self, window: &SensorWindow) -> Result<(String, f64)> {
        let p = self.probabilities(window)?;
        let mut best = 0;
        for (i, &v) in p.iter().enumerate() {
            if v > p[best] {
                best = i;
            }
        }
        Ok((self.head.labels[best].clone(), p[best]))
    }

    pub fn to_container(&self) -> ParamContainer {
        let h = &self.head;
        let mut c = ParamContainer::new("classifier")
            .with_meta("classifier.backend", self.encoder.kind().name())
            .with_meta("classifier.hidden", h.hidden.out_dim)
            .with_meta("classifier.input_dim", h.hidden.in_dim)
            .with_meta("labels.count", h.labels.len());
        for (i, l) in h.labels.iter().enumerate() {
            c.meta.push((format!("labels.{i}"), l.clone()));
        }
        if let Encoder::Conv(m) = &self.encoder {
            m.write_into(&mut c, "encoder");
        }
        let (d, k, n) = (h.hidden.in_dim, h.hidden.out_dim, h.labels.len());
        c.push("head.input_mean", vec![d], &h.input_mean);
        c.push("head.input_scale", vec![d], &h.input_scale);
        c.push("head.hidden.weight", vec![k, d], &h.hidden.weight);
        c.push("head.hidden.bias", vec![k], &h.hidden.bias);
        c.push("head.output.weight", vec![n, k], &h.output.weight);
        c.push("head.output.bias", vec![n], &h.output.bias);
        c
    }

    pub fn from_container(c: &ParamContainer) -> Result<Self> {
        c.expect_kind("classifier")?;
        let num = |key: &str| -> Result<usize> { c.require_meta(key)?.parse().map_err(|_| Error::Format(format!("bad '{key}'"))) };
        let (d, k, n) = (num("classifier.input_dim")?, num("classifier.hidden")?, num("labels.count")?);
        let labels = (0..n).map(|i| c.require_meta(&format!("labels.{i}")).map(str::to_string)).collect::<Result<Vec<_>>>()?;
        let encoder = match c.require_meta("classifier.backend")? {
            "statistical" => Encoder::Statistical,
            "conv" => Encoder::Conv(EncoderModel::read_from(c, "encoder", None)?),
            other => return Err(Error::Format(format!("unknown backend '{other}'"))),
        };
        if encoder.dim() != d {
            return Err(Error::Format(format!("head input {d} does not match encoder output {}", encoder.dim())));
        }
        let head = FineTuneHead {
            labels,
            input_mean: c.take("head.input_mean", &[d])?,
            input_scale: c.take("head.input_scale", &[d])?,
            hidden: Dense { in_dim: d, out_dim: k, weight: c.take("head.hidden.weight", &[k, d])?, bias: c.take("head.hidden.bias", &[k])? },
            output: Dense { in_dim: k, out_dim: n, weight: c.take("head.output.weight", &[n, k])?, bias: c.take("head.output.bias", &[n])? },
        };
        Ok(Self { encoder, head })
    }
}

/// Validation-loss early stopping. `observe` returns true when training
/// should stop.
#[derive(Debug, Clone)]
pub struct EarlyStopping {
    patience: usize,
    best: f64,
    best_epoch: Option<usize>,
    since_best: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self { patience, best: f64::INFINITY, best_epoch: None, since_best: 0 }
    }

    pub fn observe(&mut self, epoch: usize, loss: f64) -> (bool, bool) {
        if loss < self.best {
            self.best = loss;
            self.best_epoch = Some(epoch);
            self.since_best = 0;
            (true, false)
        } else {
            self.since_best += 1;
            (false, self.since_best >= self.patience)
        }
    }

    pub fn best_epoch(&self) -> Option<usize> {
        self.best_epoch
    }
}

/// Train/validation index split. Stratified (every class keeps at least one
/// training sample) when class counts allow, otherwise a seeded random split.
pub fn split_indices(labels: &[String], fraction: f64, rng: &mut Rng) -> (Vec<usize>, Vec<usize>) {
    let n = labels.len();
    let n_val = ((fraction * n as f64).round() as usize).clamp(1, n.saturating_sub(1));
    let classes: Vec<&String> = labels.iter().collect::<BTreeSet<_>>().into_iter().collect();
    let members: Vec<Vec<usize>> = classes.iter().map(|c| (0..n).filter(|&i| &labels[i] == *c).collect()).collect();
    let capacity: usize = members.iter().map(|m| m.len() - 1).sum();

    let mut val = Vec::with_capacity(n_val);
    if capacity >= n_val {
        let quota: Vec<f64> = members.iter().map(|m| fraction * m.len() as f64).collect();
        let mut alloc: Vec<usize> = members.iter().zip(&quota).map(|(m, q)| (q.floor() as usize).min(m.len() - 1)).collect();
        let mut rest: Vec<usize> = (0..members.len()).collect();
        rest.sort_by(|&a, &b| (quota[b] - quota[b].floor()).total_cmp(&(quota[a] - quota[a].floor())).then(a.cmp(&b)));
        let mut assigned: usize = alloc.iter().sum();
        while assigned < n_val {
            let mut progressed = false;
            for &c in &rest {
                if assigned < n_val && alloc[c] < members[c].len() - 1 {
                    alloc[c] += 1;
                    assigned += 1;
                    progressed = true;
                }
            }
            if !progressed {
                break;
            }
        }
        while assigned > n_val {
            let c = (0..alloc.len()).rev().find(|&c| alloc[c] > 0).expect("positive allocation");
            alloc[c] -= 1;
            assigned -= 1;
        }
        for (m, &a) in members.iter().zip(&alloc) {
            let mut m = m.clone();
            m.shuffle(rng);
            val.extend_from_slice(&m[..a]);
        }
    } else {
        let mut all: Vec<usize> = (0..n).collect();
        all.shuffle(rng);
        val.extend_from_slice(&all[..n_val]);
    }
    val.sort_unstable();
    let train = (0..n).filter(|i| val.binary_search(i).is_err()).collect();
    (train, val)
}

#[derive(Debug, Clone)]
pub struct FineTuneOutcome {
    pub classifier: Classifier,
    pub train_losses: Vec<f64>,
    pub val_losses: Vec<f64>,
    /// 0-based epoch whose parameters were kept.
    pub best_epoch: usize,
    pub epochs_run: usize,
}

/// Train a classifier on `labeled` windows.
///
/// Cross entropy with Adam; validation loss is checked once per epoch and
/// the parameters of the best validation epoch are returned.
pub fn fine_tune(encoder: &Encoder, labeled: &[(SensorWindow, String)], config: &FineTuneConfig) -> Result<FineTuneOutcome> {
    config.validate()?;
    if labeled.len() < 2 {
        return Err(Error::Data(format!("fine-tuning with a validation split needs at least 2 labeled samples, got {}", labeled.len())));
    }
    let labels: Vec<String> = labeled.iter().map(|(_, l)| l.clone()).collect();
    let mut split_rng = seed::derived_rng(config.seed, "finetune/split");
    let mut init_rng = seed::derived_rng(config.seed, "finetune/init");
    let mut order_rng = seed::derived_rng(config.seed, "finetune/order");
    let (train, val) = split_indices(&labels, config.val_fraction, &mut split_rng);

    let mut head = FineTuneHead::build(&labels, encoder.dim(), config.hidden, &mut init_rng)?;
    for class in &head.labels {
        if !train.iter().any(|&i| &labels[i] == class) {
            return Err(Error::EmptyClass(class.clone()));
        }
    }
    let targets: Vec<usize> = labels.iter().map(|l| head.class_index(l).expect("label in table")).collect();

    let initial: Vec<Vec<f64>> = labeled.iter().map(|(w, _)| encoder.embed(w).map(|e| e.0)).collect::<Result<_>>()?;
    head.fit_scaler(&train.iter().map(|&i| initial[i].clone()).collect::<Vec<_>>());

    let mut conv = match encoder {
        Encoder::Conv(m) if config.unfreeze_encoder => Some(m.clone()),
        Encoder::Conv(_) => None,
        Encoder::Statistical => {
            if config.unfreeze_encoder {
                info!("statistical backend has no trainable encoder; unfreeze_encoder ignored");
            }
            None
        }
    };

    let mut adam_head = Adam::new(config.beta1, config.beta2, config.adam_eps);
    let mut adam_enc = Adam::new(config.beta1, config.beta2, config.adam_eps);
    let mut stopper = EarlyStopping::new(config.patience);
    let mut best = (head.clone(), conv.clone());
    let mut train_losses = Vec::new();
    let mut val_losses = Vec::new();
    let mut order = train.clone();

    let embed_train = |conv: &Option<EncoderModel>, i: usize| -> (Vec<f64>, Option<EncoderTrace>) {
        match conv {
            Some(m) => {
                let w = m.prepare(&labeled[i].0);
                let (e, t) = m.forward(w.flat(), w.len(), None);
                (e, Some(t))
            }
            None => (initial[i].clone(), None),
        }
    };

    for epoch in 0..config.epochs {
        order.shuffle(&mut order_rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let mut g_head = head.zero_grads();
            let mut g_enc = conv.as_ref().map(|m| m.zero_grads());
            for &i in chunk {
                let (emb, etrace) = embed_train(&conv, i);
                let (logits, htrace) = head.forward(&emb);
                let (loss, gl) = cross_entropy(&logits, targets[i]);
                epoch_loss += loss;
                let g_emb = head.backward(&htrace, &gl, &mut g_head);
                if let (Some(m), Some(t), Some(g)) = (&conv, &etrace, g_enc.as_mut()) {
                    m.backward(t, &g_emb, g);
                }
            }
            let scale = 1.0 / chunk.len() as f64;
            for g in g_head.iter_mut().chain(g_enc.iter_mut().flatten()) {
                g.iter_mut().for_each(|v| *v *= scale);
            }
            adam_head.step(&mut head.params_mut(), &g_head, config.lr);
            if let (Some(m), Some(g)) = (conv.as_mut(), g_enc) {
                adam_enc.step(&mut m.params_mut(), &g, config.lr);
            }
        }
        train_losses.push(epoch_loss / train.len() as f64);

        let vloss = val
            .iter()
            .map(|&i| {
                let emb = match &conv {
                    Some(m) => m.encode(&labeled[i].0).map(|e| e.0),
                    None => Ok(initial[i].clone()),
                }?;
                Ok(cross_entropy(&head.logits(&emb), targets[i]).0)
            })
            .sum::<Result<f64>>()?
            / val.len() as f64;
        val_losses.push(vloss);
        let (improved, stop) = stopper.observe(epoch, vloss);
        if improved {
            best = (head.clone(), conv.clone());
        }
        if stop {
            debug!("early stop after epoch {}", epoch + 1);
            break;
        }
    }

    let (head, conv) = best;
    let encoder = match conv {
        Some(m) => Encoder::Conv(m),
        None => encoder.clone(),
    };
    Ok(FineTuneOutcome {
        classifier: Classifier { encoder, head },
        epochs_run: val_losses.len(),
        best_epoch: stopper.best_epoch().unwrap_or(0),
        train_losses,
        val_losses,
    })
}
