//! Per-user client loop: accumulate, reduce and cluster once, then decide
//! per incoming window whether to ask the user for a label.

use std::fmt;
use std::sync::Arc;

use log::debug;

use crate::clusterstore::{dbscan, knn_eps, ClusterStore, DbscanParams};
use crate::dataset::SensorWindow;
use crate::encoder::{Embedding, Encoder};
use crate::error::{Error, Result};
use crate::reduction::{ReducedEmbedding, ReducerModel};

/// Accumulation threshold: an absolute window count, or a fraction of a
/// stream whose length is known in advance (replay mode).
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AccThreshold {
    Count(usize),
    Fraction(f64),
}

impl AccThreshold {
    /// `"300"` is a count, `"0.75"` a fraction.
    pub fn parse(s: &str) -> Result<Self> {
        let s = s.trim();
        if let Ok(n) = s.parse::<usize>() {
            return Ok(AccThreshold::Count(n));
        }
        match s.parse::<f64>() {
            Ok(f) if f > 0.0 && f < 1.0 => Ok(AccThreshold::Fraction(f)),
            _ => Err(Error::Config(format!("accumulation threshold '{s}' is neither a count nor a fraction in (0,1)"))),
        }
    }

    pub fn resolve(&self, stream_len: Option<usize>) -> Result<usize> {
        match *self {
            AccThreshold::Count(n) => Ok(n),
            AccThreshold::Fraction(f) => {
                let len = stream_len.ok_or_else(|| Error::Config("fractional threshold needs a known stream length".into()))?;
                Ok(fraction_of(f, len))
            }
        }
    }
}

impl fmt::Display for AccThreshold {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AccThreshold::Count(n) => write!(f, "{n}"),
            AccThreshold::Fraction(x) => write!(f, "{x}"),
        }
    }
}

/// Rounded share of `len` windows.
pub fn fraction_of(fraction: f64, len: usize) -> usize {
    (fraction * len as f64).round() as usize
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum EpsSetting {
    /// Median distance to the k-th nearest neighbour in the accumulated set.
    Auto { k: usize, quantile: f64 },
    Fixed(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SessionConfig {
    pub acc_th: AccThreshold,
    pub out_dim: usize,
    pub eps: EpsSetting,
    pub min_pts: usize,
}

impl Default for SessionConfig {
    fn default() -> Self {
        Self { acc_th: AccThreshold::Fraction(0.75), out_dim: 2, eps: EpsSetting::Auto { k: 9, quantile: 0.5 }, min_pts: 10 }
    }
}

impl SessionConfig {
    pub fn validate_threshold(&self, acc_th: usize) -> Result<()> {
        let min = ReducerModel::min_samples(self.out_dim);
        if acc_th < min.max(1) {
            return Err(Error::Config(format!("accumulation threshold {acc_th} below the reducer minimum of {min} samples")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Accumulating,
    ActiveLearning,
    Finished,
}

impl Phase {
    pub fn name(&self) -> &'static str {
        match self {
            Phase::Accumulating => "accumulating",
            Phase::ActiveLearning => "active_learning",
            Phase::Finished => "finished",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum StepEvent {
    Accumulated,
    ClustersBuilt(usize),
    Query { cluster_id: usize, label: String },
    Silent { cluster_id: usize },
}

/// One processed window, as written to the event trace.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceRecord {
    pub seq: usize,
    pub phase: Phase,
    pub event: StepEvent,
    /// Reduced embedding for windows processed after clustering.
    pub reduced: Option<Vec<f64>>,
}

impl TraceRecord {
    pub const HEADER: &'static str = "seq,phase,event,cluster_id,queried,label";

    /// `seq,phase,event,cluster_id,queried,label`. For `clusters_built` the
    /// cluster_id column holds the number of clusters.
    pub fn line(&self) -> String {
        let (event, cluster, queried, label) = match &self.event {
            StepEvent::Accumulated => ("accumulated", String::new(), 0, ""),
            StepEvent::ClustersBuilt(n) => ("clusters_built", n.to_string(), 0, ""),
            StepEvent::Query { cluster_id, label } => ("query", cluster_id.to_string(), 1, label.as_str()),
            StepEvent::Silent { cluster_id } => ("silent", cluster_id.to_string(), 0, ""),
        };
        format!("{},{},{},{},{},{}", self.seq, self.phase.name(), event, cluster, queried, label)
    }
}

/// Source of labels for queried windows.
pub trait Oracle {
    fn label(&mut self, window: &SensorWindow) -> Result<String>;
}

/// Answers with the window's ground-truth label (simulation).
#[derive(Debug, Default, Clone, Copy)]
pub struct GroundTruth;

impl Oracle for GroundTruth {
    fn label(&mut self, window: &SensorWindow) -> Result<String> {
        window
            .oracle_label
            .clone()
            .ok_or_else(|| Error::Data(format!("query for unlabeled window at sample {} of {}", window.start_index, window.user_id)))
    }
}

#[derive(Debug, Clone)]
pub struct SessionOutcome {
    pub labeled: Vec<(SensorWindow, String)>,
    pub queries: usize,
    pub al_samples: usize,
}

#[derive(Debug, Clone)]
pub struct Session {
    config: SessionConfig,
    encoder: Arc<Encoder>,
    acc_th: usize,
    phase: Phase,
    samples_seen: usize,
    storage: Vec<Embedding>,
    reducer: Option<ReducerModel>,
    reduced_storage: Vec<ReducedEmbedding>,
    accumulation_labels: Vec<Option<usize>>,
    store: ClusterStore,
    eps_used: Option<f64>,
    labeled: Vec<(SensorWindow, String)>,
    queries: usize,
    al_samples: usize,
    trace: Vec<TraceRecord>,
}

impl Session {
    pub fn new(config: SessionConfig, encoder: Arc<Encoder>, acc_th: usize) -> Result<Self> {
        config.validate_threshold(acc_th)?;
        if config.min_pts < 1 {
            return Err(Error::Config("min_pts must be >= 1".into()));
        }
        Ok(Self {
            config,
            encoder,
            acc_th,
            phase: Phase::Accumulating,
            samples_seen: 0,
            storage: Vec::new(),
            reducer: None,
            reduced_storage: Vec::new(),
            accumulation_labels: Vec::new(),
            store: ClusterStore::default(),
            eps_used: None,
            labeled: Vec::new(),
            queries: 0,
            al_samples: 0,
            trace: Vec::new(),
        })
    }

    pub fn phase(&self) -> Phase {
        self.phase
    }

    pub fn samples_seen(&self) -> usize {
        self.samples_seen
    }

    pub fn acc_th(&self) -> usize {
        self.acc_th
    }

    pub fn store(&self) -> &ClusterStore {
        &self.store
    }

    pub fn reducer(&self) -> Option<&ReducerModel> {
        self.reducer.as_ref()
    }

    pub fn reduced_storage(&self) -> &[ReducedEmbedding] {
        &self.reduced_storage
    }

    /// DBSCAN label of each accumulated window (`None` = noise).
    pub fn accumulation_labels(&self) -> &[Option<usize>] {
        &self.accumulation_labels
    }

    pub fn eps_used(&self) -> Option<f64> {
        self.eps_used
    }

    pub fn labeled_samples(&self) -> &[(SensorWindow, String)] {
        &self.labeled
    }

    pub fn queries(&self) -> usize {
        self.queries
    }

    pub fn al_samples(&self) -> usize {
        self.al_samples
    }

    pub fn trace(&self) -> &[TraceRecord] {
        &self.trace
    }

    pub fn trace_text(&self) -> String {
        let mut s = String::from(TraceRecord::HEADER);
        s.push('\n');
        for r in &self.trace {
            s.push_str(&r.line());
            s.push('\n');
        }
        s
    }

    pub fn process_sample(&mut self, window: &SensorWindow, oracle: &mut dyn Oracle) -> Result<StepEvent> {
        match self.phase {
            Phase::Finished => return Err(Error::State("session already finished".into())),
            Phase::Accumulating if self.samples_seen >= self.acc_th => {
                return Err(Error::State("clustering failed at the accumulation threshold; session cannot continue".into()))
            }
            _ => {}
        }
        let emb = self.encoder.embed(window)?;
        let phase = self.phase;

        if self.samples_seen < self.acc_th {
            self.samples_seen += 1;
            self.storage.push(emb);
            let event = if self.samples_seen == self.acc_th {
                let n = self.build_clusters()?;
                self.phase = Phase::ActiveLearning;
                StepEvent::ClustersBuilt(n)
            } else {
                StepEvent::Accumulated
            };
            self.trace.push(TraceRecord { seq: self.samples_seen, phase, event: event.clone(), reduced: None });
            return Ok(event);
        }

        let reducer = self.reducer.as_ref().expect("reducer fitted at threshold");
        let reduced = reducer.transform(&emb)?;
        let cluster_id = self.store.nearest_cluster(&reduced)?;
        let event = if self.store.active_learning_needed(cluster_id, &reduced)? {
            let label = oracle.label(window)?;
            self.labeled.push((window.clone(), label.clone()));
            self.queries += 1;
            StepEvent::Query { cluster_id, label }
        } else {
            StepEvent::Silent { cluster_id }
        };
        self.store.insert(cluster_id, reduced.0.clone())?;
        self.samples_seen += 1;
        self.al_samples += 1;
        self.trace.push(TraceRecord { seq: self.samples_seen, phase, event: event.clone(), reduced: Some(reduced.0) });
        Ok(event)
    }

    fn build_clusters(&mut self) -> Result<usize> {
        let reducer = ReducerModel::fit(&self.storage, self.config.out_dim)?;
        self.reduced_storage = self.storage.iter().map(|e| reducer.transform(e)).collect::<Result<_>>()?;
        let eps = match self.config.eps {
            EpsSetting::Auto { k, quantile } => knn_eps(&self.reduced_storage, k, quantile)?,
            EpsSetting::Fixed(e) => e,
        };
        let labels = dbscan(&self.reduced_storage, DbscanParams { eps, min_pts: self.config.min_pts })?;
        let store = ClusterStore::build(&self.reduced_storage, &labels)?;
        debug!("clustered {} windows: {} clusters, {} noise, eps {eps:.4}", labels.len(), store.len(), store.noise_count);
        self.eps_used = Some(eps);
        self.accumulation_labels = labels;
        self.reducer = Some(reducer);
        if store.is_empty() {
            return Err(Error::AllNoise { points: self.storage.len() });
        }
        self.store = store;
        Ok(self.store.len())
    }

    /// End the active-learning phase and hand over the labeled samples.
    pub fn finish(&mut self) -> Result<SessionOutcome> {
        match self.phase {
            Phase::Accumulating => Err(Error::AccumulationIncomplete { seen: self.samples_seen, threshold: self.acc_th }),
            Phase::Finished => Err(Error::State("session already finished".into())),
            Phase::ActiveLearning => {
                self.phase = Phase::Finished;
                Ok(SessionOutcome { labeled: self.labeled.clone(), queries: self.queries, al_samples: self.al_samples })
            }
        }
    }
}

/// Standalone density test, see [`ClusterStore::active_learning_needed`].
pub fn active_learning_needed(store: &ClusterStore, cluster_id: usize, point: &[f64]) -> Result<bool> {
    store.active_learning_needed(cluster_id, point)
}
