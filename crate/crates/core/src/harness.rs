//! Leave-one-subject-out replay.
//!
//! For every held-out user: pre-train an encoder on the remaining users
//! (convolutional backend only), then for every accumulation threshold split
//! the user's window stream chronologically, replay it through a [`Session`]
//! whose queries are answered with ground truth, fine-tune on the answered
//! windows and score the classifier on every window that was not labeled.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use log::{info, warn};
use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::dataset::{load_csv, segment, synth_generate, DatasetSpec, Recording, SensorWindow, SynthSpec};
use crate::encoder::{pretrain, BackendKind, Encoder, PretrainConfig};
use crate::error::{Error, Result};
use crate::finetune::{fine_tune, FineTuneConfig};
use crate::metrics::{al_rate, per_class_f1, weighted_f1};
use crate::reduction::ReducerModel;
use crate::seed;
use crate::session::{fraction_of, GroundTruth, Session, SessionConfig, StepEvent, TraceRecord};

#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    Synth(SynthSpec),
    Csv(Vec<PathBuf>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub source: DataSource,
    pub dataset: DatasetSpec,
    pub session: SessionConfig,
    pub backend: BackendKind,
    pub pretrain: PretrainConfig,
    pub finetune: FineTuneConfig,
    /// Accumulation thresholds as fractions of each test user's stream.
    pub thresholds: Vec<f64>,
    pub seed: u64,
    pub jobs: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            source: DataSource::Synth(SynthSpec::default()),
            dataset: DatasetSpec::default(),
            session: SessionConfig::default(),
            backend: BackendKind::Statistical,
            pretrain: PretrainConfig::default(),
            finetune: FineTuneConfig::default(),
            thresholds: vec![0.5, 0.75, 0.9, 0.95],
            seed: 42,
            jobs: 1,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.dataset.validate()?;
        if let Some(t) = self.thresholds.iter().find(|t| !(**t > 0.0 && **t < 1.0)) {
            return Err(Error::Config(format!("threshold {t} outside (0, 1)")));
        }
        self.finetune.validate()?;
        if self.backend == BackendKind::Conv {
            self.pretrain.validate()?;
        }
        Ok(())
    }

    /// Recordings from the configured source, one per (pseudo-)user.
    pub fn load_recordings(&self) -> Result<Vec<Recording>> {
        match &self.source {
            DataSource::Synth(spec) => {
                let spec = SynthSpec { window_len: self.dataset.window_len, overlap: self.dataset.overlap, ..spec.clone() };
                synth_generate(&spec)
            }
            DataSource::Csv(paths) => {
                let mut all: Vec<Recording> = Vec::new();
                for p in paths {
                    for r in load_csv(p, &self.dataset)? {
                        if all.iter().any(|a| a.user_id == r.user_id) {
                            return Err(Error::Data(format!("user {} appears in more than one file", r.user_id)));
                        }
                        all.push(r);
                    }
                }
                all.sort_by(|a, b| a.user_id.cmp(&b.user_id));
                Ok(all)
            }
        }
    }

    /// Windows per user, ordered by user id.
    pub fn load_windows(&self) -> Result<Vec<(String, Vec<SensorWindow>)>> {
        Ok(self
            .load_recordings()?
            .iter()
            .map(|r| (r.user_id.clone(), segment(r, self.dataset.window_len, self.dataset.overlap)))
            .collect())
    }

    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(format!("{self:?}").as_bytes()))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum FoldStatus {
    Ok,
    /// Not run; excluded from averages.
    Skipped(String),
    /// Ran but could not produce a classifier; scored as F1 0.
    Failed(String),
}

impl FoldStatus {
    pub fn name(&self) -> &'static str {
        match self {
            FoldStatus::Ok => "ok",
            FoldStatus::Skipped(_) => "skipped",
            FoldStatus::Failed(_) => "failed",
        }
    }

    pub fn note(&self) -> &str {
        match self {
            FoldStatus::Ok => "",
            FoldStatus::Skipped(n) | FoldStatus::Failed(n) => n,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FoldResult {
    pub user: String,
    pub threshold: f64,
    pub status: FoldStatus,
    pub windows: usize,
    pub acc_th: usize,
    pub cluster_count: usize,
    pub noise_count: usize,
    pub queries: usize,
    pub al_stream_len: usize,
    pub al_rate: f64,
    pub weighted_f1: f64,
    pub per_class_f1: BTreeMap<String, f64>,
    /// Stream positions (1-based) of the windows the classifier was scored on.
    pub eval_seqs: Vec<usize>,
    pub trace: Vec<TraceRecord>,
    pub runtime_ms: u128,
}

impl FoldResult {
    fn empty(user: &str, threshold: f64, windows: usize, acc_th: usize, status: FoldStatus) -> Self {
        Self {
            user: user.to_string(),
            threshold,
            status,
            windows,
            acc_th,
            cluster_count: 0,
            noise_count: 0,
            queries: 0,
            al_stream_len: 0,
            al_rate: 0.0,
            weighted_f1: 0.0,
            per_class_f1: BTreeMap::new(),
            eval_seqs: Vec::new(),
            trace: Vec::new(),
            runtime_ms: 0,
        }
    }

    pub fn counted(&self) -> bool {
        !matches!(self.status, FoldStatus::Skipped(_))
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
}

#[derive(Debug, Clone, PartialEq)]
pub struct ThresholdMean {
    pub threshold: f64,
    pub folds: usize,
    pub f1: f64,
    pub al_rate: f64,
    pub clusters: f64,
    pub queries: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportMeta {
    pub backend: String,
    pub root_seed: u64,
    pub config_hash: String,
    pub users: Vec<String>,
    pub thresholds: Vec<f64>,
    /// Seconds since the Unix epoch when the run finished.
    pub generated_at: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub folds: Vec<FoldResult>,
    pub means: Vec<ThresholdMean>,
    pub meta: ReportMeta,
}

impl Report {
    pub fn mean_for(&self, threshold: f64) -> Option<&ThresholdMean> {
        self.means.iter().find(|m| m.threshold == threshold)
    }
}

/// Arithmetic means per threshold over folds that were not skipped.
pub fn threshold_means(folds: &[FoldResult], thresholds: &[f64]) -> Vec<ThresholdMean> {
    thresholds
        .iter()
        .map(|&t| {
            let fs: Vec<&FoldResult> = folds.iter().filter(|f| f.threshold == t && f.counted()).collect();
            let n = fs.len();
            let mean = |g: &dyn Fn(&FoldResult) -> f64| if n == 0 { 0.0 } else { fs.iter().map(|f| g(f)).sum::<f64>() / n as f64 };
            ThresholdMean {
                threshold: t,
                folds: n,
                f1: mean(&|f| f.weighted_f1),
                al_rate: mean(&|f| f.al_rate),
                clusters: mean(&|f| f.cluster_count as f64),
                queries: mean(&|f| f.queries as f64),
            }
        })
        .collect()
}

/// Full leave-one-subject-out sweep.
pub fn run_loso(config: &ExperimentConfig) -> Result<Report> {
    config.validate()?;
    let users = config.load_windows()?;
    if users.len() < 2 {
        return Err(Error::Data(format!("leave-one-subject-out needs at least 2 users, found {}", users.len())));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.jobs.max(1))
        .build()
        .map_err(|e| Error::Pipeline(format!("thread pool: {e}")))?;

    let per_user: Vec<Result<Vec<FoldResult>>> = pool.install(|| {
        (0..users.len())
            .into_par_iter()
            .map(|held_out| run_user_folds(config, &users, held_out))
            .collect()
    });
    let mut folds = Vec::new();
    for r in per_user {
        folds.extend(r?);
    }
    let means = threshold_means(&folds, &config.thresholds);
    let generated_at = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
    Ok(Report {
        folds,
        means,
        meta: ReportMeta {
            backend: config.backend.name().to_string(),
            root_seed: config.seed,
            config_hash: config.hash(),
            users: users.iter().map(|u| u.0.clone()).collect(),
            thresholds: config.thresholds.clone(),
            generated_at,
        },
    })
}

fn run_user_folds(config: &ExperimentConfig, users: &[(String, Vec<SensorWindow>)], held_out: usize) -> Result<Vec<FoldResult>> {
    let (user, test) = &users[held_out];
    let encoder = match config.backend {
        BackendKind::Statistical => Encoder::Statistical,
        BackendKind::Conv => {
            let train: Vec<SensorWindow> = users
                .iter()
                .enumerate()
                .filter(|&(i, _)| i != held_out)
                .flat_map(|(_, (_, w))| w.iter().cloned())
                .collect();
            let cfg = PretrainConfig { seed: seed::derive(config.seed, &format!("pretrain/{user}")), ..config.pretrain.clone() };
            let out = pretrain(&train, &cfg)?;
            info!("fold {user}: pre-trained on {} windows, final loss {:.4}", train.len(), out.epoch_losses.last().copied().unwrap_or(f64::NAN));
            Encoder::Conv(out.model)
        }
    };
    let encoder = Arc::new(encoder);
    config
        .thresholds
        .iter()
        .map(|&t| {
            let fseed = seed::derive(config.seed, &format!("finetune/{user}/{t}"));
            run_fold(user, test, t, encoder.clone(), &config.session, &config.finetune, fseed)
        })
        .collect()
}

/// One held-out user at one threshold.
pub fn run_fold(
    user: &str,
    windows: &[SensorWindow],
    threshold: f64,
    encoder: Arc<Encoder>,
    session_cfg: &SessionConfig,
    finetune_cfg: &FineTuneConfig,
    finetune_seed: u64,
) -> Result<FoldResult> {
    let started = Instant::now();
    let n = windows.len();
    let acc_th = fraction_of(threshold, n);
    let min = ReducerModel::min_samples(session_cfg.out_dim).max(session_cfg.min_pts).max(2);
    if acc_th < min || acc_th >= n {
        let note = format!("{n} windows cannot be split at threshold {threshold} (accumulation {acc_th}, needs >= {min} and < {n})");
        warn!("fold {user}: {note}");
        return Ok(FoldResult::empty(user, threshold, n, acc_th, FoldStatus::Skipped(note)));
    }

    let mut session = Session::new(session_cfg.clone(), encoder.clone(), acc_th)?;
    let mut oracle = GroundTruth;
    for w in windows {
        match session.process_sample(w, &mut oracle) {
            Ok(_) => {}
            Err(e @ Error::AllNoise { .. }) => {
                let mut r = FoldResult::empty(user, threshold, n, acc_th, FoldStatus::Failed(e.to_string()));
                r.noise_count = acc_th;
                r.trace = session.trace().to_vec();
                r.runtime_ms = started.elapsed().as_millis();
                return Ok(r);
            }
            Err(e) => return Err(e),
        }
    }
    let cluster_count = session.store().len();
    let noise_count = session.store().noise_count;
    let outcome = session.finish()?;
    let rate = al_rate(outcome.queries, outcome.al_samples)?;

    let queried: BTreeSet<usize> =
        session.trace().iter().filter(|r| matches!(r.event, StepEvent::Query { .. })).map(|r| r.seq).collect();
    let eval_seqs: Vec<usize> = (1..=n).filter(|s| !queried.contains(s)).collect();

    let mut result = FoldResult {
        user: user.to_string(),
        threshold,
        status: FoldStatus::Ok,
        windows: n,
        acc_th,
        cluster_count,
        noise_count,
        queries: outcome.queries,
        al_stream_len: outcome.al_samples,
        al_rate: rate,
        weighted_f1: 0.0,
        per_class_f1: BTreeMap::new(),
        eval_seqs,
        trace: session.trace().to_vec(),
        runtime_ms: 0,
    };

    let cfg = FineTuneConfig { seed: finetune_seed, ..finetune_cfg.clone() };
    match fine_tune(&encoder, &outcome.labeled, &cfg) {
        Ok(ft) => {
            let mut preds = Vec::with_capacity(result.eval_seqs.len());
            let mut truths = Vec::with_capacity(result.eval_seqs.len());
            for &s in &result.eval_seqs {
                let w = &windows[s - 1];
                let truth = w
                    .oracle_label
                    .clone()
                    .ok_or_else(|| Error::Data(format!("window {s} of user {user} has no ground-truth label")))?;
                preds.push(ft.classifier.predict(w)?.0);
                truths.push(truth);
            }
            result.weighted_f1 = weighted_f1(&preds, &truths)?;
            result.per_class_f1 = per_class_f1(&preds, &truths)?.into_iter().map(|(k, v)| (k, v.0)).collect();
        }
        Err(e @ (Error::Data(_) | Error::EmptyClass(_))) => {
            warn!("fold {user} @ {threshold}: fine-tuning impossible: {e}");
            result.status = FoldStatus::Failed(format!("fine-tuning impossible: {e}"));
        }
        Err(e) => return Err(e),
    }
    result.runtime_ms = started.elapsed().as_millis();
    Ok(result)
}

fn fmt_f(v: f64) -> String {
    format!("{v:.6}")
}

/// Structured `key = value` summary.
pub fn render_summary(report: &Report) -> String {
    let m = &report.meta;
    let mut s = String::new();
    let _ = writeln!(s, "# leave-one-subject-out evaluation report");
    let _ = writeln!(s, "meta.format = 1");
    let _ = writeln!(s, "meta.backend = {}", m.backend);
    let _ = writeln!(s, "meta.root_seed = {}", m.root_seed);
    let _ = writeln!(s, "meta.config_hash = {}", m.config_hash);
    let _ = writeln!(s, "meta.users = {}", m.users.join(","));
    let _ = writeln!(s, "meta.thresholds = {}", m.thresholds.iter().map(|t| t.to_string()).collect::<Vec<_>>().join(","));
    let _ = writeln!(s, "meta.generated_at = {}", m.generated_at);
    for f in &report.folds {
        let _ = writeln!(s, "\n[fold]");
        let _ = writeln!(s, "fold.user = {}", f.user);
        let _ = writeln!(s, "fold.threshold = {}", f.threshold);
        let _ = writeln!(s, "fold.status = {}", f.status.name());
        if !f.status.note().is_empty() {
            let _ = writeln!(s, "fold.note = {}", f.status.note());
        }
        let _ = writeln!(s, "fold.windows = {}", f.windows);
        let _ = writeln!(s, "fold.acc_th = {}", f.acc_th);
        let _ = writeln!(s, "fold.clusters = {}", f.cluster_count);
        let _ = writeln!(s, "fold.noise = {}", f.noise_count);
        let _ = writeln!(s, "fold.queries = {}", f.queries);
        let _ = writeln!(s, "fold.al_stream = {}", f.al_stream_len);
        let _ = writeln!(s, "fold.al_rate = {}", fmt_f(f.al_rate));
        let _ = writeln!(s, "fold.f1 = {}", fmt_f(f.weighted_f1));
        let classes: Vec<String> = f.per_class_f1.iter().map(|(k, v)| format!("{k}:{}", fmt_f(*v))).collect();
        let _ = writeln!(s, "fold.class_f1 = {}", classes.join(";"));
    }
    for mean in &report.means {
        let _ = writeln!(s, "\n[mean]");
        let _ = writeln!(s, "mean.threshold = {}", mean.threshold);
        let _ = writeln!(s, "mean.folds = {}", mean.folds);
        let _ = writeln!(s, "mean.f1 = {}", fmt_f(mean.f1));
        let _ = writeln!(s, "mean.al_rate = {}", fmt_f(mean.al_rate));
        let _ = writeln!(s, "mean.clusters = {}", fmt_f(mean.clusters));
        let _ = writeln!(s, "mean.queries = {}", fmt_f(mean.queries));
    }
    s
}

pub fn render_fold_table(report: &Report) -> String {
    let mut s = String::from("user,threshold,status,windows,acc_th,clusters,noise,queries,al_stream,al_rate,f1,eval_size\n");
    for f in &report.folds {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            f.user,
            f.threshold,
            f.status.name(),
            f.windows,
            f.acc_th,
            f.cluster_count,
            f.noise_count,
            f.queries,
            f.al_stream_len,
            fmt_f(f.al_rate),
            fmt_f(f.weighted_f1),
            f.eval_seqs.len()
        );
    }
    s
}

/// Minimal SVG line plot: axes, a polyline and one `<circle>` per point.
pub fn render_plot(title: &str, y_label: &str, points: &[(f64, f64)]) -> String {
    let (w, h, pad) = (480.0, 320.0, 50.0);
    let xmin = points.iter().map(|p| p.0).fold(f64::INFINITY, f64::min);
    let xmax = points.iter().map(|p| p.0).fold(f64::NEG_INFINITY, f64::max);
    let ymax = points.iter().map(|p| p.1).fold(0.0, f64::max);
    let ymin = points.iter().map(|p| p.1).fold(0.0, f64::min);
    let xr = if xmax > xmin { xmax - xmin } else { 1.0 };
    let yr = if ymax > ymin { ymax - ymin } else { 1.0 };
    let px = |x: f64| pad + (x - xmin) / xr * (w - 2.0 * pad);
    let py = |y: f64| h - pad - (y - ymin) / yr * (h - 2.0 * pad);
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#);
    let _ = writeln!(s, r#"<title>{title}</title>"#);
    let _ = writeln!(s, r#"<text x="{}" y="20" text-anchor="middle" font-size="14">{title}</text>"#, w / 2.0);
    let _ = writeln!(s, r#"<line x1="{pad}" y1="{}" x2="{}" y2="{}" stroke="black"/>"#, h - pad, w - pad, h - pad);
    let _ = writeln!(s, r#"<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{}" stroke="black"/>"#, h - pad);
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle" font-size="12">accumulation threshold</text>"#, w / 2.0, h - 10.0);
    let _ = writeln!(s, r#"<text x="15" y="{}" font-size="12" transform="rotate(-90 15 {})" text-anchor="middle">{y_label}</text>"#, h / 2.0, h / 2.0);
    let poly: Vec<String> = points.iter().map(|&(x, y)| format!("{:.2},{:.2}", px(x), py(y))).collect();
    let _ = writeln!(s, r#"<polyline fill="none" stroke="steelblue" stroke-width="2" points="{}"/>"#, poly.join(" "));
    for &(x, y) in points {
        let _ = writeln!(s, r#"<circle cx="{:.2}" cy="{:.2}" r="4" fill="steelblue"><title>{x}: {y:.4}</title></circle>"#, px(x), py(y));
        let _ = writeln!(s, r#"<text x="{:.2}" y="{}" text-anchor="middle" font-size="10">{x}</text>"#, px(x), h - pad + 14.0);
    }
    let _ = writeln!(s, r#"<text x="{}" y="{:.2}" text-anchor="end" font-size="10">{ymax:.3}</text>"#, pad - 4.0, py(ymax));
    let _ = writeln!(s, r#"<text x="{}" y="{:.2}" text-anchor="end" font-size="10">{ymin:.3}</text>"#, pad - 4.0, py(ymin));
    s.push_str("</svg>\n");
    s
}

pub const PLOT_FILES: [&str; 3] = ["f1_vs_threshold.svg", "clusters_vs_threshold.svg", "al_rate_vs_threshold.svg"];

/// Relative path of a fold's event trace inside the report directory.
pub fn trace_file_name(user: &str, threshold: f64) -> String {
    let safe: String = user.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' }).collect();
    format!("traces/{safe}_{threshold}.csv")
}

/// Write `summary.txt`, and when the sweep is nonempty `folds.csv`,
/// `timing.csv`, one event trace per fold and the three threshold plots.
/// Returns the written paths.
pub fn emit_report(report: &Report, out_dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let dir = out_dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut written = Vec::new();
    let mut write = |name: &str, body: String| -> Result<()> {
        let p = dir.join(name);
        if let Some(parent) = p.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        fs::write(&p, body).map_err(|e| Error::io(&p, e))?;
        written.push(p);
        Ok(())
    };
    write("summary.txt", render_summary(report))?;
    if report.means.is_empty() {
        return Ok(written);
    }
    write("folds.csv", render_fold_table(report))?;
    let mut timing = String::from("user,threshold,runtime_ms\n");
    for f in &report.folds {
        let _ = writeln!(timing, "{},{},{}", f.user, f.threshold, f.runtime_ms);
    }
    write("timing.csv", timing)?;
    for f in report.folds.iter().filter(|f| !f.trace.is_empty()) {
        write(&trace_file_name(&f.user, f.threshold), f.trace_text())?;
    }
    let series = |g: &dyn Fn(&ThresholdMean) -> f64| report.means.iter().map(|m| (m.threshold, g(m))).collect::<Vec<_>>();
    write(PLOT_FILES[0], render_plot("Weighted F1 vs accumulation threshold", "weighted F1", &series(&|m| m.f1)))?;
    write(PLOT_FILES[1], render_plot("Clusters vs accumulation threshold", "clusters", &series(&|m| m.clusters)))?;
    write(PLOT_FILES[2], render_plot("Active learning rate vs accumulation threshold", "active learning rate", &series(&|m| m.al_rate)))?;
    Ok(written)
}
