//! Command-line front end: `pretrain`, `run` and `eval`.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 data error,
//! 3 pipeline error.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand};
use log::info;

use crate::config::{help_table, Settings};
use crate::dataset::{load_csv, segment, SensorWindow};
use crate::encoder::{pretrain, BackendKind, Encoder, EncoderModel};
use crate::error::{Error, Result};
use crate::finetune::fine_tune;
use crate::harness::{emit_report, run_loso, ExperimentConfig};
use crate::metrics::{al_rate, weighted_f1};
use crate::params::ParamContainer;
use crate::session::{GroundTruth, Session, StepEvent};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_PIPELINE: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "harpipe", version, about = "Self-supervised activity recognition with density-driven active learning")]
pub struct Cli {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct CommonArgs {
    /// Configuration file with `key = value` lines.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, env = "HARPIPE_OUT", default_value = "harpipe-out", value_name = "DIR")]
    pub out: PathBuf,
    /// Root seed (config key `seed`).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Parallel folds (config key `jobs`).
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    /// Embedding backend: statistical | conv (config key `backend`).
    #[arg(long, global = true)]
    pub backend: Option<String>,
    /// Override any config key; repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Contrastive pre-training of the convolutional encoder on all configured users.
    Pretrain {
        /// Where to write the encoder (default: <out>/encoder.bin).
        #[arg(long, value_name = "PATH")]
        model: Option<PathBuf>,
    },
    /// Replay one user's stream through a session, then fine-tune on the answered queries.
    Run {
        /// Pre-trained encoder; implies the conv backend.
        #[arg(long, value_name = "PATH")]
        model: Option<PathBuf>,
        /// Single-user CSV stream (default: first user of the configured dataset).
        #[arg(long, value_name = "PATH")]
        stream: Option<PathBuf>,
        /// Accumulation threshold: a window count or a fraction of the stream (config key `session.acc_th`).
        #[arg(long = "acc-th")]
        acc_th: Option<String>,
    },
    /// Leave-one-subject-out sweep over accumulation thresholds.
    Eval {
        /// Comma-separated threshold fractions (config key `thresholds`).
        #[arg(long)]
        thresholds: Option<String>,
    },
}

pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) => EXIT_USAGE,
        Error::Io { .. } | Error::Parse { .. } | Error::Data(_) | Error::Dimension { .. } | Error::Format(_) => EXIT_DATA,
        _ => EXIT_PIPELINE,
    }
}

/// Parse `args` (program name first), run the command and return its exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cmd = Cli::command().after_long_help(help_table()).after_help(help_table());
    let cli = match cmd.try_get_matches_from(args).and_then(|m| Cli::from_arg_matches(&m)) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match execute(&cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

/// File settings, then `--set` overrides, then dedicated flags.
pub fn settings_for(cli: &Cli) -> Result<Settings> {
    let mut s = match &cli.common.config {
        Some(p) => Settings::from_file(p)?,
        None => Settings::default(),
    };
    for pair in &cli.common.set {
        s.set_pair(pair)?;
    }
    if let Some(seed) = cli.common.seed {
        s.set("seed", &seed.to_string())?;
    }
    if let Some(jobs) = cli.common.jobs {
        s.set("jobs", &jobs.to_string())?;
    }
    if let Some(b) = &cli.common.backend {
        s.set("backend", b)?;
    }
    match &cli.command {
        Command::Eval { thresholds: Some(t) } => s.set("thresholds", t)?,
        Command::Run { acc_th: Some(a), .. } => s.set("session.acc_th", a)?,
        _ => {}
    }
    Ok(s)
}

pub fn execute(cli: &Cli) -> Result<()> {
    let settings = settings_for(cli)?;
    let out = &cli.common.out;
    match &cli.command {
        Command::Pretrain { model } => {
            let path = model.clone().unwrap_or_else(|| out.join("encoder.bin"));
            cmd_pretrain(&settings, &path)
        }
        Command::Run { model, stream, .. } => cmd_run(&settings, model.as_deref(), stream.as_deref(), out),
        Command::Eval { .. } => cmd_eval(&settings, out),
    }
}

fn ensure_parent(path: &Path) -> Result<()> {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => fs::create_dir_all(p).map_err(|e| Error::io(p, e)),
        _ => Ok(()),
    }
}

fn write_file(path: &Path, body: &str) -> Result<()> {
    ensure_parent(path)?;
    fs::write(path, body).map_err(|e| Error::io(path, e))
}

pub fn cmd_pretrain(settings: &Settings, model_path: &Path) -> Result<()> {
    let started = Instant::now();
    let cfg = settings.experiment()?;
    let pcfg = settings.pretrain()?;
    let windows: Vec<SensorWindow> = cfg.load_windows()?.into_iter().flat_map(|(_, w)| w).collect();
    info!("pre-training on {} windows", windows.len());
    let outcome = pretrain(&windows, &pcfg)?;
    let container = outcome.model.to_container();
    ensure_parent(model_path)?;
    container.save(model_path)?;
    println!("windows = {}", windows.len());
    println!("epochs = {}", outcome.epoch_losses.len());
    println!("final_loss = {:.6}", outcome.epoch_losses.last().copied().unwrap_or(f64::NAN));
    println!("model = {}", model_path.display());
    println!("model_hash = {}", container.hash());
    println!("wall_time_s = {:.3}", started.elapsed().as_secs_f64());
    Ok(())
}

fn load_encoder(cfg: &ExperimentConfig, model: Option<&Path>) -> Result<Encoder> {
    match (model, cfg.backend) {
        (Some(p), _) => {
            let c = ParamContainer::load(p)?;
            Ok(Encoder::Conv(EncoderModel::from_container(&c, None)?))
        }
        (None, BackendKind::Statistical) => Ok(Encoder::Statistical),
        (None, BackendKind::Conv) => Err(Error::Config("the conv backend needs --model (produce one with `harpipe pretrain`)".into())),
    }
}

fn load_stream(cfg: &ExperimentConfig, stream: Option<&Path>) -> Result<(String, Vec<SensorWindow>)> {
    let recording = match stream {
        Some(p) => {
            let mut recs = load_csv(p, &cfg.dataset)?;
            if recs.len() != 1 {
                return Err(Error::Data(format!("{}: stream holds {} users, expected exactly one", p.display(), recs.len())));
            }
            recs.remove(0)
        }
        None => cfg.load_recordings()?.into_iter().next().ok_or_else(|| Error::Data("configured dataset has no users".into()))?,
    };
    let windows = segment(&recording, cfg.dataset.window_len, cfg.dataset.overlap);
    Ok((recording.user_id, windows))
}

/// Files written by `run`.
pub const RUN_FILES: [&str; 6] = ["trace.csv", "reduced.csv", "labeled.csv", "clusters.txt", "classifier.bin", "summary.txt"];

pub fn cmd_run(settings: &Settings, model: Option<&Path>, stream: Option<&Path>, out: &Path) -> Result<()> {
    let cfg = settings.experiment()?;
    let encoder = Arc::new(load_encoder(&cfg, model)?);
    let (user, windows) = load_stream(&cfg, stream)?;
    let acc_th = settings.acc_threshold()?.resolve(Some(windows.len()))?;
    info!("user {user}: {} windows, accumulation threshold {acc_th}", windows.len());

    let mut session = Session::new(cfg.session.clone(), encoder.clone(), acc_th)?;
    let mut oracle = GroundTruth;
    let replay: Result<()> = windows.iter().try_for_each(|w| session.process_sample(w, &mut oracle).map(|_| ()));
    write_file(&out.join("trace.csv"), &session.trace_text())?;
    replay?;
    let outcome = session.finish()?;

    // reduced coordinates: accumulation points with their DBSCAN label, then
    // every active-learning point with the cluster it was matched to
    let mut reduced = String::from("seq,phase,cluster_id,coords\n");
    let coords = |v: &[f64]| v.iter().map(|x| format!("{x:?}")).collect::<Vec<_>>().join(" ");
    for (i, (r, label)) in session.reduced_storage().iter().zip(session.accumulation_labels()).enumerate() {
        let id = label.map(|l| l.to_string()).unwrap_or_default();
        let _ = writeln!(reduced, "{},accumulating,{id},{}", i + 1, coords(r));
    }
    let mut labeled = String::from("seq,start_index,label\n");
    for rec in session.trace() {
        let cluster_id = match &rec.event {
            StepEvent::Query { cluster_id, label } => {
                let _ = writeln!(labeled, "{},{},{label}", rec.seq, windows[rec.seq - 1].start_index);
                cluster_id
            }
            StepEvent::Silent { cluster_id } => cluster_id,
            _ => continue,
        };
        let r = rec.reduced.as_deref().unwrap_or_default();
        let _ = writeln!(reduced, "{},active_learning,{cluster_id},{}", rec.seq, coords(r));
    }
    write_file(&out.join("reduced.csv"), &reduced)?;
    write_file(&out.join("labeled.csv"), &labeled)?;
    write_file(&out.join("clusters.txt"), &session.store().dump())?;

    let rate = al_rate(outcome.queries, outcome.al_samples)?;
    let mut summary = String::new();
    let _ = writeln!(summary, "session.user = {user}");
    let _ = writeln!(summary, "session.backend = {}", encoder.kind().name());
    let _ = writeln!(summary, "session.windows = {}", windows.len());
    let _ = writeln!(summary, "session.acc_th = {acc_th}");
    let _ = writeln!(summary, "session.eps = {:.6}", session.eps_used().unwrap_or(f64::NAN));
    let _ = writeln!(summary, "session.clusters = {}", session.store().len());
    let _ = writeln!(summary, "session.noise = {}", session.store().noise_count);
    let _ = writeln!(summary, "session.queries = {}", outcome.queries);
    let _ = writeln!(summary, "session.al_stream = {}", outcome.al_samples);
    let _ = writeln!(summary, "session.al_rate = {rate:.6}");

    let ft = match fine_tune(&encoder, &outcome.labeled, &cfg.finetune) {
        Ok(ft) => ft,
        Err(e) => {
            let _ = writeln!(summary, "finetune.status = failed");
            write_file(&out.join("summary.txt"), &summary)?;
            print!("{summary}");
            return Err(Error::Pipeline(format!("fine-tuning impossible: {e}")));
        }
    };
    let container = ft.classifier.to_container();
    container.save(out.join("classifier.bin"))?;
    let _ = writeln!(summary, "finetune.status = ok");
    let _ = writeln!(summary, "finetune.classes = {}", ft.classifier.labels().join(","));
    let _ = writeln!(summary, "finetune.epochs_run = {}", ft.epochs_run);
    let _ = writeln!(summary, "finetune.best_epoch = {}", ft.best_epoch);
    let _ = writeln!(summary, "finetune.classifier_hash = {}", container.hash());

    // score on windows that were never labeled, when ground truth exists
    let queried: std::collections::BTreeSet<usize> =
        session.trace().iter().filter(|r| matches!(r.event, StepEvent::Query { .. })).map(|r| r.seq).collect();
    let eval: Vec<&SensorWindow> = windows.iter().enumerate().filter(|(i, _)| !queried.contains(&(i + 1))).map(|(_, w)| w).collect();
    if !eval.is_empty() && eval.iter().all(|w| w.oracle_label.is_some()) {
        let preds = eval.iter().map(|w| ft.classifier.predict(w).map(|p| p.0)).collect::<Result<Vec<_>>>()?;
        let truths: Vec<String> = eval.iter().map(|w| w.oracle_label.clone().unwrap_or_default()).collect();
        let _ = writeln!(summary, "eval.windows = {}", eval.len());
        let _ = writeln!(summary, "eval.f1 = {:.6}", weighted_f1(&preds, &truths)?);
    }
    write_file(&out.join("summary.txt"), &summary)?;
    print!("{summary}");
    Ok(())
}

pub fn cmd_eval(settings: &Settings, out: &Path) -> Result<()> {
    let cfg = settings.experiment()?;
    let report = run_loso(&cfg)?;
    let files = emit_report(&report, out)?;
    println!("backend = {}", report.meta.backend);
    println!("folds = {}", report.folds.len());
    for m in &report.means {
        println!("mean.f1[{}] = {:.6}  mean.al_rate[{}] = {:.6}  mean.clusters[{}] = {:.2}", m.threshold, m.f1, m.threshold, m.al_rate, m.threshold, m.clusters);
    }
    println!("report = {} ({} files)", out.display(), files.len());
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(args: &[&str]) -> Cli {
        Cli::try_parse_from(args).unwrap()
    }

    #[test]
    fn flags_override_file_and_set() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = dir.path().join("c.cfg");
        fs::write(&cfg, "seed = 1\nthresholds = 0.5\n").unwrap();
        let c = cfg.to_str().unwrap();
        let cli = parse(&["harpipe", "--config", c, "--set", "seed=2", "eval", "--seed", "3", "--thresholds", "0.6,0.7"]);
        let s = settings_for(&cli).unwrap();
        assert_eq!(s.get("seed"), "3");
        assert_eq!(s.get("thresholds"), "0.6,0.7");
    }

    #[test]
    fn usage_errors_exit_one() {
        assert_eq!(main_with_args(["harpipe", "frobnicate"]), EXIT_USAGE);
        assert_eq!(main_with_args(["harpipe", "eval", "--set", "nope=1"]), EXIT_USAGE);
        assert_eq!(main_with_args(["harpipe", "--help"]), EXIT_OK);
    }

    #[test]
    fn exit_code_classes() {
        assert_eq!(exit_code(&Error::Config("x".into())), EXIT_USAGE);
        assert_eq!(exit_code(&Error::Data("x".into())), EXIT_DATA);
        assert_eq!(exit_code(&Error::AllNoise { points: 3 }), EXIT_PIPELINE);
        assert_eq!(exit_code(&Error::AccumulationIncomplete { seen: 1, threshold: 2 }), EXIT_PIPELINE);
    }
}
