//! `key = value` experiment configuration.
//!
//! A config file holds one `key = value` pair per line; blank lines and
//! lines starting with `#` are ignored. Every key has a default listed in
//! [`KEYS`], unknown keys are rejected, and command-line overrides are
//! applied on top of the file in order.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::dataset::{ActivityPattern, DatasetSpec, SynthSpec};
use crate::encoder::{BackendKind, ConvArch, PretrainConfig};
use crate::error::{Error, Result};
use crate::finetune::FineTuneConfig;
use crate::harness::{DataSource, ExperimentConfig};
use crate::seed;
use crate::session::{AccThreshold, EpsSetting, SessionConfig};

pub struct KeySpec {
    pub key: &'static str,
    pub default: &'static str,
    pub help: &'static str,
}

const fn k(key: &'static str, default: &'static str, help: &'static str) -> KeySpec {
    KeySpec { key, default, help }
}

/// Every accepted key with its default value.
pub const KEYS: &[KeySpec] = &[
    k("seed", "42", "root seed; every component seed is derived from it by name"),
    k("jobs", "1", "folds evaluated in parallel"),
    k("backend", "statistical", "embedding backend: statistical | conv"),
    k("thresholds", "0.5,0.75,0.9,0.95", "accumulation thresholds swept by eval, fractions of each test stream"),
    k("data.csv", "", "comma-separated CSV recordings (user,timestamp,x,y,z[,label]); empty = synthetic data"),
    k("data.window_len", "100", "samples per window"),
    k("data.overlap", "0.5", "fractional overlap of consecutive windows, in [0, 1)"),
    k("data.label_merge", "", "label merges as from=to pairs separated by ';'"),
    k("data.user_groups", "", "pseudo-user grouping as user=group pairs separated by ';'"),
    k("synth.users", "3", "synthetic users"),
    k("synth.activities", "default", "'default', 'two_band', or name:freq:ax/ay/az:ox/oy/oz patterns separated by ';'"),
    k("synth.windows_per_activity", "100", "windows generated per activity and user"),
    k("synth.noise_std", "0.3", "additive Gaussian noise (m/s^2)"),
    k("synth.sample_rate_hz", "50", "synthetic sampling rate"),
    k("synth.bouts", "4", "rounds of bouts; each round holds one contiguous bout per activity"),
    k("synth.sway_std", "0.6", "slow posture/orientation drift per axis (m/s^2)"),
    k("synth.sway_tau", "2", "drift correlation time (s)"),
    k("synth.seed", "derived", "synthetic data seed; 'derived' = derived from seed"),
    k("session.acc_th", "0.75", "accumulation threshold for run: a count, or a fraction of the stream when < 1"),
    k("session.out_dim", "2", "reduced embedding dimension"),
    k("session.eps", "auto", "DBSCAN radius: 'auto' (quantile of k-NN distances) or a number"),
    k("session.eps_k", "9", "neighbour rank used by the automatic radius"),
    k("session.eps_quantile", "0.5", "quantile of the k-NN distances used by the automatic radius"),
    k("session.min_pts", "10", "DBSCAN minimum neighbourhood size, point itself included"),
    k("pretrain.epochs", "10", "contrastive pre-training epochs"),
    k("pretrain.batch_size", "64", "contrastive batch size"),
    k("pretrain.lr", "0.05", "SGD base learning rate (cosine decayed)"),
    k("pretrain.momentum", "0.9", "SGD momentum"),
    k("pretrain.temperature", "0.1", "NT-Xent temperature"),
    k("pretrain.dropout", "0.1", "dropout between convolution stages"),
    k("pretrain.filters", "32,64,96", "filters of the three convolution stages"),
    k("pretrain.kernels", "24,16,8", "kernel sizes of the three convolution stages"),
    k("pretrain.projection", "256,128,50", "projection head layer sizes"),
    k("finetune.epochs", "50", "maximum fine-tuning epochs"),
    k("finetune.batch_size", "1", "fine-tuning batch size"),
    k("finetune.lr", "0.001", "Adam learning rate"),
    k("finetune.beta1", "0.9", "Adam first-moment decay"),
    k("finetune.beta2", "0.999", "Adam second-moment decay"),
    k("finetune.eps", "1e-8", "Adam epsilon"),
    k("finetune.patience", "5", "early-stopping patience in epochs"),
    k("finetune.val_fraction", "0.1", "validation share of the labeled samples"),
    k("finetune.unfreeze_encoder", "true", "train the convolutional encoder jointly with the head"),
    k("finetune.hidden", "1024", "hidden units of the classification head"),
];

/// Rendered key table for `--help`.
pub fn help_table() -> String {
    let width = KEYS.iter().map(|k| k.key.len()).max().unwrap_or(0);
    let mut s = String::from("Config keys (file lines `key = value`, override with --set key=value):\n");
    for spec in KEYS {
        let default = if spec.default.is_empty() { "\"\"" } else { spec.default };
        let _ = writeln!(s, "  {:width$}  [default: {default}]  {}", spec.key, spec.help);
    }
    s
}

/// Raw key/value settings with defaults filled in.
#[derive(Debug, Clone, PartialEq)]
pub struct Settings {
    values: BTreeMap<String, String>,
}

impl Default for Settings {
    fn default() -> Self {
        Self { values: KEYS.iter().map(|k| (k.key.to_string(), k.default.to_string())).collect() }
    }
}

impl Settings {
    /// Defaults overlaid with the contents of `path`.
    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut s = Self::default();
        s.merge_text(&text, path)?;
        Ok(s)
    }

    pub fn merge_text(&mut self, text: &str, origin: &Path) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let at = |msg: String| Error::Config(format!("{}:{}: {msg}", origin.display(), i + 1));
            let (key, value) = line.split_once('=').ok_or_else(|| at(format!("expected key = value, got '{line}'")))?;
            self.set(key.trim(), value.trim()).map_err(|e| at(e.to_string()))?;
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match self.values.get_mut(key) {
            Some(v) => {
                *v = value.to_string();
                Ok(())
            }
            None => Err(Error::Config(format!("unknown config key '{key}'"))),
        }
    }

    /// Apply a `key=value` override.
    pub fn set_pair(&mut self, pair: &str) -> Result<()> {
        let (key, value) = pair.split_once('=').ok_or_else(|| Error::Config(format!("override '{pair}' is not key=value")))?;
        self.set(key.trim(), value.trim())
    }

    pub fn get(&self, key: &str) -> &str {
        self.values.get(key).map(String::as_str).unwrap_or_else(|| panic!("config key {key} missing from table"))
    }

    fn parse<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let v = self.get(key);
        v.parse().map_err(|_| Error::Config(format!("{key}: cannot parse '{v}'")))
    }

    fn list<T: std::str::FromStr>(&self, key: &str) -> Result<Vec<T>> {
        let v = self.get(key);
        if v.is_empty() {
            return Ok(Vec::new());
        }
        v.split(',').map(|p| p.trim().parse().map_err(|_| Error::Config(format!("{key}: cannot parse '{p}'")))).collect()
    }

    fn triple(&self, key: &str) -> Result<[usize; 3]> {
        self.list::<usize>(key)?.try_into().map_err(|_| Error::Config(format!("{key}: expected three values")))
    }

    fn pairs(&self, key: &str) -> Result<BTreeMap<String, String>> {
        let mut map = BTreeMap::new();
        for item in self.get(key).split(';').map(str::trim).filter(|s| !s.is_empty()) {
            let (a, b) = item.split_once('=').ok_or_else(|| Error::Config(format!("{key}: '{item}' is not from=to")))?;
            map.insert(a.trim().to_string(), b.trim().to_string());
        }
        Ok(map)
    }

    pub fn root_seed(&self) -> Result<u64> {
        self.parse("seed")
    }

    pub fn backend(&self) -> Result<BackendKind> {
        BackendKind::parse(self.get("backend"))
    }

    pub fn acc_threshold(&self) -> Result<AccThreshold> {
        AccThreshold::parse(self.get("session.acc_th"))
    }

    pub fn dataset(&self) -> Result<DatasetSpec> {
        let groups = self.pairs("data.user_groups")?;
        let spec = DatasetSpec {
            window_len: self.parse("data.window_len")?,
            overlap: self.parse("data.overlap")?,
            label_merge: self.pairs("data.label_merge")?,
            user_groups: if groups.is_empty() { None } else { Some(groups) },
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn source(&self) -> Result<DataSource> {
        let csv = self.get("data.csv");
        if !csv.is_empty() {
            return Ok(DataSource::Csv(csv.split(',').map(|p| PathBuf::from(p.trim())).collect()));
        }
        let activities = match self.get("synth.activities") {
            "default" => ActivityPattern::default_set(),
            "two_band" => ActivityPattern::two_band_set(),
            other => other.split(';').map(str::trim).filter(|s| !s.is_empty()).map(ActivityPattern::parse).collect::<Result<_>>()?,
        };
        let dataset = self.dataset()?;
        let synth_seed = match self.get("synth.seed") {
            "derived" => seed::derive(self.root_seed()?, "synth"),
            _ => self.parse("synth.seed")?,
        };
        Ok(DataSource::Synth(SynthSpec {
            n_users: self.parse("synth.users")?,
            activities,
            windows_per_activity: self.parse("synth.windows_per_activity")?,
            noise_std: self.parse("synth.noise_std")?,
            sample_rate_hz: self.parse("synth.sample_rate_hz")?,
            window_len: dataset.window_len,
            overlap: dataset.overlap,
            bouts_per_activity: self.parse("synth.bouts")?,
            sway_std: self.parse("synth.sway_std")?,
            sway_tau_s: self.parse("synth.sway_tau")?,
            seed: synth_seed,
        }))
    }

    pub fn session(&self) -> Result<SessionConfig> {
        let eps = match self.get("session.eps") {
            "auto" => EpsSetting::Auto { k: self.parse("session.eps_k")?, quantile: self.parse("session.eps_quantile")? },
            _ => EpsSetting::Fixed(self.parse("session.eps")?),
        };
        Ok(SessionConfig { acc_th: self.acc_threshold()?, out_dim: self.parse("session.out_dim")?, eps, min_pts: self.parse("session.min_pts")? })
    }

    pub fn pretrain(&self) -> Result<PretrainConfig> {
        let cfg = PretrainConfig {
            epochs: self.parse("pretrain.epochs")?,
            batch_size: self.parse("pretrain.batch_size")?,
            base_lr: self.parse("pretrain.lr")?,
            momentum: self.parse("pretrain.momentum")?,
            temperature: self.parse("pretrain.temperature")?,
            dropout: self.parse("pretrain.dropout")?,
            arch: ConvArch { filters: self.triple("pretrain.filters")?, kernels: self.triple("pretrain.kernels")? },
            projection: self.list("pretrain.projection")?,
            seed: seed::derive(self.root_seed()?, "pretrain"),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn finetune(&self) -> Result<FineTuneConfig> {
        let cfg = FineTuneConfig {
            epochs: self.parse("finetune.epochs")?,
            batch_size: self.parse("finetune.batch_size")?,
            lr: self.parse("finetune.lr")?,
            beta1: self.parse("finetune.beta1")?,
            beta2: self.parse("finetune.beta2")?,
            adam_eps: self.parse("finetune.eps")?,
            patience: self.parse("finetune.patience")?,
            val_fraction: self.parse("finetune.val_fraction")?,
            unfreeze_encoder: self.parse("finetune.unfreeze_encoder")?,
            hidden: self.parse("finetune.hidden")?,
            seed: seed::derive(self.root_seed()?, "finetune"),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn experiment(&self) -> Result<ExperimentConfig> {
        let cfg = ExperimentConfig {
            source: self.source()?,
            dataset: self.dataset()?,
            session: self.session()?,
            backend: self.backend()?,
            pretrain: self.pretrain()?,
            finetune: self.finetune()?,
            thresholds: self.list("thresholds")?,
            seed: self.root_seed()?,
            jobs: self.parse("jobs")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}
