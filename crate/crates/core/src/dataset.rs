//! Recordings, windows, CSV ingestion and the synthetic activity generator.
//!
//! Everything downstream works on [`SensorWindow`]s: fixed-length tri-axial
//! accelerometer segments cut from a per-user [`Recording`] with a constant
//! stride of `floor(window_len * (1 - overlap))` samples.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::error::{Error, Result};
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sample {
    pub timestamp: f64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Sample {
    pub fn xyz(&self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }
}

/// One user's raw accelerometer stream.
#[derive(Debug, Clone, PartialEq)]
pub struct Recording {
    pub user_id: String,
    pub samples: Vec<Sample>,
    /// Per-sample activity labels; only present when ground truth is known.
    pub labels: Option<Vec<String>>,
}

impl Recording {
    pub fn new(user_id: impl Into<String>, samples: Vec<Sample>, labels: Option<Vec<String>>) -> Result<Self> {
        let user_id = user_id.into();
        if let Some(l) = &labels {
            if l.len() != samples.len() {
                return Err(Error::Data(format!(
                    "user {user_id}: {} labels for {} samples",
                    l.len(),
                    samples.len()
                )));
            }
        }
        for (i, s) in samples.iter().enumerate() {
            if !(s.x.is_finite() && s.y.is_finite() && s.z.is_finite() && s.timestamp.is_finite()) {
                return Err(Error::Data(format!("user {user_id}: non-finite value at sample {i}")));
            }
        }
        if let Some(i) = samples.windows(2).position(|w| w[1].timestamp < w[0].timestamp) {
            return Err(Error::Data(format!(
                "user {user_id}: timestamps decrease at sample {}",
                i + 1
            )));
        }
        Ok(Self { user_id, samples, labels })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Fixed-length tri-axial segment; the unit of all processing.
#[derive(Debug, Clone, PartialEq)]
pub struct SensorWindow {
    /// `window_len` rows of (x, y, z) in m/s².
    pub values: Vec<[f64; 3]>,
    pub oracle_label: Option<String>,
    pub user_id: String,
    pub start_index: usize,
}

impl SensorWindow {
    pub fn new(values: Vec<[f64; 3]>) -> Self {
        Self { values, oracle_label: None, user_id: String::new(), start_index: 0 }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Row-major `(len, 3)` view.
    pub fn flat(&self) -> &[f64] {
        self.values.as_flattened()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSpec {
    pub window_len: usize,
    pub overlap: f64,
    /// Raw label → merged label. Labels not in the map pass through unchanged.
    pub label_merge: BTreeMap<String, String>,
    /// user id → pseudo-user id.
    pub user_groups: Option<BTreeMap<String, String>>,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self { window_len: 100, overlap: 0.5, label_merge: BTreeMap::new(), user_groups: None }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.window_len == 0 {
            return Err(Error::Config("window_len must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.overlap) {
            return Err(Error::Config(format!("overlap {} outside [0, 1)", self.overlap)));
        }
        // merge targets must be fixed points so that merging is idempotent
        for (from, to) in &self.label_merge {
            if let Some(next) = self.label_merge.get(to) {
                if next != to {
                    return Err(Error::Config(format!(
                        "label merge chains {from} -> {to} -> {next}; map targets must not be remapped"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn merge_label(&self, label: &str) -> String {
        self.label_merge.get(label).cloned().unwrap_or_else(|| label.to_string())
    }

    pub fn stride(&self) -> usize {
        stride(self.window_len, self.overlap)
    }
}

/// Window start spacing. The small epsilon absorbs representation error in
/// `1 - overlap` (e.g. `100 * (1 - 0.9)`).
pub fn stride(window_len: usize, overlap: f64) -> usize {
    ((window_len as f64 * (1.0 - overlap)) + 1e-9).floor().max(1.0) as usize
}

/// Parse a CSV file with header `user,timestamp,x,y,z[,label]`.
///
/// Rows are grouped per user (or per pseudo-user when `spec.user_groups` is
/// set); within a user timestamps must not decrease. Pseudo-users merge their
/// members' streams ordered by timestamp.
pub fn load_csv(path: impl AsRef<Path>, spec: &DatasetSpec) -> Result<Vec<Recording>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_csv(&text, path, spec)
}

fn parse_csv(text: &str, path: &Path, spec: &DatasetSpec) -> Result<Vec<Recording>> {
    spec.validate()?;
    let perr = |line: usize, msg: String| Error::Parse { path: path.to_path_buf(), line, msg };

    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (hline, header) = lines.next().ok_or_else(|| perr(1, "empty file".into()))?;
    let cols: Vec<&str> = header.split(',').map(str::trim).collect();
    let has_label = match cols.as_slice() {
        ["user", "timestamp", "x", "y", "z"] => false,
        ["user", "timestamp", "x", "y", "z", "label"] => true,
        _ => {
            return Err(perr(
                hline + 1,
                format!("expected header user,timestamp,x,y,z[,label], found '{header}'"),
            ))
        }
    };
    let ncols = cols.len();

    // per raw user: (samples, labels), in file order
    let mut raw: BTreeMap<String, (Vec<Sample>, Vec<String>)> = BTreeMap::new();
    for (idx, line) in lines {
        let lineno = idx + 1;
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != ncols {
            return Err(perr(lineno, format!("expected {ncols} fields, found {}", fields.len())));
        }
        let num = |i: usize, name: &str| -> Result<f64> {
            let v: f64 = fields[i]
                .parse()
                .map_err(|_| perr(lineno, format!("bad {name} value '{}'", fields[i])))?;
            if !v.is_finite() {
                return Err(perr(lineno, format!("non-finite {name}")));
            }
            Ok(v)
        };
        if fields[0].is_empty() {
            return Err(perr(lineno, "empty user id".into()));
        }
        let sample = Sample {
            timestamp: num(1, "timestamp")?,
            x: num(2, "x")?,
            y: num(3, "y")?,
            z: num(4, "z")?,
        };
        let entry = raw.entry(fields[0].to_string()).or_default();
        if let Some(prev) = entry.0.last() {
            if sample.timestamp < prev.timestamp {
                return Err(perr(
                    lineno,
                    format!("timestamp {} precedes {} for user {}", sample.timestamp, prev.timestamp, fields[0]),
                ));
            }
        }
        entry.0.push(sample);
        if has_label {
            if fields[5].is_empty() {
                return Err(perr(lineno, "empty label".into()));
            }
            entry.1.push(spec.merge_label(fields[5]));
        }
    }

    let mut grouped: BTreeMap<String, Vec<(Vec<Sample>, Vec<String>)>> = BTreeMap::new();
    for (user, data) in raw {
        let target = match &spec.user_groups {
            Some(groups) => groups.get(&user).cloned().unwrap_or(user),
            None => user,
        };
        grouped.entry(target).or_default().push(data);
    }

    grouped
        .into_iter()
        .map(|(user, parts)| {
            let (samples, labels) = if parts.len() == 1 {
                parts.into_iter().next().unwrap()
            } else {
                let mut rows: Vec<(Sample, Option<String>)> = parts
                    .into_iter()
                    .flat_map(|(s, l)| {
                        let mut l = l.into_iter();
                        s.into_iter().map(move |s| (s, l.next())).collect::<Vec<_>>()
                    })
                    .collect();
                rows.sort_by(|a, b| a.0.timestamp.total_cmp(&b.0.timestamp));
                let samples = rows.iter().map(|r| r.0).collect();
                let labels = rows.into_iter().filter_map(|r| r.1).collect();
                (samples, labels)
            };
            Recording::new(user, samples, has_label.then_some(labels))
        })
        .collect()
}

/// Cut a recording into windows of `window_len` samples starting every
/// `stride(window_len, overlap)` samples. A trailing partial window is
/// dropped; a recording shorter than one window yields no windows.
pub fn segment(recording: &Recording, window_len: usize, overlap: f64) -> Vec<SensorWindow> {
    if window_len == 0 || recording.len() < window_len {
        return Vec::new();
    }
    let step = stride(window_len, overlap);
    (0..=recording.len() - window_len)
        .step_by(step)
        .map(|start| {
            let end = start + window_len;
            SensorWindow {
                values: recording.samples[start..end].iter().map(Sample::xyz).collect(),
                oracle_label: recording.labels.as_ref().map(|l| majority_label(&l[start..end])),
                user_id: recording.user_id.clone(),
                start_index: start,
            }
        })
        .collect()
}

/// Most frequent label; ties go to the label that appears first.
pub fn majority_label(labels: &[String]) -> String {
    let mut counts: Vec<(&str, usize)> = Vec::new();
    for l in labels {
        match counts.iter_mut().find(|(k, _)| *k == l.as_str()) {
            Some((_, c)) => *c += 1,
            None => counts.push((l.as_str(), 1)),
        }
    }
    let mut best = counts[0];
    for &c in &counts[1..] {
        if c.1 > best.1 {
            best = c;
        }
    }
    best.0.to_string()
}

/// Periodic signal template for one synthetic activity.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivityPattern {
    pub name: String,
    pub freq_hz: f64,
    pub amplitude: [f64; 3],
    pub offset: [f64; 3],
}

impl ActivityPattern {
    pub fn new(name: &str, freq_hz: f64, amplitude: [f64; 3], offset: [f64; 3]) -> Self {
        Self { name: name.to_string(), freq_hz, amplitude, offset }
    }

    /// Four activities separated in orientation, intensity and cadence.
    pub fn default_set() -> Vec<ActivityPattern> {
        vec![
            Self::new("sitting", 0.4, [0.05, 0.05, 0.05], [0.0, 3.0, 9.3]),
            Self::new("standing", 0.4, [0.1, 0.1, 0.1], [0.0, 9.6, 1.5]),
            Self::new("walking", 1.8, [2.0, 3.0, 1.5], [0.5, 9.6, 1.0]),
            Self::new("running", 2.8, [5.0, 7.0, 4.0], [1.0, 9.6, 2.0]),
        ]
    }

    /// Two activities in disjoint frequency bands with matched orientation.
    pub fn two_band_set() -> Vec<ActivityPattern> {
        vec![
            Self::new("slow", 0.5, [2.0, 2.0, 2.0], [0.0, 9.6, 1.0]),
            Self::new("fast", 4.0, [2.0, 2.0, 2.0], [0.0, 9.6, 1.0]),
        ]
    }

    /// Parse `name:freq:ax/ay/az:ox/oy/oz`.
    pub fn parse(text: &str) -> Result<Self> {
        let bad = || Error::Config(format!("activity pattern '{text}': expected name:freq:ax/ay/az:ox/oy/oz"));
        let parts: Vec<&str> = text.trim().split(':').collect();
        if parts.len() != 4 || parts[0].is_empty() {
            return Err(bad());
        }
        let triple = |s: &str| -> Result<[f64; 3]> {
            let v: Vec<f64> = s.split('/').map(|p| p.trim().parse::<f64>()).collect::<std::result::Result<_, _>>().map_err(|_| bad())?;
            v.try_into().map_err(|_| bad())
        };
        Ok(Self {
            name: parts[0].to_string(),
            freq_hz: parts[1].trim().parse().map_err(|_| bad())?,
            amplitude: triple(parts[2])?,
            offset: triple(parts[3])?,
        })
    }

    pub fn render(&self) -> String {
        let t = |v: &[f64; 3]| format!("{}/{}/{}", v[0], v[1], v[2]);
        format!("{}:{}:{}:{}", self.name, self.freq_hz, t(&self.amplitude), t(&self.offset))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub n_users: usize,
    pub activities: Vec<ActivityPattern>,
    pub windows_per_activity: usize,
    /// Additive Gaussian noise, m/s².
    pub noise_std: f64,
    pub sample_rate_hz: f64,
    pub window_len: usize,
    pub overlap: f64,
    /// Contiguous bouts each activity is split into.
    pub bouts_per_activity: usize,
    /// Stationary std of a slow per-axis orientation drift (m/s²), modelling
    /// posture sway within and across bouts.
    pub sway_std: f64,
    /// Correlation time of the drift, seconds.
    pub sway_tau_s: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            n_users: 3,
            activities: ActivityPattern::default_set(),
            windows_per_activity: 100,
            noise_std: 0.3,
            sample_rate_hz: 50.0,
            window_len: 100,
            overlap: 0.5,
            bouts_per_activity: 4,
            sway_std: 0.6,
            sway_tau_s: 2.0,
            seed: 0,
        }
    }
}

/// Generate labeled synthetic recordings.
///
/// Each user's stream is a sequence of rounds; every round holds one
/// contiguous bout of each activity in shuffled order.
/// Sample labels are laid out so that, for `overlap <= 0.5`, segmenting with
/// the same window parameters yields exactly `windows_per_activity` windows
/// per activity. Per-user cadence, amplitude and offset jitter model
/// inter-user variability.
pub fn synth_generate(spec: &SynthSpec) -> Result<Vec<Recording>> {
    if spec.noise_std.is_nan() || spec.noise_std < 0.0 {
        return Err(Error::Config(format!("noise_std {} must be >= 0", spec.noise_std)));
    }
    if spec.activities.len() < 2 {
        return Err(Error::Config("synthetic data needs at least 2 activities".into()));
    }
    if spec.n_users == 0 || spec.windows_per_activity == 0 || spec.window_len == 0 {
        return Err(Error::Config("n_users, windows_per_activity and window_len must be positive".into()));
    }
    if !(spec.sample_rate_hz > 0.0) {
        return Err(Error::Config("sample_rate_hz must be positive".into()));
    }
    if !(spec.sway_std >= 0.0 && spec.sway_tau_s > 0.0) {
        return Err(Error::Config("sway_std must be >= 0 and sway_tau_s > 0".into()));
    }
    let step = stride(spec.window_len, spec.overlap);
    let noise = Normal::new(0.0, spec.noise_std.max(f64::MIN_POSITIVE)).expect("finite std");
    let mut out = Vec::with_capacity(spec.n_users);

    for u in 0..spec.n_users {
        let user_id = format!("user{u}");
        let mut rng = seed::derived_rng(spec.seed, &format!("synth/{user_id}"));

        let freq_scale: f64 = rng.random_range(0.9..1.1);
        // per-activity gains, offsets and inter-axis phase lags are fixed for
        // a user; only the common phase changes from bout to bout
        let jitter: Vec<([f64; 3], [f64; 3], [f64; 3])> = spec
            .activities
            .iter()
            .map(|_| {
                let amp = [0; 3].map(|_| rng.random_range(0.85..1.15));
                let off = [0; 3].map(|_| rng.random_range(-0.3..0.3));
                let lag = [0; 3].map(|_| rng.random_range(0.0..2.0 * PI));
                (amp, off, lag)
            })
            .collect();

        // bouts as (activity index, window count), one bout per activity
        // per round in shuffled order
        let nb = spec.bouts_per_activity.clamp(1, spec.windows_per_activity);
        let base = spec.windows_per_activity / nb;
        let extra = spec.windows_per_activity % nb;
        let mut bouts: Vec<(usize, usize)> = Vec::new();
        for b in 0..nb {
            let mut round: Vec<usize> = (0..spec.activities.len()).collect();
            round.shuffle(&mut rng);
            bouts.extend(round.into_iter().map(|a| (a, base + usize::from(b < extra))));
        }

        let designation: Vec<usize> = bouts.iter().flat_map(|&(a, n)| std::iter::repeat_n(a, n)).collect();
        let n_windows = designation.len();
        let n_samples = (n_windows - 1) * step + spec.window_len;

        // per-sample activity, then a random phase per contiguous run
        let act_of = |i: usize| designation[(i / step).min(n_windows - 1)];
        let mut samples = Vec::with_capacity(n_samples);
        let mut labels = Vec::with_capacity(n_samples);
        let mut bout_phase = 0.0f64;
        let mut prev_act = usize::MAX;
        // Ornstein-Uhlenbeck drift sampled at the sensor rate
        let rho = (-1.0 / (spec.sample_rate_hz * spec.sway_tau_s)).exp();
        let kick = spec.sway_std * (1.0 - rho * rho).sqrt();
        let mut sway: [f64; 3] = [0; 3].map(|_| { let z: f64 = StandardNormal.sample(&mut rng); spec.sway_std * z });
        for i in 0..n_samples {
            let a = act_of(i);
            if a != prev_act {
                bout_phase = rng.random_range(0.0..2.0 * PI);
                prev_act = a;
            }
            let p = &spec.activities[a];
            let (amp_j, off_j, lag) = jitter[a];
            let phase = lag.map(|l| l + bout_phase);
            let t = i as f64 / spec.sample_rate_hz;
            let w = 2.0 * PI * p.freq_hz * freq_scale * t;
            let mut v = [0.0; 3];
            for k in 0..3 {
                if spec.sway_std > 0.0 {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    sway[k] = rho * sway[k] + kick * z;
                }
                let amp = p.amplitude[k] * amp_j[k];
                v[k] = p.offset[k] + off_j[k] + sway[k] + amp * ((w + phase[k]).sin() + 0.3 * (2.0 * w + phase[k]).sin());
                if spec.noise_std > 0.0 {
                    v[k] += noise.sample(&mut rng);
                }
            }
            samples.push(Sample { timestamp: t, x: v[0], y: v[1], z: v[2] });
            labels.push(p.name.clone());
        }
        out.push(Recording::new(user_id, samples, Some(labels))?);
    }
    Ok(out)
}
