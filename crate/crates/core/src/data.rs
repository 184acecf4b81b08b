//! Signal streams, labeled windows, 85:15 splitting, z-scoring and the
//! synthetic sinusoid generator.
//!
//! Stream files are UTF-8 comma-separated text. The first line carries
//! `subject,modality,sample_rate` values (a literal column-name line with those
//! three names is also accepted and skipped), and every following line is
//! `sample_value,raw_label`. Raw protocol labels 1, 2 and 3 (baseline, stress,
//! amusement) become classes 0, 1 and 2; every other raw label is discarded.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use log::warn;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::N_CLASSES;

/// Default split ratio for the train partition.
pub const TRAIN_FRACTION: f64 = 0.85;
/// Chest-device sampling rate of the converted recordings.
pub const REAL_SAMPLE_RATE: f64 = 700.0;
/// Standard deviations below this are treated as zero.
pub const MIN_STD: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {msg}")]
    Parse { path: PathBuf, line: usize, msg: String },
    #[error("invalid data config: {0}")]
    Config(String),
    #[error("invalid dataset: {0}")]
    Invalid(String),
    #[error("malformed dataset file {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

pub type Result<T> = std::result::Result<T, DataError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Modality {
    Ecg,
    Eda,
    Emg,
    Resp,
    Temp,
    AccC1,
    AccC2,
    AccC3,
}

impl Modality {
    pub const ALL: [Modality; 8] = [
        Modality::Ecg,
        Modality::Eda,
        Modality::Emg,
        Modality::Resp,
        Modality::Temp,
        Modality::AccC1,
        Modality::AccC2,
        Modality::AccC3,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Modality::Ecg => "ECG",
            Modality::Eda => "EDA",
            Modality::Emg => "EMG",
            Modality::Resp => "RESP",
            Modality::Temp => "TEMP",
            Modality::AccC1 => "ACC_C1",
            Modality::AccC2 => "ACC_C2",
            Modality::AccC3 => "ACC_C3",
        }
    }

    pub fn is_accelerometer(self) -> bool {
        matches!(self, Modality::AccC1 | Modality::AccC2 | Modality::AccC3)
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Modality {
    type Err = DataError;

    fn from_str(s: &str) -> Result<Self> {
        let up = s.trim().to_ascii_uppercase();
        Modality::ALL
            .into_iter()
            .find(|m| m.name() == up)
            .ok_or_else(|| DataError::Config(format!("unknown modality {s:?}")))
    }
}

/// Maps raw protocol labels to classes: 1 → 0 (neutral), 2 → 1 (stress), 3 → 2 (amusement).
pub fn map_raw_label(raw: u32) -> Option<usize> {
    match raw {
        1..=3 => Some(raw as usize - 1),
        _ => None,
    }
}

/// One single-channel recording with per-sample raw labels.
#[derive(Debug, Clone, PartialEq)]
pub struct SignalStream {
    pub subject_id: String,
    pub modality: Modality,
    pub sample_rate: f64,
    pub samples: Vec<f64>,
    pub labels: Vec<u32>,
}

impl SignalStream {
    pub fn new(subject_id: impl Into<String>, modality: Modality, sample_rate: f64, samples: Vec<f64>, labels: Vec<u32>) -> Result<Self> {
        let s = Self {
            subject_id: subject_id.into(),
            modality,
            sample_rate,
            samples,
            labels,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.samples.len() != self.labels.len() {
            return Err(DataError::Invalid(format!(
                "stream {}/{} has {} samples but {} labels",
                self.subject_id,
                self.modality,
                self.samples.len(),
                self.labels.len()
            )));
        }
        if !(self.sample_rate > 0.0) || !self.sample_rate.is_finite() {
            return Err(DataError::Invalid(format!("sample rate must be positive, got {}", self.sample_rate)));
        }
        if self.subject_id.contains(',') || self.subject_id.trim().is_empty() {
            return Err(DataError::Invalid(format!("bad subject id {:?}", self.subject_id)));
        }
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let file = fs::File::open(path).map_err(io_err(path))?;
        let mut lines = BufReader::new(file).lines().enumerate();
        let perr = |line: usize, msg: String| DataError::Parse {
            path: path.to_path_buf(),
            line: line + 1,
            msg,
        };
        let mut header = None;
        for (no, line) in lines.by_ref() {
            let line = line.map_err(io_err(path))?;
            let t = line.trim();
            if t.is_empty() || t.eq_ignore_ascii_case("subject,modality,sample_rate") {
                continue;
            }
            header = Some((no, t.to_string()));
            break;
        }
        let (hno, header) = header.ok_or_else(|| perr(0, "missing header line".into()))?;
        let fields: Vec<&str> = header.split(',').map(str::trim).collect();
        let [subject, modality, rate] = fields[..] else {
            return Err(perr(hno, format!("expected subject,modality,sample_rate, got {header:?}")));
        };
        let modality: Modality = modality.parse().map_err(|e: DataError| perr(hno, e.to_string()))?;
        let sample_rate: f64 = rate.parse().map_err(|_| perr(hno, format!("bad sample rate {rate:?}")))?;

        let mut samples = Vec::new();
        let mut labels = Vec::new();
        for (no, line) in lines {
            let line = line.map_err(io_err(path))?;
            let t = line.trim();
            if t.is_empty() || t.eq_ignore_ascii_case("sample_value,raw_label") {
                continue;
            }
            let (v, l) = t
                .split_once(',')
                .ok_or_else(|| perr(no, format!("expected sample_value,raw_label, got {t:?}")))?;
            let v: f64 = v.trim().parse().map_err(|_| perr(no, format!("bad sample value {v:?}")))?;
            if !v.is_finite() {
                return Err(perr(no, format!("non-finite sample value {v}")));
            }
            let l: u32 = l.trim().parse().map_err(|_| perr(no, format!("bad raw label {l:?}")))?;
            samples.push(v);
            labels.push(l);
        }
        Self::new(subject, modality, sample_rate, samples, labels)
    }

    /// Writes the stream; floats use the shortest representation that parses back exactly.
    pub fn write(&self, path: &Path) -> Result<()> {
        self.validate()?;
        let file = fs::File::create(path).map_err(io_err(path))?;
        let mut w = BufWriter::new(file);
        let mut body = || -> std::io::Result<()> {
            writeln!(w, "{},{},{}", self.subject_id, self.modality, self.sample_rate)?;
            for (v, l) in self.samples.iter().zip(&self.labels) {
                writeln!(w, "{v},{l}")?;
            }
            w.flush()
        };
        body().map_err(io_err(path))
    }

    /// Conventional file name `<subject>_<modality>.csv`.
    pub fn file_name(&self) -> String {
        format!("{}_{}.csv", self.subject_id, self.modality)
    }
}

/// Reads every `*.csv` stream in `dir`, optionally keeping one modality. Sorted by file name.
pub fn load_streams(dir: &Path, modality: Option<Modality>) -> Result<Vec<SignalStream>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(io_err(dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "csv"))
        .collect();
    paths.sort();
    let mut out = Vec::new();
    for p in paths {
        let s = SignalStream::read(&p)?;
        if modality.is_none_or(|m| m == s.modality) {
            out.push(s);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Window {
    pub samples: Vec<f64>,
    pub label: usize,
    pub subject: String,
}

/// z-score statistics from a train partition.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: f64,
    pub std: f64,
    /// False when the train std was degenerate and values pass through unscaled.
    pub scaled: bool,
}

impl NormStats {
    pub fn identity() -> Self {
        Self {
            mean: 0.0,
            std: 1.0,
            scaled: false,
        }
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        if !self.scaled {
            return x.to_vec();
        }
        x.iter().map(|v| (v - self.mean) / self.std).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowedDataset {
    pub modality: Modality,
    pub window_len: usize,
    pub windows: Vec<Window>,
    pub stats: Option<NormStats>,
}

impl WindowedDataset {
    pub fn empty(modality: Modality, window_len: usize) -> Self {
        Self {
            modality,
            window_len,
            windows: Vec::new(),
            stats: None,
        }
    }

    pub fn len(&self) -> usize {
        self.windows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.windows.is_empty()
    }

    pub fn class_counts(&self) -> [usize; N_CLASSES] {
        let mut c = [0; N_CLASSES];
        for w in &self.windows {
            c[w.label] += 1;
        }
        c
    }

    pub fn labels(&self) -> Vec<usize> {
        self.windows.iter().map(|w| w.label).collect()
    }

    pub fn samples(&self) -> Vec<&[f64]> {
        self.windows.iter().map(|w| w.samples.as_slice()).collect()
    }

    pub fn validate(&self) -> Result<()> {
        for (i, w) in self.windows.iter().enumerate() {
            if w.samples.len() != self.window_len {
                return Err(DataError::Invalid(format!(
                    "window {i} has {} samples, expected {}",
                    w.samples.len(),
                    self.window_len
                )));
            }
            if w.label >= N_CLASSES {
                return Err(DataError::Invalid(format!("window {i} has label {}", w.label)));
            }
            if w.samples.iter().any(|v| !v.is_finite()) {
                return Err(DataError::Invalid(format!("window {i} has non-finite samples")));
            }
        }
        Ok(())
    }

    /// Appends another dataset of the same modality and window length.
    pub fn extend(&mut self, other: WindowedDataset) -> Result<()> {
        if other.modality != self.modality || other.window_len != self.window_len {
            return Err(DataError::Invalid(format!(
                "cannot merge {}/{} into {}/{}",
                other.modality, other.window_len, self.modality, self.window_len
            )));
        }
        self.windows.extend(other.windows);
        Ok(())
    }

    /// Concatenates windows into one stream with raw labels `class + 1`.
    pub fn to_stream(&self, subject_id: &str, sample_rate: f64) -> Result<SignalStream> {
        let mut samples = Vec::with_capacity(self.len() * self.window_len);
        let mut labels = Vec::with_capacity(samples.capacity());
        for w in &self.windows {
            samples.extend_from_slice(&w.samples);
            labels.extend(std::iter::repeat_n(w.label as u32 + 1, w.samples.len()));
        }
        SignalStream::new(subject_id, self.modality, sample_rate, samples, labels)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum DataWarning {
    StreamShorterThanWindow {
        subject: String,
        modality: Modality,
        samples: usize,
        window_len: usize,
    },
    MissingClass {
        partition: &'static str,
        class: usize,
    },
    DegenerateStd {
        modality: Modality,
        std: f64,
    },
}

impl fmt::Display for DataWarning {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DataWarning::StreamShorterThanWindow {
                subject,
                modality,
                samples,
                window_len,
            } => write!(f, "stream {subject}/{modality} has {samples} samples, shorter than window {window_len}"),
            DataWarning::MissingClass { partition, class } => {
                write!(f, "{partition} partition has no window of class {class}")
            }
            DataWarning::DegenerateStd { modality, std } => {
                write!(f, "{modality} train std {std:e} is degenerate; leaving values unscaled")
            }
        }
    }
}

fn emit(warnings: &mut Vec<DataWarning>, w: DataWarning) {
    warn!("{w}");
    warnings.push(w);
}

/// Cuts windows at offsets `0, stride, 2·stride, …`, keeping only windows whose
/// raw labels are constant and in {1, 2, 3}.
pub fn window_stream(stream: &SignalStream, window_len: usize, stride: usize) -> Result<(WindowedDataset, Vec<DataWarning>)> {
    if window_len == 0 || stride == 0 {
        return Err(DataError::Config(format!(
            "window_len and stride must be positive (got {window_len}, {stride})"
        )));
    }
    stream.validate()?;
    let mut ds = WindowedDataset::empty(stream.modality, window_len);
    let mut warnings = Vec::new();
    let n = stream.samples.len();
    if window_len > n {
        emit(
            &mut warnings,
            DataWarning::StreamShorterThanWindow {
                subject: stream.subject_id.clone(),
                modality: stream.modality,
                samples: n,
                window_len,
            },
        );
        return Ok((ds, warnings));
    }
    let mut start = 0;
    while start + window_len <= n {
        let labels = &stream.labels[start..start + window_len];
        let first = labels[0];
        if labels.iter().all(|&l| l == first) {
            if let Some(class) = map_raw_label(first) {
                ds.windows.push(Window {
                    samples: stream.samples[start..start + window_len].to_vec(),
                    label: class,
                    subject: stream.subject_id.clone(),
                });
            }
        }
        start += stride;
    }
    Ok((ds, warnings))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train_fraction: f64,
    pub seed: u64,
}

impl SplitSpec {
    pub fn new(seed: u64) -> Self {
        Self {
            train_fraction: TRAIN_FRACTION,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(DataError::Config(format!(
                "train_fraction must lie in (0, 1), got {}",
                self.train_fraction
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Split {
    pub train: WindowedDataset,
    pub test: WindowedDataset,
    pub warnings: Vec<DataWarning>,
}

/// Seeded shuffle, then the first `round(train_fraction · N)` windows go to train.
pub fn split(dataset: &WindowedDataset, spec: &SplitSpec) -> Result<Split> {
    spec.validate()?;
    if dataset.is_empty() {
        return Err(DataError::Invalid("cannot split an empty dataset".into()));
    }
    let n = dataset.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(spec.seed));
    let n_train = (spec.train_fraction * n as f64).round() as usize;
    let pick = |idx: &[usize]| WindowedDataset {
        modality: dataset.modality,
        window_len: dataset.window_len,
        windows: idx.iter().map(|&i| dataset.windows[i].clone()).collect(),
        stats: dataset.stats,
    };
    let train = pick(&order[..n_train]);
    let test = pick(&order[n_train..]);
    let mut warnings = Vec::new();
    let present = dataset.class_counts();
    for (name, part) in [("train", &train), ("test", &test)] {
        let counts = part.class_counts();
        for class in 0..N_CLASSES {
            if present[class] > 0 && counts[class] == 0 {
                emit(&mut warnings, DataWarning::MissingClass { partition: name, class });
            }
        }
    }
    Ok(Split { train, test, warnings })
}

/// Global mean and population std over every sample of every window.
pub fn compute_stats(dataset: &WindowedDataset) -> (f64, f64) {
    let count = (dataset.len() * dataset.window_len) as f64;
    let mean = dataset.windows.iter().flat_map(|w| &w.samples).sum::<f64>() / count;
    let var = dataset
        .windows
        .iter()
        .flat_map(|w| &w.samples)
        .map(|v| (v - mean) * (v - mean))
        .sum::<f64>()
        / count;
    (mean, var.sqrt())
}

#[derive(Debug, Clone)]
pub struct Normalized {
    pub train: WindowedDataset,
    pub test: WindowedDataset,
    pub stats: NormStats,
    pub warnings: Vec<DataWarning>,
}

/// z-scores both partitions with the train partition's statistics.
pub fn normalize(train: &WindowedDataset, test: &WindowedDataset) -> Result<Normalized> {
    if train.is_empty() {
        return Err(DataError::Invalid("cannot normalize with an empty train partition".into()));
    }
    let (mean, std) = compute_stats(train);
    let mut warnings = Vec::new();
    let stats = if std < MIN_STD {
        emit(
            &mut warnings,
            DataWarning::DegenerateStd {
                modality: train.modality,
                std,
            },
        );
        NormStats {
            mean,
            std,
            scaled: false,
        }
    } else {
        NormStats {
            mean,
            std,
            scaled: true,
        }
    };
    Ok(Normalized {
        train: apply_stats(train, &stats),
        test: apply_stats(test, &stats),
        stats,
        warnings,
    })
}

pub fn apply_stats(ds: &WindowedDataset, stats: &NormStats) -> WindowedDataset {
    WindowedDataset {
        modality: ds.modality,
        window_len: ds.window_len,
        windows: ds
            .windows
            .iter()
            .map(|w| Window {
                samples: stats.apply(&w.samples),
                label: w.label,
                subject: w.subject.clone(),
            })
            .collect(),
        stats: Some(*stats),
    }
}

/// One class of the synthetic generator: `amplitude · sin(2π·frequency·t + φ)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassSpec {
    pub frequency: f64,
    pub amplitude: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub modality: Modality,
    pub classes: [ClassSpec; N_CLASSES],
    pub n_windows: usize,
    pub window_len: usize,
    pub sample_rate: f64,
    pub noise_std: f64,
    pub seed: u64,
}

/// Built-in generator families; different families use different frequencies.
pub fn synth_family(index: usize) -> [ClassSpec; N_CLASSES] {
    let c = |frequency, amplitude| ClassSpec { frequency, amplitude };
    match index % 2 {
        0 => [c(2.0, 1.0), c(8.0, 1.5), c(20.0, 2.0)],
        _ => [c(4.0, 2.0), c(14.0, 1.0), c(30.0, 1.5)],
    }
}

impl SynthSpec {
    pub fn new(modality: Modality, family: usize, seed: u64) -> Self {
        Self {
            modality,
            classes: synth_family(family),
            n_windows: 600,
            window_len: 256,
            sample_rate: 256.0,
            noise_std: 0.3,
            seed,
        }
    }
}

/// Balanced synthetic dataset: window `i` belongs to class `i mod 3`, with a
/// uniformly random phase and additive Gaussian noise.
pub fn synth_dataset(spec: &SynthSpec) -> Result<WindowedDataset> {
    for (i, a) in spec.classes.iter().enumerate() {
        if !(a.frequency.is_finite() && a.amplitude.is_finite()) {
            return Err(DataError::Config(format!("class {i} spec is not finite")));
        }
        for b in &spec.classes[i + 1..] {
            if a == b {
                return Err(DataError::Config(format!("duplicate class spec {a:?}")));
            }
        }
    }
    if spec.window_len == 0 || !(spec.sample_rate > 0.0) || !(spec.noise_std >= 0.0) {
        return Err(DataError::Config(
            "window_len and sample_rate must be positive and noise_std non-negative".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let noise = Normal::new(0.0, spec.noise_std).map_err(|e| DataError::Config(e.to_string()))?;
    let mut windows = Vec::with_capacity(spec.n_windows);
    for i in 0..spec.n_windows {
        let label = i % N_CLASSES;
        let c = spec.classes[label];
        let phase = rng.random_range(0.0..std::f64::consts::TAU);
        let samples = (0..spec.window_len)
            .map(|j| {
                let t = j as f64 / spec.sample_rate;
                let clean = c.amplitude * (std::f64::consts::TAU * c.frequency * t + phase).sin();
                if spec.noise_std > 0.0 {
                    clean + noise.sample(&mut rng)
                } else {
                    clean
                }
            })
            .collect();
        windows.push(Window {
            samples,
            label,
            subject: "SYN".into(),
        });
    }
    Ok(WindowedDataset {
        modality: spec.modality,
        window_len: spec.window_len,
        windows,
        stats: None,
    })
}

/// Raw split plus the train-derived normalization for one modality.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreparedModality {
    pub modality: Modality,
    pub window_len: usize,
    pub split: SplitSpec,
    pub stats: NormStats,
    pub train: Vec<Window>,
    pub test: Vec<Window>,
}

impl PreparedModality {
    fn dataset(&self, windows: &[Window]) -> WindowedDataset {
        WindowedDataset {
            modality: self.modality,
            window_len: self.window_len,
            windows: windows.to_vec(),
            stats: None,
        }
    }

    pub fn raw_train(&self) -> WindowedDataset {
        self.dataset(&self.train)
    }

    pub fn raw_test(&self) -> WindowedDataset {
        self.dataset(&self.test)
    }

    pub fn normalized_train(&self) -> WindowedDataset {
        apply_stats(&self.raw_train(), &self.stats)
    }

    pub fn normalized_test(&self) -> WindowedDataset {
        apply_stats(&self.raw_test(), &self.stats)
    }

    pub fn class_counts(&self) -> BTreeMap<&'static str, [usize; N_CLASSES]> {
        BTreeMap::from([
            ("train", self.raw_train().class_counts()),
            ("test", self.raw_test().class_counts()),
        ])
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_vec(self).map_err(|source| DataError::Json {
            path: path.to_path_buf(),
            source,
        })?;
        fs::write(path, json).map_err(io_err(path))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(io_err(path))?;
        serde_json::from_slice(&bytes).map_err(|source| DataError::Json {
            path: path.to_path_buf(),
            source,
        })
    }
}

/// Windows every stream of one modality, merges them, splits and normalizes.
pub fn prepare(
    modality: Modality,
    streams: &[SignalStream],
    window_len: usize,
    stride: usize,
    spec: &SplitSpec,
) -> Result<(PreparedModality, Vec<DataWarning>)> {
    let mut all = WindowedDataset::empty(modality, window_len);
    let mut warnings = Vec::new();
    for s in streams.iter().filter(|s| s.modality == modality) {
        let (ds, w) = window_stream(s, window_len, stride)?;
        warnings.extend(w);
        all.extend(ds)?;
    }
    if all.is_empty() {
        return Err(DataError::Invalid(format!(
            "no labeled {modality} windows of length {window_len} were found"
        )));
    }
    let parts = split(&all, spec)?;
    warnings.extend(parts.warnings);
    let norm = normalize(&parts.train, &parts.test)?;
    warnings.extend(norm.warnings);
    Ok((
        PreparedModality {
            modality,
            window_len,
            split: *spec,
            stats: norm.stats,
            train: parts.train.windows,
            test: parts.test.windows,
        },
        warnings,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn stream(labels: Vec<u32>) -> SignalStream {
        let samples = (0..labels.len()).map(|i| i as f64 * 0.5).collect();
        SignalStream::new("S2", Modality::Eda, 700.0, samples, labels).unwrap()
    }

    fn dataset(n: usize) -> WindowedDataset {
        WindowedDataset {
            modality: Modality::Ecg,
            window_len: 2,
            windows: (0..n)
                .map(|i| Window {
                    samples: vec![i as f64, -(i as f64)],
                    label: i % 3,
                    subject: "S".into(),
                })
                .collect(),
            stats: None,
        }
    }

    #[test]
    fn raw_label_mapping() {
        assert_eq!(map_raw_label(1), Some(0));
        assert_eq!(map_raw_label(2), Some(1));
        assert_eq!(map_raw_label(3), Some(2));
        for raw in [0, 4, 5, 6, 7] {
            assert_eq!(map_raw_label(raw), None);
        }
    }

    #[test]
    fn uniform_stream_windows() {
        let (ds, w) = window_stream(&stream(vec![2; 2100]), 700, 700).unwrap();
        assert!(w.is_empty());
        assert_eq!(ds.len(), 3);
        assert!(ds.windows.iter().all(|w| w.label == 1));
    }

    #[test]
    fn transitions_and_excluded_labels_are_dropped() {
        let mut labels = vec![1; 10];
        labels.extend(vec![2; 10]);
        labels.extend(vec![4; 10]);
        labels.extend(vec![3; 10]);
        let (ds, _) = window_stream(&stream(labels), 8, 4).unwrap();
        // kept offsets: 0 (raw 1), 12 (raw 2), 32 (raw 3); offset 20 is pure raw 4
        assert_eq!(ds.labels(), vec![0, 1, 2]);
        assert_eq!(ds.windows[1].samples[0], 6.0);
    }

    #[test]
    fn short_stream_warns() {
        let (ds, w) = window_stream(&stream(vec![1; 10]), 700, 700).unwrap();
        assert!(ds.is_empty());
        assert!(matches!(w[0], DataWarning::StreamShorterThanWindow { samples: 10, .. }));
        assert!(window_stream(&stream(vec![1; 10]), 5, 0).is_err());
    }

    #[test]
    fn split_counts_and_determinism() {
        let ds = dataset(100);
        let a = split(&ds, &SplitSpec::new(3)).unwrap();
        assert_eq!((a.train.len(), a.test.len()), (85, 15));
        let b = split(&ds, &SplitSpec::new(3)).unwrap();
        assert_eq!(a.train, b.train);
        assert_eq!(a.test, b.test);
        let c = split(&ds, &SplitSpec::new(4)).unwrap();
        assert_ne!(a.train, c.train);
    }

    #[test]
    fn degenerate_split_warns() {
        let s = split(&dataset(1), &SplitSpec::new(0)).unwrap();
        assert_eq!((s.train.len(), s.test.len()), (1, 0));
        assert!(s
            .warnings
            .iter()
            .any(|w| matches!(w, DataWarning::MissingClass { partition: "test", class: 0 })));
        assert!(split(&WindowedDataset::empty(Modality::Ecg, 2), &SplitSpec::new(0)).is_err());
        let bad = SplitSpec {
            train_fraction: 1.0,
            seed: 0,
        };
        assert!(split(&dataset(5), &bad).is_err());
    }

    #[test]
    fn normalize_uses_train_stats() {
        let train = dataset(30);
        let mut test = dataset(9);
        for w in &mut test.windows {
            w.samples.iter_mut().for_each(|v| *v = *v * 10.0 + 100.0);
        }
        let n = normalize(&train, &test).unwrap();
        let (m, s) = compute_stats(&n.train);
        assert!(m.abs() < 1e-6 && (s - 1.0).abs() < 1e-6);
        let (tm, _) = compute_stats(&n.test);
        assert!(tm > 1.0, "test should stay off-center under train stats, got {tm}");
        assert_eq!(n.test.windows[0].samples[0], (100.0 - n.stats.mean) / n.stats.std);
    }

    #[test]
    fn constant_train_passes_through() {
        let mut train = dataset(6);
        for w in &mut train.windows {
            w.samples = vec![4.0, 4.0];
        }
        let n = normalize(&train, &train.clone()).unwrap();
        assert!(!n.stats.scaled);
        assert_eq!(n.train.windows, train.windows);
        assert!(matches!(n.warnings[0], DataWarning::DegenerateStd { .. }));
    }

    #[test]
    fn synth_balance_determinism_and_duplicates() {
        let spec = SynthSpec::new(Modality::Ecg, 0, 5);
        let a = synth_dataset(&spec).unwrap();
        assert_eq!(a.class_counts(), [200, 200, 200]);
        assert_eq!(a, synth_dataset(&spec).unwrap());
        let mut dup = spec.clone();
        dup.classes[1] = dup.classes[0];
        assert!(matches!(synth_dataset(&dup), Err(DataError::Config(_))));
    }

    #[test]
    fn noiseless_synth_has_class_frequency() {
        let spec = SynthSpec {
            noise_std: 0.0,
            n_windows: 30,
            ..SynthSpec::new(Modality::Ecg, 0, 1)
        };
        let ds = synth_dataset(&spec).unwrap();
        for w in &ds.windows {
            let f = spec.classes[w.label].frequency;
            // project onto sin/cos at the class frequency: energy must equal amplitude²/2 · N/2 · 2
            let n = w.samples.len() as f64;
            let (mut s, mut c) = (0.0, 0.0);
            for (j, v) in w.samples.iter().enumerate() {
                let arg = std::f64::consts::TAU * f * j as f64 / spec.sample_rate;
                s += v * arg.sin();
                c += v * arg.cos();
            }
            let amp = 2.0 * (s * s + c * c).sqrt() / n;
            assert!((amp - spec.classes[w.label].amplitude).abs() < 1e-9);
        }
    }

    #[test]
    fn stream_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let s = SignalStream::new("S3", Modality::AccC2, 700.0, vec![0.1, -2.5e-7, 1234.5678, 1.0 / 3.0], vec![0, 1, 2, 7]).unwrap();
        let path = dir.path().join(s.file_name());
        s.write(&path).unwrap();
        assert_eq!(SignalStream::read(&path).unwrap(), s);

        let text = "subject,modality,sample_rate\nS4,temp,700\nsample_value,raw_label\n1.5,1\n2.5,2\n";
        let p2 = dir.path().join("other.csv");
        fs::write(&p2, text).unwrap();
        let r = SignalStream::read(&p2).unwrap();
        assert_eq!(r.modality, Modality::Temp);
        assert_eq!(r.labels, vec![1, 2]);
        assert_eq!(load_streams(dir.path(), Some(Modality::Temp)).unwrap().len(), 1);
    }

    #[test]
    fn malformed_stream_reports_line() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.csv");
        fs::write(&p, "S1,EDA,700\n1.0,1\nabc,2\n").unwrap();
        let err = SignalStream::read(&p).unwrap_err().to_string();
        assert!(err.contains(":3:"), "{err}");
        fs::write(&p, "S1,XYZ,700\n").unwrap();
        assert!(SignalStream::read(&p).is_err());
    }

    #[test]
    fn synth_stream_reingests_exactly() {
        let spec = SynthSpec {
            n_windows: 12,
            ..SynthSpec::new(Modality::Resp, 1, 2)
        };
        let ds = synth_dataset(&spec).unwrap();
        let stream = ds.to_stream("SYN", spec.sample_rate).unwrap();
        let (back, _) = window_stream(&stream, spec.window_len, spec.window_len).unwrap();
        assert_eq!(back.windows, ds.windows);
    }
}
