//! Run configuration: built-in defaults, then a TOML file with flat dotted
//! keys (`train.epochs = 50`), then command-line overrides.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{Modality, SplitSpec, TRAIN_FRACTION};
use crate::model::{default_patch_len, ModelConfig};
use crate::train::TrainConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot parse config: {0}")]
    Parse(String),
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("config key `{key}`: expected {expected}")]
    Type { key: String, expected: &'static str },
    #[error("config key `{key}`: {constraint}, got {got}")]
    Constraint { key: String, constraint: String, got: String },
}

pub type Result<T> = std::result::Result<T, ConfigError>;

/// Architecture settings shared by every modality; `patch_len = None`
/// derives the patch length from each modality's window length.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSection {
    pub patch_len: Option<usize>,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_blocks: usize,
    pub ff_dim: usize,
    pub dropout_rate: f64,
    pub positional_encoding: bool,
    pub layer_norm_eps: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataSection {
    pub window_len: usize,
    /// `None` means non-overlapping windows.
    pub stride: Option<usize>,
    pub train_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSection {
    pub modalities: Vec<Modality>,
    pub n_windows: usize,
    pub window_len: usize,
    pub sample_rate: f64,
    pub noise_std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelSection,
    pub train: TrainConfig,
    pub data: DataSection,
    pub synth: SynthSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        let m = ModelConfig::default();
        let t = TrainConfig::default();
        Self {
            seed: t.seed,
            model: ModelSection {
                patch_len: None,
                d_model: m.d_model,
                n_heads: m.n_heads,
                n_blocks: m.n_blocks,
                ff_dim: m.ff_dim,
                dropout_rate: m.dropout_rate,
                positional_encoding: m.positional_encoding,
                layer_norm_eps: m.layer_norm_eps,
            },
            train: t,
            data: DataSection {
                window_len: 700,
                stride: None,
                train_fraction: TRAIN_FRACTION,
            },
            synth: SynthSection {
                modalities: vec![Modality::Ecg, Modality::Eda],
                n_windows: 600,
                window_len: 256,
                sample_rate: 256.0,
                noise_std: 0.3,
            },
        }
    }
}

/// Command-line values that take precedence over the file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub window_len: Option<usize>,
    pub patch_len: Option<usize>,
}

fn flatten(prefix: &str, table: &toml::Table, out: &mut BTreeMap<String, toml::Value>) {
    for (k, v) in table {
        let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match v {
            toml::Value::Table(t) => flatten(&key, t, out),
            other => {
                out.insert(key, other.clone());
            }
        }
    }
}

fn int(key: &str, v: &toml::Value, min: i64) -> Result<i64> {
    let n = v.as_integer().ok_or_else(|| ConfigError::Type {
        key: key.into(),
        expected: "an integer",
    })?;
    if n < min {
        return Err(ConfigError::Constraint {
            key: key.into(),
            constraint: format!("must be >= {min}"),
            got: n.to_string(),
        });
    }
    Ok(n)
}

fn count(key: &str, v: &toml::Value) -> Result<usize> {
    Ok(int(key, v, 1)? as usize)
}

fn float(key: &str, v: &toml::Value) -> Result<f64> {
    match v {
        toml::Value::Float(f) => Ok(*f),
        toml::Value::Integer(i) => Ok(*i as f64),
        _ => Err(ConfigError::Type {
            key: key.into(),
            expected: "a number",
        }),
    }
}

fn float_where(key: &str, v: &toml::Value, ok: impl Fn(f64) -> bool, constraint: &str) -> Result<f64> {
    let x = float(key, v)?;
    if !(x.is_finite() && ok(x)) {
        return Err(ConfigError::Constraint {
            key: key.into(),
            constraint: constraint.into(),
            got: x.to_string(),
        });
    }
    Ok(x)
}

fn unit_open(x: f64) -> bool {
    (0.0..1.0).contains(&x)
}

impl RunConfig {
    /// Applies `text` on top of the defaults.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let table: toml::Table = text.parse().map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;
        let mut flat = BTreeMap::new();
        flatten("", &table, &mut flat);
        let mut c = Self::default();
        for (key, v) in &flat {
            let k = key.as_str();
            match k {
                "seed" => c.seed = int(k, v, 0)? as u64,
                "model.patch_len" => c.model.patch_len = Some(count(k, v)?),
                "model.d_model" => c.model.d_model = count(k, v)?,
                "model.n_heads" => c.model.n_heads = count(k, v)?,
                "model.n_blocks" => c.model.n_blocks = count(k, v)?,
                "model.ff_dim" => c.model.ff_dim = count(k, v)?,
                "model.dropout_rate" => c.model.dropout_rate = float_where(k, v, unit_open, "must lie in [0, 1)")?,
                "model.positional_encoding" => {
                    c.model.positional_encoding = v.as_bool().ok_or_else(|| ConfigError::Type {
                        key: key.clone(),
                        expected: "a boolean",
                    })?
                }
                "model.layer_norm_eps" => c.model.layer_norm_eps = float_where(k, v, |x| x > 0.0, "must be > 0")?,
                "train.learning_rate" => c.train.learning_rate = float_where(k, v, |x| x > 0.0, "must be > 0")?,
                "train.epochs" => c.train.epochs = count(k, v)?,
                "train.batch_size" => c.train.batch_size = count(k, v)?,
                "train.beta1" => c.train.beta1 = float_where(k, v, unit_open, "must lie in [0, 1)")?,
                "train.beta2" => c.train.beta2 = float_where(k, v, unit_open, "must lie in [0, 1)")?,
                "train.eps" => c.train.eps = float_where(k, v, |x| x > 0.0, "must be > 0")?,
                "data.window_len" => c.data.window_len = count(k, v)?,
                "data.stride" => c.data.stride = Some(count(k, v)?),
                "data.train_fraction" => {
                    c.data.train_fraction = float_where(k, v, |x| x > 0.0 && x < 1.0, "must lie in (0, 1)")?
                }
                "synth.n_windows" => c.synth.n_windows = count(k, v)?,
                "synth.window_len" => c.synth.window_len = count(k, v)?,
                "synth.sample_rate" => c.synth.sample_rate = float_where(k, v, |x| x > 0.0, "must be > 0")?,
                "synth.noise_std" => c.synth.noise_std = float_where(k, v, |x| x >= 0.0, "must be >= 0")?,
                "synth.modalities" => c.synth.modalities = modality_list(k, v)?,
                _ => return Err(ConfigError::UnknownKey(key.clone())),
            }
        }
        c.train.seed = c.seed;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_toml_str(&text)
    }

    /// Defaults, then the optional file, then the overrides.
    pub fn resolve(path: Option<&Path>, overrides: &Overrides) -> Result<Self> {
        let mut c = match path {
            Some(p) => Self::load(p)?,
            None => Self::default(),
        };
        if let Some(seed) = overrides.seed {
            c.seed = seed;
        }
        if let Some(w) = overrides.window_len {
            c.data.window_len = w;
            c.synth.window_len = w;
        }
        if let Some(p) = overrides.patch_len {
            c.model.patch_len = Some(p);
        }
        c.train.seed = c.seed;
        c.validate()?;
        Ok(c)
    }

    fn validate(&self) -> Result<()> {
        for (key, w) in [("data.window_len", self.data.window_len), ("synth.window_len", self.synth.window_len)] {
            if w == 0 {
                return Err(ConfigError::Constraint {
                    key: key.into(),
                    constraint: "must be >= 1".into(),
                    got: "0".into(),
                });
            }
        }
        if !self.model.d_model.is_multiple_of(self.model.n_heads) {
            return Err(ConfigError::Constraint {
                key: "model.d_model".into(),
                constraint: format!("must be divisible by model.n_heads = {}", self.model.n_heads),
                got: self.model.d_model.to_string(),
            });
        }
        if self.synth.modalities.is_empty() {
            return Err(ConfigError::Constraint {
                key: "synth.modalities".into(),
                constraint: "must list at least one modality".into(),
                got: "[]".into(),
            });
        }
        Ok(())
    }

    /// Model architecture for datasets with `window_len` samples per window.
    pub fn model_config(&self, window_len: usize) -> ModelConfig {
        let m = &self.model;
        ModelConfig {
            window_len,
            patch_len: m.patch_len.unwrap_or_else(|| default_patch_len(window_len)),
            d_model: m.d_model,
            n_heads: m.n_heads,
            n_blocks: m.n_blocks,
            ff_dim: m.ff_dim,
            dropout_rate: m.dropout_rate,
            positional_encoding: m.positional_encoding,
            layer_norm_eps: m.layer_norm_eps,
            ..ModelConfig::for_window(window_len)
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            ..self.train.clone()
        }
    }

    pub fn split_spec(&self) -> SplitSpec {
        SplitSpec {
            train_fraction: self.data.train_fraction,
            ..SplitSpec::new(self.seed)
        }
    }

    pub fn stride(&self) -> usize {
        self.data.stride.unwrap_or(self.data.window_len)
    }
}

fn modality_list(key: &str, v: &toml::Value) -> Result<Vec<Modality>> {
    let bad = || ConfigError::Type {
        key: key.into(),
        expected: "an array of modality names",
    };
    let arr = v.as_array().ok_or_else(bad)?;
    let mut out = Vec::new();
    for item in arr {
        let name = item.as_str().ok_or_else(bad)?;
        let m: Modality = name.parse().map_err(|_| ConfigError::Constraint {
            key: key.into(),
            constraint: "must name known modalities".into(),
            got: name.into(),
        })?;
        if !out.contains(&m) {
            out.push(m);
        }
    }
    Ok(out)
}
