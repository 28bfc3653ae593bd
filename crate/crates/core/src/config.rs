//! Flat run configuration shared by every pipeline stage.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::mamba::TrajMambaConfig;
use crate::pretrain::PretrainConfig;
use crate::tasks::{HeadTraining, Mode, SimSearchSetup, Task};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

/// Every knob of a run. Keys missing from a config file take their default;
/// unknown keys are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub num_traj: usize,
    pub city_width: usize,
    pub city_height: usize,

    /// Generated and preprocessed data files.
    pub data_dir: PathBuf,
    /// Pre-training checkpoint directory.
    pub checkpoint_dir: PathBuf,
    /// Loss curves, embeddings, reports and benchmark tables.
    pub out_dir: PathBuf,
    /// Optional directory of precomputed text vectors; when unset the
    /// environment-configured endpoint is used if present, else the hash stub.
    pub text_table: Option<PathBuf>,
    pub precision: Precision,

    pub embed_dim: usize,
    pub model_dim: usize,
    pub state_dim: usize,
    pub heads: usize,
    pub layers: usize,
    pub fourier_freqs: usize,
    pub conv_width: usize,
    pub scan_chunk: usize,
    pub view_heads: usize,
    pub view_layers: usize,
    pub use_mb: bool,
    pub use_road: bool,
    pub use_poi: bool,

    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,

    pub task: Task,
    pub mode: Mode,
    pub head_lr: f64,
    pub head_batch_size: usize,
    pub head_max_epochs: usize,
    pub patience: usize,
    pub num_queries: usize,
    pub db_size: usize,

    pub bench_lengths: Vec<usize>,
    pub bench_reps: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let p = PretrainConfig::default();
        let e = &p.encoder;
        let h = HeadTraining::default();
        let s = SimSearchSetup::default();
        Self {
            seed: 42,
            num_traj: 2000,
            city_width: 40,
            city_height: 40,
            data_dir: PathBuf::from("run/data"),
            checkpoint_dir: PathBuf::from("run/checkpoint"),
            out_dir: PathBuf::from("run/out"),
            text_table: None,
            precision: Precision::F32,
            embed_dim: e.embed_dim,
            model_dim: e.model_dim,
            state_dim: e.state_dim,
            heads: e.heads,
            layers: e.layers,
            fourier_freqs: e.fourier_freqs,
            conv_width: e.conv_width,
            scan_chunk: e.scan_chunk,
            view_heads: p.view_heads,
            view_layers: p.view_layers,
            use_mb: e.use_mb,
            use_road: p.use_road,
            use_poi: p.use_poi,
            batch_size: p.batch_size,
            epochs: p.epochs,
            lr: p.lr,
            task: Task::Destination,
            mode: Mode::Frozen,
            head_lr: h.lr,
            head_batch_size: h.batch_size,
            head_max_epochs: h.max_epochs,
            patience: h.patience,
            num_queries: s.num_queries,
            db_size: s.db_size,
            bench_lengths: vec![512, 1024, 2048],
            bench_reps: 5,
        }
    }
}

const LOCATION_KEYS: [&str; 3] = ["data_dir", "checkpoint_dir", "out_dir"];

/// Splits `key=value`; the value is read as JSON when it parses and as a
/// plain string otherwise.
pub fn parse_override(s: &str) -> Result<(String, Value)> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{s}` is not of the form key=value")))?;
    let key = k.trim();
    if key.is_empty() {
        return Err(Error::Config(format!("override `{s}` has an empty key")));
    }
    let value = serde_json::from_str(v).unwrap_or_else(|_| Value::String(v.to_string()));
    Ok((key.to_string(), value))
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::tensor::checkpoint::write_atomic(path, &serde_json::to_vec_pretty(self)?)
    }

    /// Optional file, then `key=value` overrides in order.
    pub fn resolve(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let base = match path {
            Some(p) => Self::load(p)?,
            None => Self::default(),
        };
        base.with_overrides(overrides)
    }

    pub fn with_overrides(&self, overrides: &[String]) -> Result<Self> {
        let mut doc = serde_json::to_value(self)?;
        let map = doc.as_object_mut().expect("config serializes to an object");
        for o in overrides {
            let (k, v) = parse_override(o)?;
            if !map.contains_key(&k) {
                return Err(Error::Config(format!("unknown config key `{k}`")));
            }
            map.insert(k, v);
        }
        let cfg: Self = serde_json::from_value(doc).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_traj == 0 {
            return Err(Error::Config("num_traj must be at least 1".into()));
        }
        if self.bench_reps == 0 || self.bench_lengths.is_empty() || self.bench_lengths.contains(&0) {
            return Err(Error::Config("bench needs positive lengths and at least one rep".into()));
        }
        if self.head_batch_size == 0 || self.head_max_epochs == 0 || !(self.head_lr > 0.0) {
            return Err(Error::Config("head training needs positive batch size, epochs and lr".into()));
        }
        self.pretrain().validate()
    }

    /// Sha-256 of the JSON form with object keys in sorted order. The output
    /// locations are left out so a run hashes the same wherever it is stored.
    pub fn hash(&self) -> String {
        let mut doc = serde_json::to_value(self).expect("config serializes");
        let map = doc.as_object_mut().expect("config serializes to an object");
        for key in LOCATION_KEYS {
            map.remove(key);
        }
        let canonical = doc.to_string();
        let digest = Sha256::digest(canonical.as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn encoder(&self) -> TrajMambaConfig {
        TrajMambaConfig {
            embed_dim: self.embed_dim,
            model_dim: self.model_dim,
            state_dim: self.state_dim,
            heads: self.heads,
            layers: self.layers,
            fourier_freqs: self.fourier_freqs,
            conv_width: self.conv_width,
            use_mb: self.use_mb,
            scan_chunk: self.scan_chunk,
        }
    }

    pub fn pretrain(&self) -> PretrainConfig {
        PretrainConfig {
            batch_size: self.batch_size,
            epochs: self.epochs,
            lr: self.lr,
            seed: self.seed,
            use_road: self.use_road,
            use_poi: self.use_poi,
            view_heads: self.view_heads,
            view_layers: self.view_layers,
            encoder: self.encoder(),
        }
    }

    pub fn head_training(&self) -> HeadTraining {
        HeadTraining {
            lr: self.head_lr,
            batch_size: self.head_batch_size,
            max_epochs: self.head_max_epochs,
            patience: self.patience,
            seed: self.seed,
        }
    }

    pub fn simsearch(&self) -> SimSearchSetup {
        SimSearchSetup {
            num_queries: self.num_queries,
            db_size: self.db_size,
            seed: self.seed,
        }
    }
}
