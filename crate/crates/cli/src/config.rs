//! Run configuration: defaults, `key = value` files, flag overrides and a
//! stable hash of everything that influences results.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use genhmm::nn::AdamConfig;
use genhmm::{FlowConfig, GmmTrainConfig, NoiseKind, TrainConfig};
use sha2::{Digest, Sha256};

use crate::error::CliError;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModelType {
    GenHmm,
    GmmHmm,
}

impl ModelType {
    pub fn name(self) -> &'static str {
        match self {
            ModelType::GenHmm => "genhmm",
            ModelType::GmmHmm => "gmmhmm",
        }
    }
}

impl FromStr for ModelType {
    type Err = CliError;

    fn from_str(s: &str) -> Result<Self, CliError> {
        match s {
            "genhmm" => Ok(ModelType::GenHmm),
            "gmmhmm" => Ok(ModelType::GmmHmm),
            other => Err(CliError::Config(format!("unknown model type {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelType,
    /// Mixture components per state.
    pub k: usize,
    pub blocks: usize,
    pub hidden: usize,
    /// Dense layers per coupling network.
    pub net_layers: usize,
    /// Fixed state count; `None` derives it from the mean sequence length.
    pub states: Option<usize>,
    pub frames_per_state: f64,
    pub lr: f64,
    /// Sequences per gradient batch; 0 uses the whole class.
    pub batch_size: usize,
    pub inner_batches: usize,
    pub max_em: usize,
    pub tol: f64,
    pub seed: u64,
    /// Undo generator steps that lower the EM objective.
    pub guard: bool,
    pub standardize: bool,
    /// Test-time perturbation.
    pub noise: Option<NoiseKind>,
    pub snr_db: f64,
    /// Score sequences by log-likelihood per frame instead of the total.
    pub per_frame: bool,
    /// Worker threads; 0 lets the pool decide.
    pub threads: usize,
    pub data: Option<PathBuf>,
    pub test: Option<PathBuf>,
    pub models: Option<PathBuf>,
    pub out: Option<PathBuf>,
    /// Synthetic benchmark dataset.
    pub preset: Option<String>,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub min_len: usize,
    pub max_len: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelType::GenHmm,
            k: 3,
            blocks: 4,
            hidden: 24,
            net_layers: 3,
            states: None,
            frames_per_state: 3.0,
            lr: 1e-3,
            batch_size: 32,
            inner_batches: 8,
            max_em: 50,
            tol: 1e-4,
            seed: 0,
            guard: true,
            standardize: true,
            noise: None,
            snr_db: f64::INFINITY,
            per_frame: false,
            threads: 0,
            data: None,
            test: None,
            models: None,
            out: None,
            preset: None,
            train_per_class: 100,
            test_per_class: 50,
            min_len: 8,
            max_len: 16,
        }
    }
}

/// Keys in canonical order.
pub const KEYS: &[&str] = &[
    "model",
    "k",
    "blocks",
    "hidden",
    "net-layers",
    "states",
    "frames-per-state",
    "lr",
    "batch-size",
    "inner-batches",
    "max-em",
    "tol",
    "seed",
    "guard",
    "standardize",
    "noise",
    "snr-db",
    "per-frame",
    "threads",
    "data",
    "test",
    "models",
    "out",
    "preset",
    "train-per-class",
    "test-per-class",
    "min-len",
    "max-len",
];

/// Keys that never change what a run computes.
const NOT_HASHED: &[&str] = &["threads", "out", "models"];

/// Keys that only matter at evaluation time.
const EVAL_ONLY: &[&str] = &["noise", "snr-db", "per-frame", "test", "test-per-class"];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, CliError> {
    value
        .parse()
        .map_err(|_| CliError::Config(format!("{key}: cannot parse {value:?}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool, CliError> {
    match value {
        "true" | "yes" | "on" | "1" => Ok(true),
        "false" | "no" | "off" | "0" => Ok(false),
        _ => Err(CliError::Config(format!("{key}: expected a boolean, got {value:?}"))),
    }
}

fn opt_path(value: &str) -> Option<PathBuf> {
    (!value.is_empty() && value != "none").then(|| PathBuf::from(value))
}

fn show_path(p: &Option<PathBuf>) -> String {
    p.as_ref().map_or_else(|| "none".into(), |p| p.display().to_string())
}

impl RunConfig {
    /// Sets one field from its textual form. Underscores in `key` are
    /// accepted in place of dashes.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), CliError> {
        let key = key.trim().replace('_', "-");
        let value = value.trim();
        let k = key.as_str();
        match k {
            "model" => self.model = value.parse()?,
            "k" => self.k = parse(k, value)?,
            "blocks" => self.blocks = parse(k, value)?,
            "hidden" => self.hidden = parse(k, value)?,
            "net-layers" => self.net_layers = parse(k, value)?,
            "states" => {
                self.states = match value {
                    "auto" | "0" => None,
                    v => Some(parse(k, v)?),
                }
            }
            "frames-per-state" => self.frames_per_state = parse(k, value)?,
            "lr" => self.lr = parse(k, value)?,
            "batch-size" => self.batch_size = parse(k, value)?,
            "inner-batches" => self.inner_batches = parse(k, value)?,
            "max-em" => self.max_em = parse(k, value)?,
            "tol" => self.tol = parse(k, value)?,
            "seed" => self.seed = parse(k, value)?,
            "guard" => self.guard = parse_bool(k, value)?,
            "standardize" => self.standardize = parse_bool(k, value)?,
            "noise" => {
                self.noise = match value {
                    "none" | "" => None,
                    v => Some(v.parse().map_err(|e: genhmm::Error| CliError::Config(e.to_string()))?),
                }
            }
            "snr-db" => {
                self.snr_db = match value {
                    "inf" | "clean" => f64::INFINITY,
                    v => parse(k, v)?,
                }
            }
            "per-frame" => self.per_frame = parse_bool(k, value)?,
            "threads" => self.threads = parse(k, value)?,
            "data" => self.data = opt_path(value),
            "test" => self.test = opt_path(value),
            "models" => self.models = opt_path(value),
            "out" => self.out = opt_path(value),
            "preset" => self.preset = (!value.is_empty() && value != "none").then(|| value.to_string()),
            "train-per-class" => self.train_per_class = parse(k, value)?,
            "test-per-class" => self.test_per_class = parse(k, value)?,
            "min-len" => self.min_len = parse(k, value)?,
            "max-len" => self.max_len = parse(k, value)?,
            other => return Err(CliError::Config(format!("unknown configuration key {other:?}"))),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> String {
        match key {
            "model" => self.model.name().into(),
            "k" => self.k.to_string(),
            "blocks" => self.blocks.to_string(),
            "hidden" => self.hidden.to_string(),
            "net-layers" => self.net_layers.to_string(),
            "states" => self.states.map_or_else(|| "auto".into(), |s| s.to_string()),
            "frames-per-state" => self.frames_per_state.to_string(),
            "lr" => self.lr.to_string(),
            "batch-size" => self.batch_size.to_string(),
            "inner-batches" => self.inner_batches.to_string(),
            "max-em" => self.max_em.to_string(),
            "tol" => self.tol.to_string(),
            "seed" => self.seed.to_string(),
            "guard" => self.guard.to_string(),
            "standardize" => self.standardize.to_string(),
            "noise" => match self.noise {
                None => "none".into(),
                Some(NoiseKind::White) => "white".into(),
                Some(NoiseKind::Pink) => "pink".into(),
            },
            "snr-db" => {
                if self.snr_db == f64::INFINITY {
                    "inf".into()
                } else {
                    self.snr_db.to_string()
                }
            }
            "per-frame" => self.per_frame.to_string(),
            "threads" => self.threads.to_string(),
            "data" => show_path(&self.data),
            "test" => show_path(&self.test),
            "models" => show_path(&self.models),
            "out" => show_path(&self.out),
            "preset" => self.preset.clone().unwrap_or_else(|| "none".into()),
            "train-per-class" => self.train_per_class.to_string(),
            "test-per-class" => self.test_per_class.to_string(),
            "min-len" => self.min_len.to_string(),
            "max-len" => self.max_len.to_string(),
            other => panic!("unknown configuration key {other:?}"),
        }
    }

    /// Applies a `key = value` document. `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<(), CliError> {
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| CliError::Config(format!("config line {}: expected key = value", i + 1)))?;
            self.set(key, value)
                .map_err(|e| CliError::Config(format!("config line {}: {e}", i + 1)))?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<(), CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        self.apply_text(&text)
    }

    /// Every field as `key = value`, one per line, in canonical order.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for key in KEYS {
            writeln!(out, "{key} = {}", self.get(key)).unwrap();
        }
        out
    }

    fn digest(&self, skip: &[&str]) -> String {
        let mut h = Sha256::new();
        for key in KEYS.iter().filter(|k| !skip.contains(k)) {
            h.update(format!("{key} = {}\n", self.get(key)).as_bytes());
        }
        h.finalize()[..8].iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Hash of every result-affecting field.
    pub fn hash(&self) -> String {
        self.digest(NOT_HASHED)
    }

    /// Hash of the fields that affect training only.
    pub fn training_hash(&self) -> String {
        let skip: Vec<&str> = NOT_HASHED.iter().chain(EVAL_ONLY).copied().collect();
        self.digest(&skip)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let positive = [
            ("k", self.k),
            ("blocks", self.blocks),
            ("hidden", self.hidden),
            ("net-layers", self.net_layers),
            ("inner-batches", self.inner_batches),
            ("max-em", self.max_em),
            ("train-per-class", self.train_per_class),
            ("test-per-class", self.test_per_class),
            ("min-len", self.min_len),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(CliError::Config(format!("{name} must be positive")));
            }
        }
        if self.states == Some(0) {
            return Err(CliError::Config("states must be positive".into()));
        }
        for (name, v) in [("frames-per-state", self.frames_per_state), ("lr", self.lr), ("tol", self.tol)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(CliError::Config(format!("{name} must be a positive number")));
            }
        }
        if self.snr_db.is_nan() || self.snr_db == f64::NEG_INFINITY {
            return Err(CliError::Config("snr-db must be a number or inf".into()));
        }
        if self.min_len > self.max_len {
            return Err(CliError::Config("min-len exceeds max-len".into()));
        }
        Ok(())
    }

    pub fn flow(&self) -> FlowConfig {
        FlowConfig {
            blocks: self.blocks,
            hidden: self.hidden,
            net_layers: self.net_layers,
            ..FlowConfig::default()
        }
    }

    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            adam: AdamConfig {
                learning_rate: self.lr,
                ..AdamConfig::default()
            },
            batch_size: self.batch_size,
            inner_batches: self.inner_batches,
            max_iterations: self.max_em,
            tolerance: self.tol,
            seed,
            guard_generator_step: self.guard,
            ..TrainConfig::default()
        }
    }

    pub fn gmm_config(&self, seed: u64) -> GmmTrainConfig {
        GmmTrainConfig {
            max_iterations: self.max_em,
            tolerance: self.tol,
            seed,
        }
    }
}

/// Seed for one named stream, derived from the root seed by hashing.
pub fn derive_seed(root: u64, name: &str) -> u64 {
    let digest = Sha256::new()
        .chain_update(root.to_le_bytes())
        .chain_update(name.as_bytes())
        .finalize();
    u64::from_le_bytes(digest[..8].try_into().unwrap())
}
