//! Run configuration as line-oriented `section.key=value` text.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::blocks::Activation;
use crate::error::{Error, Result};
use crate::model::{CrossKind, ModelConfig, SelfKind, Variant};
use crate::pipeline::{SynthSpec, TrainConfig, DEFAULT_SPLIT};
use crate::spectral::ModeKind;

pub const DEFAULT_SYNTH: &str = "sin(0.02,1,0)+sin(0.07,0.6,1)+sin(0.15,0.4,2)+trend(0.002)+noise(0.1)";

/// Where the series comes from.
#[derive(Clone, Debug, PartialEq)]
pub enum DataSource {
    Csv(PathBuf),
    Synth { spec: SynthSpec, len: usize },
}

/// Everything a command needs. The `seed` fields inside `model` and `train`
/// are not serialized; [`RunConfig::for_seed`] fills them from `seeds`.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataSource,
    pub split: [f64; 3],
    pub out: PathBuf,
    pub seeds: Vec<u64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            data: DataSource::Synth { spec: DEFAULT_SYNTH.parse().expect("default spec parses"), len: 2000 },
            split: DEFAULT_SPLIT,
            out: PathBuf::from("runs"),
            seeds: vec![0],
        }
    }
}

fn list<T: ToString>(v: &[T]) -> String {
    v.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

fn parse_list<T: std::str::FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    v.split(',')
        .map(|s| s.trim().parse().map_err(|_| bad_value(key, v)))
        .collect()
}

fn bad_value(key: &str, v: &str) -> Error {
    Error::Config(format!("invalid value {v:?} for {key}"))
}

fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.trim().parse().map_err(|_| bad_value(key, v))
}

fn word<T: Copy>(key: &str, v: &str, table: &[(&str, T)]) -> Result<T> {
    table
        .iter()
        .find(|(n, _)| *n == v.trim())
        .map(|&(_, t)| t)
        .ok_or_else(|| {
            let names: Vec<&str> = table.iter().map(|(n, _)| *n).collect();
            Error::Config(format!("invalid value {v:?} for {key}; expected one of {}", names.join("|")))
        })
}

fn name_of<T: Copy + PartialEq>(x: T, table: &[(&'static str, T)]) -> &'static str {
    table.iter().find(|(_, t)| *t == x).map(|(n, _)| *n).expect("every variant is named")
}

const VARIANTS: &[(&str, Variant)] = &[("fourier", Variant::Fourier), ("wavelet", Variant::Wavelet)];
const POLICIES: &[(&str, ModeKind)] = &[("fixed", ModeKind::FixedLowest), ("random", ModeKind::RandomUniform)];
const ACTIVATIONS: &[(&str, Activation)] = &[("softmax", Activation::Softmax), ("tanh", Activation::Tanh)];
const SELF_KINDS: &[(&str, SelfKind)] =
    &[("feb", SelfKind::Feb), ("fea", SelfKind::Fea), ("attention", SelfKind::Attention)];
const CROSS_KINDS: &[(&str, CrossKind)] = &[("fea", CrossKind::Fea), ("attention", CrossKind::Attention)];
const BOOLS: &[(&str, bool)] = &[("true", true), ("false", false)];

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Parses `key=value` lines over the defaults. Blank lines and lines
    /// starting with `#` are skipped.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value, got {line:?}", i + 1)))?;
            cfg.set(k.trim(), v.trim())?;
        }
        Ok(cfg)
    }

    /// Applies `key=value` overrides in order.
    pub fn apply_overrides(&mut self, overrides: &[String]) -> Result<()> {
        for o in overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override {o:?} is not key=value")))?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let m = &mut self.model;
        let t = &mut self.train;
        match key {
            "model.input_len" => m.input_len = num(key, v)?,
            "model.pred_len" => m.pred_len = num(key, v)?,
            "model.raw_dim" => m.raw_dim = num(key, v)?,
            "model.model_dim" => m.model_dim = num(key, v)?,
            "model.modes" => m.modes = num(key, v)?,
            "model.encoder_layers" => m.encoder_layers = num(key, v)?,
            "model.decoder_layers" => m.decoder_layers = num(key, v)?,
            "model.moe_kernels" => m.moe_kernels = parse_list(key, v)?,
            "model.variant" => m.variant = word(key, v, VARIANTS)?,
            "model.wavelet_k" => m.wavelet_k = num(key, v)?,
            "model.wavelet_depth" => m.wavelet_depth = num(key, v)?,
            "model.policy" => m.policy = word(key, v, POLICIES)?,
            "model.include_dc" => m.include_dc = word(key, v, BOOLS)?,
            "model.activation" => m.activation = word(key, v, ACTIVATIONS)?,
            "model.self_block" => m.self_block = word(key, v, SELF_KINDS)?,
            "model.cross_block" => m.cross_block = word(key, v, CROSS_KINDS)?,
            "train.learning_rate" => t.learning_rate = num(key, v)?,
            "train.batch_size" => t.batch_size = num(key, v)?,
            "train.patience" => t.patience = num(key, v)?,
            "train.max_epochs" => t.max_epochs = num(key, v)?,
            "train.beta1" => t.beta1 = num(key, v)?,
            "train.beta2" => t.beta2 = num(key, v)?,
            "train.eps" => t.eps = num(key, v)?,
            "train.max_batches" => t.max_batches = num(key, v)?,
            "train.record_timing" => t.record_timing = word(key, v, BOOLS)?,
            "data.csv" => {
                self.data = if v.is_empty() {
                    DataSource::Synth { spec: DEFAULT_SYNTH.parse()?, len: 2000 }
                } else {
                    DataSource::Csv(PathBuf::from(v))
                }
            }
            "data.synth" | "data.len" => {
                let (mut spec, mut len) = match &self.data {
                    DataSource::Synth { spec, len } => (spec.clone(), *len),
                    DataSource::Csv(_) => (DEFAULT_SYNTH.parse()?, 2000),
                };
                if key == "data.synth" {
                    spec = v.parse()?;
                } else {
                    len = num(key, v)?;
                }
                self.data = DataSource::Synth { spec, len };
            }
            "data.split" => {
                let r: Vec<f64> = parse_list(key, v)?;
                self.split = r.try_into().map_err(|_| bad_value(key, v))?;
            }
            "out" => self.out = PathBuf::from(v),
            "seeds" => self.seeds = parse_list(key, v)?,
            _ => return Err(Error::Config(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds must list at least one seed".into()));
        }
        if self.split.iter().any(|r| !(*r >= 0.0)) || (self.split.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("data.split must be non-negative and sum to 1, got {:?}", self.split)));
        }
        if let DataSource::Synth { spec, .. } = &self.data {
            if spec.features.len() != self.model.raw_dim {
                return Err(Error::Config(format!(
                    "data.synth has {} features but model.raw_dim is {}",
                    spec.features.len(),
                    self.model.raw_dim
                )));
            }
        }
        Ok(())
    }

    /// Model and training configs for one seed.
    pub fn for_seed(&self, seed: u64) -> (ModelConfig, TrainConfig) {
        (ModelConfig { seed, ..self.model.clone() }, TrainConfig { seed, ..self.train.clone() })
    }

    /// The same run restricted to one seed.
    pub fn single(&self, seed: u64) -> Self {
        Self { seeds: vec![seed], ..self.clone() }
    }

    pub fn to_text(&self) -> String {
        let m = &self.model;
        let t = &self.train;
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k}={v}");
        };
        kv("model.input_len", m.input_len.to_string());
        kv("model.pred_len", m.pred_len.to_string());
        kv("model.raw_dim", m.raw_dim.to_string());
        kv("model.model_dim", m.model_dim.to_string());
        kv("model.modes", m.modes.to_string());
        kv("model.encoder_layers", m.encoder_layers.to_string());
        kv("model.decoder_layers", m.decoder_layers.to_string());
        kv("model.moe_kernels", list(&m.moe_kernels));
        kv("model.variant", name_of(m.variant, VARIANTS).into());
        kv("model.wavelet_k", m.wavelet_k.to_string());
        kv("model.wavelet_depth", m.wavelet_depth.to_string());
        kv("model.policy", name_of(m.policy, POLICIES).into());
        kv("model.include_dc", m.include_dc.to_string());
        kv("model.activation", name_of(m.activation, ACTIVATIONS).into());
        kv("model.self_block", name_of(m.self_block, SELF_KINDS).into());
        kv("model.cross_block", name_of(m.cross_block, CROSS_KINDS).into());
        kv("train.learning_rate", t.learning_rate.to_string());
        kv("train.batch_size", t.batch_size.to_string());
        kv("train.patience", t.patience.to_string());
        kv("train.max_epochs", t.max_epochs.to_string());
        kv("train.beta1", t.beta1.to_string());
        kv("train.beta2", t.beta2.to_string());
        kv("train.eps", t.eps.to_string());
        kv("train.max_batches", t.max_batches.to_string());
        kv("train.record_timing", t.record_timing.to_string());
        match &self.data {
            DataSource::Csv(p) => kv("data.csv", p.display().to_string()),
            DataSource::Synth { spec, len } => {
                kv("data.synth", spec.to_string());
                kv("data.len", len.to_string());
            }
        }
        kv("data.split", list(&self.split));
        kv("out", self.out.display().to_string());
        kv("seeds", list(&self.seeds));
        s
    }
}
