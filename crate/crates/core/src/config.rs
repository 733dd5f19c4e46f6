//! Flat run configuration. Every key is optional; unknown keys are errors.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lm::{Architecture, NeuralConfig, Precision, TrainConfig};
use crate::synth::{OodKind, OodParams, SplitCounts, WorkloadConfig};
use crate::trace::DEFAULT_MAX_LEN;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// One of `ngram`, `lstm`, `transformer`, `longformer`.
    pub model: String,
    pub max_len: usize,
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,

    pub alphabet_size: usize,
    pub ood_behaviors: Vec<String>,
    pub latency_scale: f64,
    pub mixture_weight: f64,
    pub length_scale: f64,
    pub train_count: usize,
    pub val_count: usize,
    pub test_count: usize,

    pub d_e: usize,
    pub d: usize,
    pub min_count: usize,

    pub layers: usize,
    pub width: usize,
    pub heads: usize,
    pub window: usize,
    pub globals: usize,
    pub ffn_mult: usize,
    pub ngram_order: usize,
    pub ngram_alpha: f64,

    pub lr: f64,
    pub warmup_steps: usize,
    pub label_smoothing: f64,
    pub dropout: f64,
    pub lr_patience: usize,
    pub stop_patience: usize,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// `standard` or `high-precision-check`.
    pub precision: String,
    pub eval_interval: usize,
    pub max_steps: usize,
    pub grad_clip: f64,

    pub delay_count: usize,
    pub delay_min_ns: f64,
    pub delay_max_ns: f64,
    pub delay_positions: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let nc = NeuralConfig::new(Architecture::Lstm);
        let tc = TrainConfig::default();
        let ood = OodParams::default();
        RunConfig {
            seed: 0,
            model: "lstm".into(),
            max_len: DEFAULT_MAX_LEN,
            data_dir: "data".into(),
            out_dir: "out".into(),
            alphabet_size: 20,
            ood_behaviors: vec!["latency".into(), "mixture".into(), "length".into()],
            latency_scale: ood.latency_scale,
            mixture_weight: ood.mixture_weight,
            length_scale: ood.length_scale,
            train_count: 5000,
            val_count: 300,
            test_count: 300,
            d_e: nc.d_e,
            d: nc.d,
            min_count: nc.min_count,
            layers: nc.layers,
            width: nc.width,
            heads: nc.heads,
            window: nc.window,
            globals: nc.globals,
            ffn_mult: nc.ffn_mult,
            ngram_order: 4,
            ngram_alpha: 0.01,
            lr: tc.lr,
            warmup_steps: tc.warmup_steps,
            label_smoothing: tc.label_smoothing,
            dropout: tc.dropout,
            lr_patience: tc.lr_patience,
            stop_patience: tc.stop_patience,
            batch_size: tc.batch_size,
            max_epochs: tc.max_epochs,
            precision: "standard".into(),
            eval_interval: tc.eval_interval,
            max_steps: tc.max_steps,
            grad_clip: tc.grad_clip,
            delay_count: 100,
            delay_min_ns: 1e3,
            delay_max_ns: 1e6,
            delay_positions: 100,
        }
    }
}

fn key_err(key: &str, message: impl Into<String>) -> Error {
    Error::Config {
        key: key.into(),
        message: message.into(),
    }
}

/// Extracts the offending key from a TOML error message, if any.
fn toml_key(e: &toml::de::Error) -> String {
    let msg = e.message();
    for marker in ["unknown field `", "missing field `"] {
        if let Some(rest) = msg.split(marker).nth(1) {
            if let Some(k) = rest.split('`').next() {
                return k.to_string();
            }
        }
    }
    "<file>".into()
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config {
            key: toml_key(&e),
            message: e.to_string().trim().to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if !matches!(self.model.as_str(), "ngram" | "lstm" | "transformer" | "longformer") {
            return Err(key_err("model", format!("unknown model `{}`", self.model)));
        }
        if self.max_len == 0 {
            return Err(key_err("max_len", "must be at least 1"));
        }
        if !(2..=20).contains(&self.alphabet_size) {
            return Err(key_err("alphabet_size", "must be in 2..=20"));
        }
        self.ood_kinds()?;
        for (key, v) in [("latency_scale", self.latency_scale), ("length_scale", self.length_scale)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(key_err(key, format!("must be positive, got {v}")));
            }
        }
        if !(0.0..=1.0).contains(&self.mixture_weight) {
            return Err(key_err("mixture_weight", "must be in [0, 1]"));
        }
        for (key, v) in [
            ("train_count", self.train_count),
            ("val_count", self.val_count),
            ("test_count", self.test_count),
            ("d_e", self.d_e),
            ("min_count", self.min_count),
            ("layers", self.layers),
            ("width", self.width),
            ("heads", self.heads),
            ("window", self.window),
            ("ffn_mult", self.ffn_mult),
            ("ngram_order", self.ngram_order),
            ("delay_count", self.delay_count),
            ("delay_positions", self.delay_positions),
        ] {
            if v == 0 {
                return Err(key_err(key, "must be at least 1"));
            }
        }
        if self.d == 0 || self.d % 2 != 0 {
            return Err(key_err("d", format!("must be even and positive, got {}", self.d)));
        }
        if self.width % self.heads != 0 {
            return Err(key_err("heads", format!("width {} is not divisible by {}", self.width, self.heads)));
        }
        if !(self.ngram_alpha >= 0.0 && self.ngram_alpha.is_finite()) {
            return Err(key_err("ngram_alpha", "must be finite and >= 0"));
        }
        if !(self.delay_min_ns > 0.0 && self.delay_max_ns >= self.delay_min_ns && self.delay_max_ns.is_finite()) {
            return Err(key_err("delay_max_ns", "need 0 < delay_min_ns <= delay_max_ns"));
        }
        self.precision_mode()?;
        self.train_config().validate()
    }

    pub fn ood_kinds(&self) -> Result<Vec<OodKind>> {
        let mut kinds = Vec::new();
        for name in &self.ood_behaviors {
            let k: OodKind = name.parse().map_err(|e: Error| key_err("ood_behaviors", e.to_string()))?;
            if kinds.contains(&k) {
                return Err(key_err("ood_behaviors", format!("duplicate behavior `{name}`")));
            }
            kinds.push(k);
        }
        Ok(kinds)
    }

    pub fn precision_mode(&self) -> Result<Precision> {
        self.precision
            .parse()
            .map_err(|e: Error| key_err("precision", e.to_string()))
    }

    pub fn architecture(&self) -> Option<Architecture> {
        self.model.parse().ok()
    }

    pub fn neural_config(&self, arch: Architecture) -> NeuralConfig {
        NeuralConfig {
            arch,
            layers: self.layers,
            width: self.width,
            heads: self.heads,
            window: self.window,
            globals: self.globals,
            d_e: self.d_e,
            d: self.d,
            ffn_mult: self.ffn_mult,
            min_count: self.min_count,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            lr: self.lr,
            warmup_steps: self.warmup_steps,
            label_smoothing: self.label_smoothing,
            dropout: self.dropout,
            lr_patience: self.lr_patience,
            stop_patience: self.stop_patience,
            batch_size: self.batch_size,
            max_epochs: self.max_epochs,
            seed: self.seed,
            precision: self.precision_mode().unwrap_or(Precision::Standard),
            eval_interval: self.eval_interval,
            max_steps: self.max_steps,
            grad_clip: self.grad_clip,
        }
    }

    pub fn workload(&self) -> Result<WorkloadConfig> {
        let params = OodParams {
            latency_scale: self.latency_scale,
            mixture_weight: self.mixture_weight,
            length_scale: self.length_scale,
        };
        let counts = SplitCounts {
            train: self.train_count,
            val: self.val_count,
            test: self.test_count,
        };
        Ok(WorkloadConfig::standard(
            self.alphabet_size,
            &self.ood_kinds()?,
            &params,
            counts,
            self.seed,
        ))
    }
}
