//! Model and run configuration.
//!
//! Config files are UTF-8 `key = value` lines with `#` comments. Keys are the
//! field names of [`EncoderConfig`] and [`RunConfig`]; an optional `preset`
//! key selects the starting point (default `desk`). Unknown keys are errors.

use std::fmt::{self, Write as _};
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::corruption::Noise;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TemperatureMode {
    /// Inverted triangle over the run, 0.55 → 0.05 → 0.55.
    Adaptive,
    Fixed(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NoiseKind {
    Mask,
    Shuffle(usize),
}

/// Which hidden states feed the aggregation MLP.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pooling {
    Cls,
    Mean,
}

impl fmt::Display for TemperatureMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Adaptive => f.write_str("adaptive"),
            Self::Fixed(t) => write!(f, "fixed:{t:?}"),
        }
    }
}

impl FromStr for TemperatureMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.split_once(':') {
            None if s == "adaptive" => Ok(Self::Adaptive),
            Some(("fixed", v)) => v
                .parse::<f64>()
                .map(Self::Fixed)
                .map_err(|e| format!("bad fixed temperature {v:?}: {e}")),
            _ => Err(format!("expected `adaptive` or `fixed:<tau>`, got {s:?}")),
        }
    }
}

impl fmt::Display for NoiseKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Mask => f.write_str("mask"),
            Self::Shuffle(k) => write!(f, "shuffle:{k}"),
        }
    }
}

impl FromStr for NoiseKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.split_once(':') {
            None if s == "mask" => Ok(Self::Mask),
            Some(("shuffle", k)) => k
                .parse::<usize>()
                .map(Self::Shuffle)
                .map_err(|e| format!("bad shuffle window {k:?}: {e}")),
            _ => Err(format!("expected `mask` or `shuffle:<k>`, got {s:?}")),
        }
    }
}

impl fmt::Display for Pooling {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Cls => "cls",
            Self::Mean => "mean",
        })
    }
}

impl FromStr for Pooling {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "cls" => Ok(Self::Cls),
            "mean" => Ok(Self::Mean),
            _ => Err(format!("expected `cls` or `mean`, got {s:?}")),
        }
    }
}

/// Architecture and optimization hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderConfig {
    pub layers: usize,
    pub heads: usize,
    pub hidden: usize,
    pub ffn_inner: usize,
    pub agg_inner: usize,
    pub agg_out: usize,
    pub dropout: f64,
    pub max_len: usize,
    pub vocab_size: usize,
    pub batch_size: usize,
    pub total_steps: usize,
    pub warmup_steps: usize,
    pub peak_lr: f64,
    pub weight_decay: f64,
    pub adam_eps: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub mask_rate: f64,
    pub queue_capacity: usize,
    pub temperature_mode: TemperatureMode,
    pub noise_kind: NoiseKind,
    pub pooling: Pooling,
    pub seed: u64,
}

/// False for NaN as well as for nonpositive values.
fn positive(x: f64) -> bool {
    x > 0.0
}

impl EncoderConfig {
    /// The 6-layer, 256-wide CAPT-Small model.
    /// Sequence length and vocabulary size are not given there; 512 and the
    /// BERT uncased vocabulary size are used.
    pub fn capt_small() -> Self {
        Self {
            layers: 6,
            heads: 4,
            hidden: 256,
            ffn_inner: 1024,
            agg_inner: 1024,
            agg_out: 256,
            dropout: 0.1,
            max_len: 512,
            vocab_size: 30522,
            batch_size: 2048,
            total_steps: 200_000,
            warmup_steps: 10_000,
            peak_lr: 5e-4,
            weight_decay: 0.01,
            adam_eps: 1e-6,
            adam_beta1: 0.9,
            adam_beta2: 0.98,
            mask_rate: 0.15,
            queue_capacity: 8192,
            temperature_mode: TemperatureMode::Adaptive,
            noise_kind: NoiseKind::Mask,
            pooling: Pooling::Cls,
            seed: 1,
        }
    }

    /// The 24-layer, 1024-wide model. Shipped as data; far beyond one CPU.
    /// With these values one batch (2·8192 vectors) overflows the 8192-entry
    /// queue, so `validate` rejects it until one of the two is changed.
    pub fn capt_large() -> Self {
        Self {
            layers: 24,
            heads: 16,
            hidden: 1024,
            ffn_inner: 4096,
            agg_inner: 4096,
            agg_out: 1024,
            max_len: 512,
            vocab_size: 50265,
            batch_size: 8192,
            total_steps: 500_000,
            warmup_steps: 30_000,
            peak_lr: 6e-4,
            ..Self::capt_small()
        }
    }

    /// CAPT-Small architecture at single-CPU scale.
    pub fn desk() -> Self {
        Self {
            max_len: 64,
            vocab_size: 8192,
            batch_size: 32,
            total_steps: 2000,
            warmup_steps: 100,
            queue_capacity: 1024,
            ..Self::capt_small()
        }
    }

    /// A two-layer, 64-wide model for quick experiments and tests.
    pub fn tiny() -> Self {
        Self {
            layers: 2,
            heads: 4,
            hidden: 64,
            ffn_inner: 256,
            agg_inner: 256,
            agg_out: 64,
            max_len: 32,
            vocab_size: 1024,
            batch_size: 32,
            total_steps: 400,
            warmup_steps: 40,
            peak_lr: 1e-3,
            queue_capacity: 512,
            ..Self::capt_small()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "capt-small" => Ok(Self::capt_small()),
            "capt-large" => Ok(Self::capt_large()),
            "desk" => Ok(Self::desk()),
            "tiny" => Ok(Self::tiny()),
            _ => Err(Error::Config(format!(
                "unknown preset {name:?} (capt-small, capt-large, desk, tiny)"
            ))),
        }
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads
    }

    pub fn noise(&self) -> Noise {
        match self.noise_kind {
            NoiseKind::Mask => Noise::Mask {
                rate: self.mask_rate,
            },
            NoiseKind::Shuffle(window) => Noise::Shuffle { window },
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.layers == 0 || self.heads == 0 || self.hidden == 0 {
            return fail("layers, heads and hidden must be positive".into());
        }
        if !self.hidden.is_multiple_of(self.heads) {
            return fail(format!(
                "hidden {} not divisible by heads {}",
                self.hidden, self.heads
            ));
        }
        if self.agg_out != self.hidden {
            return fail(format!(
                "agg_out {} must equal hidden {}",
                self.agg_out, self.hidden
            ));
        }
        if self.ffn_inner == 0 || self.agg_inner == 0 {
            return fail("ffn_inner and agg_inner must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if self.max_len < 3 {
            return fail("max_len must be at least 3".into());
        }
        if self.vocab_size <= crate::corpus::NUM_SPECIALS {
            return fail("vocab_size must exceed the 5 special tokens".into());
        }
        if self.batch_size == 0 {
            return fail("batch_size must be positive".into());
        }
        if self.total_steps > 0 && (self.warmup_steps == 0 || self.warmup_steps >= self.total_steps)
        {
            return fail(format!(
                "need 0 < warmup_steps ({}) < total_steps ({})",
                self.warmup_steps, self.total_steps
            ));
        }
        if !positive(self.peak_lr) || self.weight_decay < 0.0 || !positive(self.adam_eps) {
            return fail("peak_lr and adam_eps must be positive, weight_decay nonnegative".into());
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return fail("adam betas must lie in [0, 1)".into());
        }
        if !(0.0..=1.0).contains(&self.mask_rate) {
            return fail(format!("mask_rate {} outside [0, 1]", self.mask_rate));
        }
        if self.queue_capacity > 0 && self.queue_capacity < 2 * self.batch_size {
            return fail(format!(
                "queue_capacity {} cannot hold one batch of {} pairs",
                self.queue_capacity, self.batch_size
            ));
        }
        if let TemperatureMode::Fixed(t) = self.temperature_mode {
            if !positive(t) {
                return fail(format!("fixed temperature {t} must be positive"));
            }
        }
        if self.noise_kind == NoiseKind::Shuffle(0) {
            return fail("shuffle window must be at least 1".into());
        }
        Ok(())
    }
}

/// Everything a `pretrain` or `probe` run needs.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: EncoderConfig,
    pub corpus: PathBuf,
    pub output_dir: PathBuf,
    pub checkpoint_interval: usize,
    /// Weight of the contrastive term in the total loss; 0 trains MLM only.
    pub capt_weight: f64,
    /// Divide the batch contrastive sum by `2n` before adding it to MLM.
    pub capt_mean: bool,
    pub probe: ProbeOptions,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeOptions {
    pub probe_rho: f64,
    pub probe_topic_words: usize,
    pub probe_filler_words: usize,
    pub probe_train: usize,
    pub probe_val: usize,
    pub probe_seed: u64,
    pub finetune_steps: usize,
    /// `None` means `peak_lr / 5`.
    pub finetune_lr: Option<f64>,
    pub eval_interval: usize,
    pub finetune_seeds: Vec<u64>,
    pub probe_threshold: f64,
}

impl Default for ProbeOptions {
    fn default() -> Self {
        Self {
            probe_rho: 0.35,
            probe_topic_words: 12,
            probe_filler_words: 3,
            probe_train: 2000,
            probe_val: 500,
            probe_seed: 17,
            finetune_steps: 300,
            finetune_lr: None,
            eval_interval: 10,
            finetune_seeds: vec![1, 2, 3, 4, 5],
            probe_threshold: 0.9,
        }
    }
}

impl ProbeOptions {
    pub fn finetune_lr(&self, model: &EncoderConfig) -> f64 {
        self.finetune_lr.unwrap_or(model.peak_lr / 5.0)
    }
}

impl RunConfig {
    pub fn with_model(model: EncoderConfig) -> Self {
        Self {
            model,
            corpus: PathBuf::new(),
            output_dir: PathBuf::from("runs/capt"),
            checkpoint_interval: 500,
            capt_weight: 1.0,
            capt_mean: true,
            probe: ProbeOptions::default(),
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg = Self::parse(&text)?;
        // Relative paths in a config file are relative to the file.
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [&mut cfg.corpus, &mut cfg.output_dir] {
            if !p.as_os_str().is_empty() && p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected `key = value`", lineno + 1))
            })?;
            entries.push((k.trim().to_string(), v.trim().to_string()));
        }

        let preset = entries
            .iter()
            .rev()
            .find(|(k, _)| k == "preset")
            .map_or("desk", |(_, v)| v.as_str());
        let mut cfg = Self::with_model(EncoderConfig::preset(preset)?);

        let mut unknown = Vec::new();
        for (key, value) in &entries {
            if key == "preset" {
                continue;
            }
            match cfg.set(key, value) {
                Ok(true) => {}
                Ok(false) => unknown.push(key.clone()),
                Err(msg) => return Err(Error::Config(format!("{key}: {msg}"))),
            }
        }
        if !unknown.is_empty() {
            return Err(Error::UnknownKeys(unknown));
        }
        cfg.model.validate()?;
        if cfg.probe.eval_interval == 0 {
            return Err(Error::Config("eval_interval must be positive".into()));
        }
        Ok(cfg)
    }

    /// Applies one `key = value`; `Ok(false)` for an unknown key.
    fn set(&mut self, key: &str, value: &str) -> std::result::Result<bool, String> {
        fn p<T: FromStr>(v: &str) -> std::result::Result<T, String>
        where
            T::Err: fmt::Display,
        {
            v.parse::<T>()
                .map_err(|e| format!("cannot parse {v:?}: {e}"))
        }
        let m = &mut self.model;
        let pr = &mut self.probe;
        match key {
            "layers" => m.layers = p(value)?,
            "heads" => m.heads = p(value)?,
            "hidden" => m.hidden = p(value)?,
            "ffn_inner" => m.ffn_inner = p(value)?,
            "agg_inner" => m.agg_inner = p(value)?,
            "agg_out" => m.agg_out = p(value)?,
            "dropout" => m.dropout = p(value)?,
            "max_len" => m.max_len = p(value)?,
            "vocab_size" => m.vocab_size = p(value)?,
            "batch_size" => m.batch_size = p(value)?,
            "total_steps" => m.total_steps = p(value)?,
            "warmup_steps" => m.warmup_steps = p(value)?,
            "peak_lr" => m.peak_lr = p(value)?,
            "weight_decay" => m.weight_decay = p(value)?,
            "adam_eps" => m.adam_eps = p(value)?,
            "adam_beta1" => m.adam_beta1 = p(value)?,
            "adam_beta2" => m.adam_beta2 = p(value)?,
            "mask_rate" => m.mask_rate = p(value)?,
            "queue_capacity" => m.queue_capacity = p(value)?,
            "temperature_mode" => m.temperature_mode = p(value)?,
            "noise_kind" => m.noise_kind = p(value)?,
            "pooling" => m.pooling = p(value)?,
            "seed" => m.seed = p(value)?,
            "corpus" => self.corpus = PathBuf::from(value),
            "output_dir" => self.output_dir = PathBuf::from(value),
            "checkpoint_interval" => self.checkpoint_interval = p(value)?,
            "capt_weight" => self.capt_weight = p(value)?,
            "capt_mean" => self.capt_mean = p(value)?,
            "probe_rho" => pr.probe_rho = p(value)?,
            "probe_topic_words" => pr.probe_topic_words = p(value)?,
            "probe_filler_words" => pr.probe_filler_words = p(value)?,
            "probe_train" => pr.probe_train = p(value)?,
            "probe_val" => pr.probe_val = p(value)?,
            "probe_seed" => pr.probe_seed = p(value)?,
            "finetune_steps" => pr.finetune_steps = p(value)?,
            "finetune_lr" => pr.finetune_lr = Some(p(value)?),
            "eval_interval" => pr.eval_interval = p(value)?,
            "finetune_seeds" => {
                pr.finetune_seeds = value
                    .split(',')
                    .map(|s| p::<u64>(s.trim()))
                    .collect::<std::result::Result<_, _>>()?
            }
            "probe_threshold" => pr.probe_threshold = p(value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    /// Canonical text form; parsing it yields an equal config.
    pub fn to_config_text(&self) -> String {
        let m = &self.model;
        let pr = &self.probe;
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("layers", m.layers.to_string());
        kv("heads", m.heads.to_string());
        kv("hidden", m.hidden.to_string());
        kv("ffn_inner", m.ffn_inner.to_string());
        kv("agg_inner", m.agg_inner.to_string());
        kv("agg_out", m.agg_out.to_string());
        kv("dropout", format!("{:?}", m.dropout));
        kv("max_len", m.max_len.to_string());
        kv("vocab_size", m.vocab_size.to_string());
        kv("batch_size", m.batch_size.to_string());
        kv("total_steps", m.total_steps.to_string());
        kv("warmup_steps", m.warmup_steps.to_string());
        kv("peak_lr", format!("{:?}", m.peak_lr));
        kv("weight_decay", format!("{:?}", m.weight_decay));
        kv("adam_eps", format!("{:?}", m.adam_eps));
        kv("adam_beta1", format!("{:?}", m.adam_beta1));
        kv("adam_beta2", format!("{:?}", m.adam_beta2));
        kv("mask_rate", format!("{:?}", m.mask_rate));
        kv("queue_capacity", m.queue_capacity.to_string());
        kv("temperature_mode", m.temperature_mode.to_string());
        kv("noise_kind", m.noise_kind.to_string());
        kv("pooling", m.pooling.to_string());
        kv("seed", m.seed.to_string());
        kv("corpus", self.corpus.display().to_string());
        kv("output_dir", self.output_dir.display().to_string());
        kv("checkpoint_interval", self.checkpoint_interval.to_string());
        kv("capt_weight", format!("{:?}", self.capt_weight));
        kv("capt_mean", self.capt_mean.to_string());
        kv("probe_rho", format!("{:?}", pr.probe_rho));
        kv("probe_topic_words", pr.probe_topic_words.to_string());
        kv("probe_filler_words", pr.probe_filler_words.to_string());
        kv("probe_train", pr.probe_train.to_string());
        kv("probe_val", pr.probe_val.to_string());
        kv("probe_seed", pr.probe_seed.to_string());
        kv("finetune_steps", pr.finetune_steps.to_string());
        if let Some(lr) = pr.finetune_lr {
            kv("finetune_lr", format!("{lr:?}"));
        }
        kv("eval_interval", pr.eval_interval.to_string());
        kv(
            "finetune_seeds",
            pr.finetune_seeds
                .iter()
                .map(u64::to_string)
                .collect::<Vec<_>>()
                .join(","),
        );
        kv("probe_threshold", format!("{:?}", pr.probe_threshold));
        s
    }
}
