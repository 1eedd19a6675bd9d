//! Flat `key = value` configuration files.
//!
//! Every subcommand has its own config struct. Keys are the field names,
//! `#` starts a comment, unknown and repeated keys are errors. The echo of a
//! config is itself a valid config file that reproduces it exactly.

use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::contrastive::{AugmentConfig, FinetuneConfig, PoolSource};
use crate::numerics::AdamWConfig;
use crate::seqio::QualityConfig;
use crate::tokenizer::TokenizerConfig;
use crate::vqvae::{EntropyMode, LossWeights, ModelConfig};

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("bad value `{value}` for `{key}`: {reason}")]
    BadValue { key: String, value: String, reason: String },
    #[error("invalid configuration: {0}")]
    Invalid(String),
    #[error("config line {line}: {reason}")]
    Syntax { line: usize, reason: String },
}

/// A config struct settable by key.
pub trait Config: Default + Clone {
    const KEYS: &'static [&'static str];
    fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError>;
    fn echo_pairs(&self) -> Vec<(&'static str, String)>;
    fn validate(&self) -> Result<(), ConfigError>;

    /// `key = value` lines for every field, defaults included.
    fn echo(&self) -> String {
        self.echo_pairs().into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    /// Defaults, then the file text, then `overrides` in order; validated.
    fn load(text: Option<&str>, overrides: &[(String, String)]) -> Result<Self, ConfigError> {
        let mut cfg = Self::default();
        if let Some(text) = text {
            for (key, value) in parse_pairs(text)? {
                cfg.set(&key, &value)?;
            }
        }
        for (key, value) in overrides {
            cfg.set(key, value)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Splits config text into `(key, value)` pairs.
pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>, ConfigError> {
    let mut out: Vec<(String, String)> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let syntax = |reason: &str| ConfigError::Syntax { line: i + 1, reason: reason.to_string() };
        let (k, v) = line.split_once('=').ok_or_else(|| syntax("expected `key = value`"))?;
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() {
            return Err(syntax("empty key"));
        }
        if out.iter().any(|(seen, _)| seen == k) {
            return Err(syntax(&format!("key `{k}` given twice")));
        }
        out.push((k.to_string(), v.to_string()));
    }
    Ok(out)
}

fn parse_field<T: FromStr>(key: &str, value: &str) -> Result<T, ConfigError>
where
    T::Err: fmt::Display,
{
    value.parse().map_err(|e: T::Err| ConfigError::BadValue {
        key: key.to_string(),
        value: value.to_string(),
        reason: e.to_string(),
    })
}

macro_rules! config_struct {
    (
        $(#[$meta:meta])*
        pub struct $name:ident {
            $( $(#[$fmeta:meta])* $field:ident : $ty:ty = $default:expr ),* $(,)?
        }
    ) => {
        $(#[$meta])*
        #[derive(Debug, Clone, PartialEq)]
        pub struct $name {
            $( $(#[$fmeta])* pub $field: $ty ),*
        }

        impl Default for $name {
            fn default() -> Self {
                $name { $( $field: $default ),* }
            }
        }

        impl Config for $name {
            const KEYS: &'static [&'static str] = &[$(stringify!($field)),*];

            fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
                match key {
                    $( stringify!($field) => self.$field = parse_field(key, value)?, )*
                    _ => return Err(ConfigError::UnknownKey(key.to_string())),
                }
                Ok(())
            }

            fn echo_pairs(&self) -> Vec<(&'static str, String)> {
                vec![$( (stringify!($field), self.$field.to_string()) ),*]
            }

            fn validate(&self) -> Result<(), ConfigError> {
                self.check()
            }
        }
    };
}

fn invalid(msg: impl Into<String>) -> ConfigError {
    ConfigError::Invalid(msg.into())
}

fn check_fraction(name: &str, p: f64, open_low: bool) -> Result<(), ConfigError> {
    let ok = if open_low { p > 0.0 && p <= 1.0 } else { (0.0..=1.0).contains(&p) };
    if ok {
        Ok(())
    } else {
        Err(invalid(format!("{name} = {p} outside its range")))
    }
}

fn check_positive(name: &str, v: f64) -> Result<(), ConfigError> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(invalid(format!("{name} must be positive and finite, got {v}")))
    }
}

/// Inclusive read-length range written `lo,hi`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LenRange {
    pub lo: usize,
    pub hi: usize,
}

impl FromStr for LenRange {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        let (a, b) = s.split_once(',').ok_or("expected `lo,hi`")?;
        let lo = a.trim().parse::<usize>().map_err(|e| e.to_string())?;
        let hi = b.trim().parse::<usize>().map_err(|e| e.to_string())?;
        Ok(LenRange { lo, hi })
    }
}

impl fmt::Display for LenRange {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{},{}", self.lo, self.hi)
    }
}

/// Optional positive number; `off` disables.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Switch(pub Option<f64>);

impl FromStr for Switch {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "off" => Ok(Switch(None)),
            _ => s.parse::<f64>().map(|v| Switch(Some(v))).map_err(|e| e.to_string()),
        }
    }
}

impl fmt::Display for Switch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.0 {
            None => f.write_str("off"),
            Some(v) => write!(f, "{v}"),
        }
    }
}

/// Comma-separated list of fractions.
#[derive(Debug, Clone, PartialEq)]
pub struct Fractions(pub Vec<f64>);

impl FromStr for Fractions {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        s.split(',')
            .map(|p| p.trim().parse::<f64>().map_err(|e| e.to_string()))
            .collect::<Result<Vec<_>, _>>()
            .map(Fractions)
    }
}

impl fmt::Display for Fractions {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.0.iter().map(|v| v.to_string()).collect();
        f.write_str(&parts.join(","))
    }
}

macro_rules! keyword_enum {
    ($(#[$meta:meta])* $name:ident { $($variant:ident => $text:literal),+ $(,)? }) => {
        $(#[$meta])*
        #[derive(Debug, Clone, Copy, PartialEq, Eq)]
        pub enum $name { $($variant),+ }

        impl FromStr for $name {
            type Err = String;
            fn from_str(s: &str) -> Result<Self, String> {
                match s {
                    $($text => Ok($name::$variant),)+
                    _ => Err(format!(
                        "unknown value `{s}` (expected {})",
                        [$($text),+].join("|")
                    )),
                }
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(match self { $($name::$variant => $text),+ })
            }
        }
    };
}

keyword_enum!(
    /// Training objective.
    TrainObjective { Base => "base", Masked => "masked" }
);

keyword_enum!(Optimizer { AdamW => "adamw" });

keyword_enum!(
    /// Which part of the seeded train/test split a command reads.
    SplitPart { Train => "train", Test => "test", All => "all" }
);

config_struct! {
    /// Model, loss and optimizer settings for `train`.
    pub struct TrainConfig {
        codebook_size: usize = 512,
        code_dim: usize = 64,
        embed_dim: usize = 128,
        hidden_dim: usize = 256,
        max_len: usize = 150,
        k: usize = 6,
        canonical: bool = false,
        dropout: f64 = 0.1,
        ema_decay: f64 = 0.95,
        commitment: f64 = 0.1,
        entropy_weight: f64 = 0.003,
        entropy_mode: EntropyMode = EntropyMode::Value,
        batch_size: usize = 32,
        epochs: usize = 50,
        optimizer: Optimizer = Optimizer::AdamW,
        lr: f64 = 2e-4,
        weight_decay: f64 = 1e-4,
        clip_norm: Switch = Switch(None),
        seed: u64 = 42,
        objective: TrainObjective = TrainObjective::Base,
        p_mask: f64 = 0.2,
        train_frac: f64 = 0.9,
        /// Epoch checkpoints retained in the run directory.
        keep_checkpoints: usize = 2,
    }
}

impl TrainConfig {
    fn check(&self) -> Result<(), ConfigError> {
        self.tokenizer().validate().map_err(|e| invalid(e.to_string()))?;
        for (name, v) in [
            ("codebook_size", self.codebook_size),
            ("code_dim", self.code_dim),
            ("embed_dim", self.embed_dim),
            ("hidden_dim", self.hidden_dim),
            ("batch_size", self.batch_size),
            ("epochs", self.epochs),
            ("keep_checkpoints", self.keep_checkpoints),
        ] {
            if v == 0 {
                return Err(invalid(format!("{name} must be at least 1")));
            }
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(invalid(format!("dropout = {} outside [0, 1)", self.dropout)));
        }
        if !(self.ema_decay > 0.0 && self.ema_decay < 1.0) {
            return Err(invalid(format!("ema_decay = {} outside (0, 1)", self.ema_decay)));
        }
        for (name, v) in [
            ("commitment", self.commitment),
            ("entropy_weight", self.entropy_weight),
            ("weight_decay", self.weight_decay),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(invalid(format!("{name} must be non-negative, got {v}")));
            }
        }
        check_positive("lr", self.lr)?;
        if let Some(c) = self.clip_norm.0 {
            check_positive("clip_norm", c)?;
        }
        check_fraction("p_mask", self.p_mask, true)?;
        check_fraction("train_frac", self.train_frac, true)?;
        Ok(())
    }

    pub fn tokenizer(&self) -> TokenizerConfig {
        TokenizerConfig { k: self.k, max_len: self.max_len, canonical: self.canonical }
    }

    pub fn model(&self) -> ModelConfig {
        ModelConfig {
            vocab_size: self.tokenizer().vocab_size(),
            embed_dim: self.embed_dim,
            hidden_dim: self.hidden_dim,
            code_dim: self.code_dim,
            max_len: self.max_len,
            kernel: 3,
            dropout: self.dropout,
        }
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights { commitment: self.commitment, entropy: self.entropy_weight, entropy_mode: self.entropy_mode }
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig { clip_norm: self.clip_norm.0, ..AdamWConfig::new(self.lr, self.weight_decay) }
    }
}

config_struct! {
    /// Synthetic lineage corpus generator settings.
    pub struct SynthConfig {
        genome_len: usize = 1500,
        n_lineages: usize = 10,
        mutations_per_lineage: usize = 25,
        reads_per_lineage: usize = 2000,
        read_len_range: LenRange = LenRange { lo: 100, hi: 200 },
        base_error_rate: f64 = 0.005,
        seed: u64 = 42,
    }
}

/// Largest supported k; synthetic reads must be at least this long.
const MAX_K: usize = 12;

impl SynthConfig {
    fn check(&self) -> Result<(), ConfigError> {
        if self.genome_len == 0 || self.n_lineages == 0 || self.reads_per_lineage == 0 {
            return Err(invalid("genome_len, n_lineages and reads_per_lineage must be at least 1"));
        }
        if self.mutations_per_lineage >= self.genome_len {
            return Err(invalid("mutations_per_lineage must be below genome_len"));
        }
        let r = self.read_len_range;
        if r.lo < MAX_K || r.lo > r.hi || r.hi > self.genome_len {
            return Err(invalid(format!("read_len_range {r} must satisfy {MAX_K} <= lo <= hi <= genome_len")));
        }
        if !(0.0..1.0).contains(&self.base_error_rate) {
            return Err(invalid(format!("base_error_rate = {} outside [0, 1)", self.base_error_rate)));
        }
        Ok(())
    }
}

config_struct! {
    /// Quality trimming settings for `qc`.
    pub struct QcConfig {
        leading_q: u8 = 3,
        trailing_q: u8 = 3,
        window_len: usize = 4,
        window_q: u8 = 15,
        min_len: usize = 36,
        seed: u64 = 42,
    }
}

impl QcConfig {
    fn check(&self) -> Result<(), ConfigError> {
        self.quality().validate().map_err(invalid)
    }

    pub fn quality(&self) -> QualityConfig {
        QualityConfig {
            leading_q: self.leading_q,
            trailing_q: self.trailing_q,
            window_len: self.window_len,
            window_q: self.window_q,
            min_len: self.min_len,
        }
    }
}

config_struct! {
    /// Tokenizer settings for `tokenize`.
    pub struct TokenizeConfig {
        k: usize = 6,
        max_len: usize = 150,
        canonical: bool = false,
        seed: u64 = 42,
    }
}

impl TokenizeConfig {
    fn check(&self) -> Result<(), ConfigError> {
        self.tokenizer().validate().map_err(|e| invalid(e.to_string()))
    }

    pub fn tokenizer(&self) -> TokenizerConfig {
        TokenizerConfig { k: self.k, max_len: self.max_len, canonical: self.canonical }
    }
}

config_struct! {
    /// Contrastive fine-tuning settings.
    pub struct FinetuneSettings {
        out_dim: usize = 128,
        epochs: usize = 10,
        lr: f64 = 1e-4,
        weight_decay: f64 = 1e-4,
        batch_size: usize = 64,
        temperature: f64 = 0.5,
        mask_prob: f64 = 0.15,
        dropout_prob: f64 = 0.1,
        unfreeze_encoder: bool = false,
        pool: PoolSource = PoolSource::Encoder,
        split: SplitPart = SplitPart::Train,
        seed: u64 = 42,
    }
}

impl FinetuneSettings {
    fn check(&self) -> Result<(), ConfigError> {
        if self.out_dim == 0 || self.epochs == 0 {
            return Err(invalid("out_dim and epochs must be at least 1"));
        }
        check_positive("lr", self.lr)?;
        if !(self.weight_decay >= 0.0) {
            return Err(invalid("weight_decay must be non-negative"));
        }
        self.finetune().augment.validate().map_err(invalid)
    }

    pub fn finetune(&self) -> FinetuneConfig {
        FinetuneConfig {
            out_dim: self.out_dim,
            epochs: self.epochs,
            lr: self.lr,
            weight_decay: self.weight_decay,
            augment: AugmentConfig {
                mask_prob: self.mask_prob,
                dropout_prob: self.dropout_prob,
                temperature: self.temperature,
                batch_size: self.batch_size,
            },
            unfreeze_encoder: self.unfreeze_encoder,
            pool: self.pool,
            seed: self.seed,
        }
    }
}

config_struct! {
    /// Settings shared by `eval-recon`, `eval-codebook` and `embed`.
    pub struct EvalConfig {
        batch_size: usize = 64,
        split: SplitPart = SplitPart::Test,
        pool: PoolSource = PoolSource::Encoder,
        seed: u64 = 42,
    }
}

impl EvalConfig {
    fn check(&self) -> Result<(), ConfigError> {
        if self.batch_size == 0 {
            return Err(invalid("batch_size must be at least 1"));
        }
        Ok(())
    }
}

config_struct! {
    /// k-means clustering settings for `eval-cluster`.
    pub struct ClusterConfig {
        k: usize = 10,
        seed: u64 = 42,
    }
}

impl ClusterConfig {
    fn check(&self) -> Result<(), ConfigError> {
        if self.k < 2 {
            return Err(invalid("k must be at least 2"));
        }
        Ok(())
    }
}

config_struct! {
    /// Corruption sweep settings for `sweep-mask`.
    pub struct SweepConfig {
        fractions: Fractions = Fractions(vec![0.1, 0.2, 0.3]),
        batch_size: usize = 64,
        split: SplitPart = SplitPart::Test,
        seed: u64 = 42,
    }
}

impl SweepConfig {
    fn check(&self) -> Result<(), ConfigError> {
        if self.fractions.0.is_empty() {
            return Err(invalid("fractions must not be empty"));
        }
        for &p in &self.fractions.0 {
            check_fraction("fraction", p, false)?;
        }
        if self.batch_size == 0 {
            return Err(invalid("batch_size must be at least 1"));
        }
        Ok(())
    }
}
