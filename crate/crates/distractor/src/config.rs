//! Flat run configuration: every tunable as a `key=value` pair.
//!
//! One struct carries the union of training, pooling, inference, and corpus
//! knobs so a run can be replayed from a single file. Values render through
//! `Display`, which for floats is the shortest round-trip form, so writing
//! the effective config and reading it back reproduces the run bit for bit.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::ParseMode;
use crate::metrics::AggregateMetrics;
use crate::pipeline::{InferConfig, PoolConfig, TrainConfig};
use crate::policy::{AdamWConfig, FeatureSpec, ParamInit};
use crate::reward::{RewardConfig, RewardMode};
use crate::scheduler::{ScaleMode, SchedulerConfig};
use crate::synth::SynthConfig;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("unknown config key {0:?}")]
    UnknownKey(String),
    #[error("config key {key}: cannot parse {value:?} as {expected}")]
    InvalidValue {
        key: String,
        value: String,
        expected: &'static str,
    },
    #[error("config line {line}: {reason}")]
    Line { line: usize, reason: String },
    #[error("config io at {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid config: {0}")]
    Invalid(String),
}

/// Parameter initialization selector; the sigma lives in its own key.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InitKind {
    Zeros,
    Gaussian,
}

impl fmt::Display for InitKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            InitKind::Zeros => "zeros",
            InitKind::Gaussian => "gaussian",
        })
    }
}

impl FromStr for InitKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "zeros" => Ok(InitKind::Zeros),
            "gaussian" => Ok(InitKind::Gaussian),
            other => Err(format!("unknown init {other:?}, expected zeros or gaussian")),
        }
    }
}

/// The full tunable surface of a run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub feature_dim: usize,
    pub param_init: InitKind,
    pub init_sigma: f64,
    pub base_scale: f64,
    pub max_scale: f64,
    pub alpha: f64,
    pub threshold: f64,
    pub scale_mode: ScaleMode,
    pub constant_scale: f64,
    pub loss_window: usize,
    pub reward_mode: RewardMode,
    pub gen_coefficient: f64,
    pub n_gold: usize,
    pub n_generated: usize,
    pub max_generation_rounds: usize,
    pub recompute_confidence: bool,
    pub k_out: usize,
    pub k_gen: usize,
    pub strict: bool,
    pub n_topics: usize,
    pub per_topic: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let optimizer = AdamWConfig::default();
        let scheduler = SchedulerConfig::default();
        let reward = RewardConfig::default();
        let pool = PoolConfig::default();
        let infer = InferConfig::default();
        let feature = FeatureSpec::default();
        let synth = SynthConfig::default();
        Self {
            epochs: 20,
            batch_size: 8,
            seed: 42,
            lr: optimizer.lr,
            beta1: optimizer.beta1,
            beta2: optimizer.beta2,
            eps: optimizer.eps,
            weight_decay: optimizer.weight_decay,
            feature_dim: feature.dim,
            param_init: InitKind::Zeros,
            init_sigma: 0.01,
            base_scale: scheduler.base_scale,
            max_scale: scheduler.max_scale,
            alpha: scheduler.alpha,
            threshold: scheduler.threshold,
            scale_mode: scheduler.mode,
            constant_scale: scheduler.constant_scale,
            loss_window: scheduler.loss_window,
            reward_mode: reward.mode,
            gen_coefficient: reward.gen_coefficient,
            n_gold: pool.n_gold,
            n_generated: pool.n_generated,
            max_generation_rounds: pool.max_generation_rounds,
            recompute_confidence: false,
            k_out: infer.k_out,
            k_gen: infer.k_gen,
            strict: true,
            n_topics: synth.n_topics,
            per_topic: synth.per_topic,
        }
    }
}

macro_rules! config_keys {
    ($(($key:literal, $field:ident, $expected:literal)),+ $(,)?) => {
        impl RunConfig {
            /// Sets one key from its string form.
            pub fn apply(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
                match key {
                    $($key => {
                        self.$field = value.trim().parse().map_err(|_| ConfigError::InvalidValue {
                            key: key.to_string(),
                            value: value.to_string(),
                            expected: $expected,
                        })?;
                        Ok(())
                    })+
                    other => Err(ConfigError::UnknownKey(other.to_string())),
                }
            }

            /// Every key with its current value, in canonical order.
            pub fn to_pairs(&self) -> Vec<(String, String)> {
                vec![
                    $(($key.to_string(), self.$field.to_string())),+
                ]
            }
        }
    };
}

config_keys![
    ("epochs", epochs, "a positive integer"),
    ("batch_size", batch_size, "a positive integer"),
    ("seed", seed, "an unsigned integer"),
    ("lr", lr, "a number"),
    ("beta1", beta1, "a number"),
    ("beta2", beta2, "a number"),
    ("eps", eps, "a number"),
    ("weight_decay", weight_decay, "a number"),
    ("feature_dim", feature_dim, "a positive integer"),
    ("param_init", param_init, "zeros or gaussian"),
    ("init_sigma", init_sigma, "a number"),
    ("base_scale", base_scale, "a number"),
    ("max_scale", max_scale, "a number"),
    ("alpha", alpha, "a number"),
    ("threshold", threshold, "a number"),
    ("scale_mode", scale_mode, "adaptive or constant"),
    ("constant_scale", constant_scale, "a number"),
    ("loss_window", loss_window, "a positive integer"),
    ("reward_mode", reward_mode, "dual or uniform"),
    ("gen_coefficient", gen_coefficient, "a number"),
    ("n_gold", n_gold, "a positive integer"),
    ("n_generated", n_generated, "a positive integer"),
    ("max_generation_rounds", max_generation_rounds, "a positive integer"),
    ("recompute_confidence", recompute_confidence, "true or false"),
    ("k_out", k_out, "a positive integer"),
    ("k_gen", k_gen, "a positive integer"),
    ("strict", strict, "true or false"),
    ("n_topics", n_topics, "a positive integer"),
    ("per_topic", per_topic, "a positive integer"),
];

impl RunConfig {
    pub fn apply_pairs<K, V>(
        &mut self,
        pairs: impl IntoIterator<Item = (K, V)>,
    ) -> Result<(), ConfigError>
    where
        K: AsRef<str>,
        V: AsRef<str>,
    {
        for (key, value) in pairs {
            self.apply(key.as_ref(), value.as_ref())?;
        }
        Ok(())
    }

    /// Parses a flat config file: `key = value` lines, `#` comments, blank
    /// lines ignored, later keys win.
    pub fn apply_text(&mut self, text: &str) -> Result<(), ConfigError> {
        for (index, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let number = index + 1;
            let (key, value) = line.split_once('=').ok_or_else(|| ConfigError::Line {
                line: number,
                reason: format!("expected key=value, found {line:?}"),
            })?;
            self.apply(key.trim(), value.trim())
                .map_err(|source| ConfigError::Line {
                    line: number,
                    reason: source.to_string(),
                })?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: impl AsRef<Path>) -> Result<(), ConfigError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        self.apply_text(&text)
    }

    /// Renders every key, one `key = value` per line.
    pub fn to_file_text(&self) -> String {
        let mut out = String::new();
        for (key, value) in self.to_pairs() {
            out.push_str(&key);
            out.push_str(" = ");
            out.push_str(&value);
            out.push('\n');
        }
        out
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), ConfigError> {
        let path = path.as_ref();
        std::fs::write(path, self.to_file_text()).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn to_map(&self) -> BTreeMap<String, String> {
        self.to_pairs().into_iter().collect()
    }

    pub fn param_init(&self) -> ParamInit {
        match self.param_init {
            InitKind::Zeros => ParamInit::Zeros,
            InitKind::Gaussian => ParamInit::Gaussian {
                sigma: self.init_sigma,
            },
        }
    }

    pub fn parse_mode(&self) -> ParseMode {
        if self.strict {
            ParseMode::Strict
        } else {
            ParseMode::Lenient
        }
    }

    pub fn optimizer_config(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
        }
    }

    pub fn scheduler_config(&self) -> SchedulerConfig {
        SchedulerConfig {
            base_scale: self.base_scale,
            max_scale: self.max_scale,
            alpha: self.alpha,
            threshold: self.threshold,
            mode: self.scale_mode,
            constant_scale: self.constant_scale,
            loss_window: self.loss_window,
        }
    }

    pub fn reward_config(&self) -> RewardConfig {
        RewardConfig {
            gen_coefficient: self.gen_coefficient,
            mode: self.reward_mode,
        }
    }

    pub fn pool_config(&self) -> PoolConfig {
        PoolConfig {
            n_gold: self.n_gold,
            n_generated: self.n_generated,
            max_generation_rounds: self.max_generation_rounds,
        }
    }

    pub fn infer_config(&self) -> InferConfig {
        InferConfig {
            k_out: self.k_out,
            k_gen: self.k_gen,
        }
    }

    pub fn synth_config(&self) -> SynthConfig {
        SynthConfig {
            n_topics: self.n_topics,
            per_topic: self.per_topic,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            seed: self.seed,
            feature: FeatureSpec {
                dim: self.feature_dim,
            },
            init: self.param_init(),
            optimizer: self.optimizer_config(),
            scheduler: self.scheduler_config(),
            reward: self.reward_config(),
            pool: self.pool_config(),
            recompute_confidence: self.recompute_confidence,
        }
    }

    /// Cross-checks the whole surface by validating each derived config.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |e: &dyn fmt::Display| ConfigError::Invalid(e.to_string());
        self.train_config().validate().map_err(|e| invalid(&e))?;
        self.infer_config().validate().map_err(|e| invalid(&e))?;
        self.synth_config().validate().map_err(|e| invalid(&e))?;
        if self.param_init == InitKind::Gaussian
            && (!self.init_sigma.is_finite() || self.init_sigma <= 0.0)
        {
            return Err(ConfigError::Invalid(format!(
                "init_sigma must be positive, got {}",
                self.init_sigma
            )));
        }
        Ok(())
    }
}

/// What a run did: command, inputs, outputs, the full config, and metrics
/// when the command produced them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub seed: u64,
    /// The reward multiplier generated candidates actually receive under the
    /// configured mode.
    pub gen_coefficient_effective: f64,
    pub config: BTreeMap<String, String>,
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub metrics: Option<AggregateMetrics>,
}

impl Manifest {
    pub fn new(command: impl Into<String>, config: &RunConfig) -> Self {
        Self {
            command: command.into(),
            seed: config.seed,
            gen_coefficient_effective: config.reward_config().effective_coefficient(),
            config: config.to_map(),
            inputs: Vec::new(),
            outputs: Vec::new(),
            metrics: None,
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), ConfigError> {
        let path = path.as_ref();
        let mut text = serde_json::to_string_pretty(self).expect("manifest serializes");
        text.push('\n');
        std::fs::write(path, text).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        serde_json::from_str(&text).map_err(|e| ConfigError::Invalid(e.to_string()))
    }
}
