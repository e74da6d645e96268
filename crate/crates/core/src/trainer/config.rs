use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::decoder::DecoderConfig;
use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::prompt::builtin_template;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("Adam betas must lie in [0, 1)".into()));
        }
        if !(self.eps > 0.0) {
            return Err(Error::Config("Adam epsilon must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub loss: LossWeights,
    pub adam: AdamConfig,
    pub seed: u64,
    /// Cut-offs for F1 at top-k.
    pub ks: Vec<usize>,
    /// Multiplier on seen-class scores in generalized zero-shot evaluation.
    pub gamma: f64,
    /// Built-in prompt template id for image-level prompts.
    pub template: String,
    pub decoder: DecoderConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 56,
            learning_rate: 1e-3,
            loss: LossWeights::default(),
            adam: AdamConfig::default(),
            seed: 0,
            ks: vec![3, 5],
            gamma: 1.0,
            template: "photo".into(),
            decoder: DecoderConfig::desk(),
        }
    }
}

/// Every key accepted by [`TrainConfig::set`], in printing order.
pub const CONFIG_KEYS: &[&str] = &[
    "epochs",
    "batch_size",
    "learning_rate",
    "alpha",
    "beta",
    "tau",
    "alignment",
    "adam_beta1",
    "adam_beta2",
    "adam_eps",
    "seed",
    "ks",
    "gamma",
    "template",
    "d_model",
    "n_heads",
    "ffn_multiplier",
    "group_size",
    "layers",
    "layer_norm_eps",
];

fn parse<V: std::str::FromStr>(key: &str, value: &str) -> Result<V> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value {value:?} for {key}")))
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::Config(format!("gamma must lie in (0, 1], got {}", self.gamma)));
        }
        if self.ks.is_empty() || self.ks.contains(&0) {
            return Err(Error::Config("ks must be a non-empty list of positive integers".into()));
        }
        builtin_template(&self.template).map_err(|e| Error::Config(e.to_string()))?;
        self.loss.validate()?;
        self.adam.validate()?;
        self.decoder.validate()
    }

    /// Sets one field from its textual form. Unknown keys are errors.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        match key {
            "epochs" => self.epochs = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "learning_rate" => self.learning_rate = parse(key, value)?,
            "alpha" => self.loss.alpha = parse(key, value)?,
            "beta" => self.loss.beta = parse(key, value)?,
            "tau" => self.loss.tau = parse(key, value)?,
            "alignment" => self.loss.alignment = value.parse()?,
            "adam_beta1" => self.adam.beta1 = parse(key, value)?,
            "adam_beta2" => self.adam.beta2 = parse(key, value)?,
            "adam_eps" => self.adam.eps = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "ks" => {
                self.ks = value
                    .split(',')
                    .map(|k| parse(key, k.trim()))
                    .collect::<Result<_>>()?
            }
            "gamma" => self.gamma = parse(key, value)?,
            "template" => self.template = value.to_string(),
            "d_model" => self.decoder.d_model = parse(key, value)?,
            "n_heads" => self.decoder.n_heads = parse(key, value)?,
            "ffn_multiplier" => self.decoder.ffn_multiplier = parse(key, value)?,
            "group_size" => self.decoder.group_size = parse(key, value)?,
            "layers" => self.decoder.layers = parse(key, value)?,
            "layer_norm_eps" => self.decoder.layer_norm_eps = parse(key, value)?,
            other => return Err(Error::Config(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    /// Current value of a key in the textual form `set` accepts.
    pub fn get(&self, key: &str) -> Result<String> {
        Ok(match key {
            "epochs" => self.epochs.to_string(),
            "batch_size" => self.batch_size.to_string(),
            "learning_rate" => self.learning_rate.to_string(),
            "alpha" => self.loss.alpha.to_string(),
            "beta" => self.loss.beta.to_string(),
            "tau" => self.loss.tau.to_string(),
            "alignment" => self.loss.alignment.to_string(),
            "adam_beta1" => self.adam.beta1.to_string(),
            "adam_beta2" => self.adam.beta2.to_string(),
            "adam_eps" => self.adam.eps.to_string(),
            "seed" => self.seed.to_string(),
            "ks" => self.ks.iter().map(usize::to_string).collect::<Vec<_>>().join(","),
            "gamma" => self.gamma.to_string(),
            "template" => self.template.clone(),
            "d_model" => self.decoder.d_model.to_string(),
            "n_heads" => self.decoder.n_heads.to_string(),
            "ffn_multiplier" => self.decoder.ffn_multiplier.to_string(),
            "group_size" => self.decoder.group_size.to_string(),
            "layers" => self.decoder.layers.to_string(),
            "layer_norm_eps" => self.decoder.layer_norm_eps.to_string(),
            other => return Err(Error::Config(format!("unknown config key {other:?}"))),
        })
    }

    /// Applies `key = value` lines. Blank lines and `#` comments are skipped;
    /// a key may appear at most once.
    pub fn apply_kv(&mut self, text: &str) -> Result<()> {
        let mut seen = std::collections::BTreeSet::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            let key = key.trim();
            if !seen.insert(key.to_string()) {
                return Err(Error::Config(format!("line {}: duplicate key {key:?}", n + 1)));
            }
            self.set(key, value)
                .map_err(|e| Error::Config(format!("line {}: {e}", n + 1)))?;
        }
        Ok(())
    }

    pub fn from_kv(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_kv(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Every field as `key = value` lines, parseable by [`Self::from_kv`].
    pub fn to_kv(&self) -> String {
        let mut out = String::new();
        for key in CONFIG_KEYS {
            let _ = writeln!(out, "{key} = {}", self.get(key).expect("listed key"));
        }
        out
    }
}
