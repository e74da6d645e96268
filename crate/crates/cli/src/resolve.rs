//! Layered configuration: built-in defaults, then a key=value file, then
//! command-line flags.

use std::fmt;
use std::path::Path;

use clip_decoder::io::SynthConfig;
use clip_decoder::trainer::{TrainConfig, CONFIG_KEYS};
use clip_decoder::{Error, Result};
use serde_json::{Map, Value};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Source {
    Default,
    File,
    Flag,
    Checkpoint,
}

impl fmt::Display for Source {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Source::Default => "default",
            Source::File => "file",
            Source::Flag => "flag",
            Source::Checkpoint => "checkpoint",
        })
    }
}

/// A flat, string-keyed configuration.
pub trait KeyValue: Sized {
    fn keys(&self) -> Vec<String>;
    fn get_key(&self, key: &str) -> Result<String>;
    fn set_key(&mut self, key: &str, value: &str) -> Result<()>;
    fn check(&self) -> Result<()>;
}

impl KeyValue for TrainConfig {
    fn keys(&self) -> Vec<String> {
        CONFIG_KEYS.iter().map(|k| k.to_string()).collect()
    }

    fn get_key(&self, key: &str) -> Result<String> {
        self.get(key)
    }

    fn set_key(&mut self, key: &str, value: &str) -> Result<()> {
        self.set(key, value)
    }

    fn check(&self) -> Result<()> {
        self.validate()
    }
}

fn synth_fields(cfg: &SynthConfig) -> Map<String, Value> {
    match serde_json::to_value(cfg).expect("SynthConfig serializes") {
        Value::Object(m) => m,
        _ => unreachable!("SynthConfig is a struct"),
    }
}

impl KeyValue for SynthConfig {
    fn keys(&self) -> Vec<String> {
        [
            "classes",
            "seen_fraction",
            "train_samples",
            "test_samples",
            "tokens_per_image",
            "image_dim",
            "text_dim",
            "min_labels",
            "max_labels",
            "sigma_image",
            "sigma_text",
            "seed",
        ]
        .map(String::from)
        .to_vec()
    }

    fn get_key(&self, key: &str) -> Result<String> {
        synth_fields(self)
            .get(key)
            .map(Value::to_string)
            .ok_or_else(|| Error::Config(format!("unknown config key {key:?}")))
    }

    fn set_key(&mut self, key: &str, value: &str) -> Result<()> {
        let mut fields = synth_fields(self);
        let slot = fields
            .get_mut(key)
            .ok_or_else(|| Error::Config(format!("unknown config key {key:?}")))?;
        let value = value.trim();
        let bad = || Error::Config(format!("invalid value {value:?} for {key}"));
        *slot = if slot.is_u64() {
            Value::from(value.parse::<u64>().map_err(|_| bad())?)
        } else {
            Value::from(value.parse::<f64>().map_err(|_| bad())?)
        };
        *self = serde_json::from_value(Value::Object(fields)).map_err(|_| bad())?;
        Ok(())
    }

    fn check(&self) -> Result<()> {
        self.validate()
    }
}

/// A configuration together with where each key's value came from.
#[derive(Debug, Clone)]
pub struct Resolved<C> {
    pub config: C,
    sources: Vec<(String, Source)>,
}

/// `key = value` pairs of a config file, in file order.
pub fn parse_kv_file(text: &str) -> Result<Vec<(String, String)>> {
    let mut out: Vec<(String, String)> = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
        let k = k.trim().to_string();
        if out.iter().any(|(seen, _)| *seen == k) {
            return Err(Error::Config(format!("line {}: duplicate key {k:?}", n + 1)));
        }
        out.push((k, v.trim().to_string()));
    }
    Ok(out)
}

/// Splits a `key=value` flag.
pub fn parse_assignment(s: &str) -> std::result::Result<(String, String), String> {
    s.split_once('=')
        .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
        .filter(|(k, _)| !k.is_empty())
        .ok_or_else(|| format!("expected key=value, got {s:?}"))
}

impl<C: KeyValue> Resolved<C> {
    pub fn new(config: C, base: Source) -> Self {
        let sources = config.keys().into_iter().map(|k| (k, base)).collect();
        Self { config, sources }
    }

    pub fn set(&mut self, key: &str, value: &str, source: Source) -> Result<()> {
        self.config.set_key(key, value)?;
        if let Some(slot) = self.sources.iter_mut().find(|(k, _)| k == key) {
            slot.1 = source;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        for (k, v) in parse_kv_file(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))? {
            self.set(&k, &v, Source::File)?;
        }
        Ok(())
    }

    pub fn apply_flags<'a>(&mut self, flags: impl IntoIterator<Item = (&'a str, String)>) -> Result<()> {
        for (k, v) in flags {
            self.set(k, &v, Source::Flag)?;
        }
        Ok(())
    }

    /// Defaults, then `file`, then `flags`; the result is validated.
    pub fn layered<'a>(
        defaults: C,
        file: Option<&Path>,
        flags: impl IntoIterator<Item = (&'a str, String)>,
    ) -> Result<Self> {
        let mut r = Self::new(defaults, Source::Default);
        if let Some(path) = file {
            r.apply_file(path)?;
        }
        r.apply_flags(flags)?;
        r.config.check()?;
        Ok(r)
    }

    /// Every key with its value and origin, one per line.
    pub fn render(&self, title: &str) -> String {
        let width = self.sources.iter().map(|(k, _)| k.len()).max().unwrap_or(0);
        let mut out = format!("{title}\n");
        for (k, src) in &self.sources {
            let v = self.config.get_key(k).expect("listed key");
            out.push_str(&format!("  {k:<width$} = {v}  [{src}]\n"));
        }
        out
    }
}
