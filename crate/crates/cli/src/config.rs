//! Layered run configuration.
//!
//! Every section serializes to a JSON object; a dotted key such as
//! `codec.num_orders` addresses one leaf of that tree. Keys are resolved against
//! the defaults, so a key that does not already exist is rejected by name.
//! Values are parsed according to the type of the leaf they replace.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Number, Value};
use sotsep::codec::{CodecConfig, CodecTrainConfig};
use sotsep::decoding::DecodeConfig;
use sotsep::model::ModelConfig;
use sotsep::synth::SynthConfig;
use sotsep::trainer::TrainConfig;

use crate::error::{CliError, CliResult};

/// Short spellings accepted in config files and `--set`.
const ALIASES: &[(&str, &str)] = &[("codec.m", "codec.num_orders"), ("codec.C", "codec.codebook_size")];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    pub seed: u64,
    pub n_train: usize,
    pub n_eval: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            n_train: 2000,
            n_eval: 200,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub workers: usize,
    pub temperatures: Vec<f64>,
    /// Add a row for freshly initialized models of the same shape.
    pub with_untrained: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            workers: 1,
            temperatures: vec![0.5, 0.9, 1.0, 1.1, 1.5],
            with_untrained: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CliConfig {
    pub data: DataConfig,
    pub synth: SynthConfig,
    pub codec: CodecConfig,
    pub codec_train: CodecTrainConfig,
    pub model: ModelConfig,
    pub ar_train: TrainConfig,
    pub nar_train: TrainConfig,
    pub decode: DecodeConfig,
    pub eval: EvalConfig,
}

/// Length budget that fits two 2 s speakers after serialization.
pub const TWO_SPEAKER_MAX_LEN: usize = 600;

impl Default for CliConfig {
    fn default() -> Self {
        Self {
            data: DataConfig::default(),
            synth: SynthConfig::default(),
            codec: CodecConfig::default(),
            codec_train: CodecTrainConfig::default(),
            model: ModelConfig {
                max_len: TWO_SPEAKER_MAX_LEN,
                ..ModelConfig::default()
            },
            ar_train: TrainConfig::default(),
            nar_train: TrainConfig::default(),
            decode: DecodeConfig {
                max_len: TWO_SPEAKER_MAX_LEN,
                ..DecodeConfig::default()
            },
            eval: EvalConfig::default(),
        }
    }
}

/// Accumulates overrides on top of the defaults, then materializes a [`CliConfig`].
#[derive(Clone, Debug)]
pub struct ConfigBuilder {
    tree: Value,
}

impl Default for ConfigBuilder {
    fn default() -> Self {
        Self {
            tree: serde_json::to_value(CliConfig::default()).expect("defaults serialize"),
        }
    }
}

impl ConfigBuilder {
    /// Apply a `key=value` file; `#` starts a comment.
    pub fn apply_file(&mut self, path: &Path) -> CliResult<()> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        self.apply_text(&text)
            .map_err(|e| CliError::Usage(format!("{}: {}", path.display(), e.message())))
    }

    pub fn apply_text(&mut self, text: &str) -> CliResult<()> {
        for (no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            self.apply_assignment(line)
                .map_err(|e| CliError::Usage(format!("line {}: {}", no + 1, e.message())))?;
        }
        Ok(())
    }

    /// Apply one `key=value` pair.
    pub fn apply_assignment(&mut self, assignment: &str) -> CliResult<()> {
        let (key, value) = assignment
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("expected key=value, got `{assignment}`")))?;
        self.set(key.trim(), value.trim())
    }

    pub fn set(&mut self, key: &str, value: &str) -> CliResult<()> {
        let key = ALIASES.iter().find(|(a, _)| *a == key).map_or(key, |(_, k)| *k);
        let mut node = &mut self.tree;
        for part in key.split('.') {
            node = match node {
                Value::Object(map) => map.get_mut(part),
                _ => None,
            }
            .ok_or_else(|| CliError::Usage(format!("unknown config key `{key}`")))?;
        }
        if node.is_object() {
            return Err(CliError::Usage(format!("`{key}` is a section, not a key")));
        }
        *node = parse_like(node, value).map_err(|msg| CliError::Usage(format!("bad value for `{key}`: {msg}")))?;
        Ok(())
    }

    pub fn build(&self) -> CliResult<CliConfig> {
        serde_json::from_value(self.tree.clone()).map_err(|e| CliError::Usage(format!("invalid configuration: {e}")))
    }
}

fn parse_like(old: &Value, text: &str) -> Result<Value, String> {
    match old {
        Value::Bool(_) => text.parse::<bool>().map(Value::Bool).map_err(|e| e.to_string()),
        Value::Number(n) if n.is_f64() => parse_f64(text),
        Value::Number(_) => match text.parse::<u64>() {
            Ok(u) => Ok(Value::from(u)),
            Err(_) => parse_f64(text),
        },
        Value::String(_) => Ok(Value::String(text.to_string())),
        Value::Array(items) => {
            let elem = items.first().cloned().unwrap_or(Value::from(0.0));
            text.split(',')
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .map(|s| parse_like(&elem, s))
                .collect::<Result<Vec<_>, _>>()
                .map(Value::Array)
        }
        Value::Null => Ok(serde_json::from_str(text).unwrap_or_else(|_| Value::String(text.to_string()))),
        Value::Object(_) => Err("cannot assign to a section".into()),
    }
}

fn parse_f64(text: &str) -> Result<Value, String> {
    let x: f64 = text.parse().map_err(|e: std::num::ParseFloatError| e.to_string())?;
    Number::from_f64(x).map(Value::Number).ok_or_else(|| format!("{x} is not finite"))
}

/// Every leaf key with its default rendered the way help text shows it.
pub fn default_leaves() -> Vec<(String, String)> {
    fn walk(prefix: &str, v: &Value, out: &mut Vec<(String, String)>) {
        match v {
            Value::Object(map) => walk_map(prefix, map, out),
            other => out.push((prefix.to_string(), render(other))),
        }
    }
    fn walk_map(prefix: &str, map: &Map<String, Value>, out: &mut Vec<(String, String)>) {
        for (k, v) in map {
            let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
            walk(&key, v, out);
        }
    }
    let mut out = Vec::new();
    walk("", &serde_json::to_value(CliConfig::default()).expect("defaults serialize"), &mut out);
    out
}

fn render(v: &Value) -> String {
    match v {
        Value::String(s) => s.clone(),
        Value::Array(items) => items.iter().map(render).collect::<Vec<_>>().join(","),
        other => other.to_string(),
    }
}
