//! Layered experiment configuration.
//!
//! Values are resolved in increasing precedence: built-in defaults, the TOML
//! file, `SHARELAB_<SECTION>_<KEY>` environment variables, then `--set
//! section.key=value` overrides. Environment variables exist for every scalar
//! key of the default configuration, e.g. `SHARELAB_TRAIN_LR_PEAK` or
//! `SHARELAB_MODEL_SHARING_MODE`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::data::TaskConfig;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::training::TrainConfig;

pub const ENV_PREFIX: &str = "SHARELAB_";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: PathBuf,
    /// Write per-snapshot checkpoint files.
    pub checkpoints: bool,
    /// Greedy-decode the test split after training.
    pub decode_test: bool,
}

impl Default for OutputConfig {
    fn default() -> Self {
        OutputConfig {
            dir: PathBuf::from("runs/default"),
            checkpoints: true,
            decode_test: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub task: TaskConfig,
    pub output: OutputConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            model: ModelConfig::toy(),
            train: TrainConfig::default(),
            task: TaskConfig::toy_reverse(),
            output: OutputConfig::default(),
        }
    }
}

fn to_table<T: Serialize>(value: &T) -> Table {
    Table::try_from(value).expect("config types serialize to a table")
}

fn merge(base: &mut Table, overlay: Table) {
    for (k, v) in overlay {
        match (base.get_mut(&k), v) {
            (Some(Value::Table(b)), Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// Parses an override value as a TOML literal, falling back to a bare string.
fn parse_value(text: &str) -> Value {
    let text = text.trim();
    match format!("v = {text}").parse::<Table>() {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => Value::String(text.to_string()),
    }
}

fn set_path(table: &mut Table, path: &str, value: Value) -> Result<()> {
    let parts: Vec<&str> = path.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::config(path, "malformed key"));
    }
    let mut cur = table;
    for part in &parts[..parts.len() - 1] {
        cur = match cur
            .entry(part.to_string())
            .or_insert_with(|| Value::Table(Table::new()))
        {
            Value::Table(t) => t,
            _ => return Err(Error::config(path, format!("`{part}` is not a section"))),
        };
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

fn scalar_paths(table: &Table, prefix: &str, out: &mut Vec<String>) {
    for (k, v) in table {
        let path = if prefix.is_empty() {
            k.clone()
        } else {
            format!("{prefix}.{k}")
        };
        match v {
            Value::Table(t) => scalar_paths(t, &path, out),
            Value::Array(_) => {}
            _ => out.push(path),
        }
    }
}

/// Environment variable that overrides `path`, e.g. `train.lr_peak` →
/// `SHARELAB_TRAIN_LR_PEAK`.
pub fn env_var_name(path: &str) -> String {
    format!("{ENV_PREFIX}{}", path.replace('.', "_").to_uppercase())
}

/// Dotted paths of every scalar key in the default configuration.
pub fn scalar_keys() -> Vec<String> {
    let mut out = Vec::new();
    scalar_paths(&to_table(&ExperimentConfig::default()), "", &mut out);
    out
}

impl ExperimentConfig {
    /// Resolves a configuration from optional TOML text, an environment
    /// lookup, and `key=value` overrides, then validates it.
    pub fn resolve(
        file_text: Option<&str>,
        env: impl Fn(&str) -> Option<String>,
        overrides: &[String],
    ) -> Result<Self> {
        Self::resolve_from(&ExperimentConfig::default(), file_text, env, overrides)
    }

    /// [`resolve`](Self::resolve) with `base` in place of the built-in defaults.
    pub fn resolve_from(
        base: &ExperimentConfig,
        file_text: Option<&str>,
        env: impl Fn(&str) -> Option<String>,
        overrides: &[String],
    ) -> Result<Self> {
        let mut table = to_table(base);
        if let Some(text) = file_text {
            let file: Table = text.parse().map_err(|e: toml::de::Error| {
                Error::config("config file", e.message().to_string())
            })?;
            merge(&mut table, file);
        }
        for path in scalar_keys() {
            if let Some(v) = env(&env_var_name(&path)) {
                set_path(&mut table, &path, parse_value(&v))?;
            }
        }
        for item in overrides {
            let (key, value) = item.split_once('=').ok_or_else(|| {
                Error::config(item.as_str(), "override must look like section.key=value")
            })?;
            set_path(&mut table, key.trim(), parse_value(value))?;
        }
        let cfg = Self::from_table(table)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads `path` and resolves it against the process environment.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        Self::load_from(&ExperimentConfig::default(), path, overrides)
    }

    pub fn load_from(
        base: &ExperimentConfig,
        path: Option<&Path>,
        overrides: &[String],
    ) -> Result<Self> {
        let text = match path {
            Some(p) => Some(fs::read_to_string(p).map_err(|e| Error::io(p, e))?),
            None => None,
        };
        Self::resolve_from(base, text.as_deref(), |k| std::env::var(k).ok(), overrides)
    }

    fn from_table(table: Table) -> Result<Self> {
        Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::config(error_field(&e), e.message().to_string()))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let table: Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::config("config file", e.message().to_string()))?;
        Self::from_table(table)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Field-level and cross-field checks.
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.task.validate()?;
        if self.task.vocab > self.model.vocab {
            return Err(Error::config(
                "task.vocab",
                format!(
                    "task uses {} ids but the model has {}",
                    self.task.vocab, self.model.vocab
                ),
            ));
        }
        if self.train.batch_tokens < self.task.max_len {
            return Err(Error::config(
                "train.batch_tokens",
                format!(
                    "must hold the longest target ({} tokens)",
                    self.task.max_len
                ),
            ));
        }
        if self.task.valid_size == 0 {
            return Err(Error::config("task.valid_size", "must be positive"));
        }
        Ok(())
    }
}

fn error_field(e: &toml::de::Error) -> String {
    let msg = e.message();
    msg.split('`')
        .nth(1)
        .map(str::to_string)
        .unwrap_or_else(|| "config".to_string())
}
