//! Layered run settings: built-in defaults, then the `--config` file, then
//! `POWERGEAR_*` environment variables, then command-line flags.

use std::collections::BTreeMap;
use std::path::Path;

use hlspower::train::{DEFAULT_FOLDS, DEFAULT_SEEDS};
use hlspower::HecGnnConfig;

use crate::failure::Failure;

pub const ENV_PREFIX: &str = "POWERGEAR_";

#[derive(Debug, Clone, PartialEq)]
pub struct Settings {
    pub seed: u64,
    /// Ensemble seed labels; each is mixed with `seed` before use.
    pub seeds: Vec<u64>,
    pub folds: usize,
    /// Validation fraction for single-model variants.
    pub holdout: f64,
    /// Model config overrides as `key -> value` text.
    pub model: BTreeMap<String, String>,
}

impl Default for Settings {
    fn default() -> Self {
        Settings {
            seed: 0,
            seeds: DEFAULT_SEEDS.to_vec(),
            folds: DEFAULT_FOLDS,
            holdout: 0.2,
            model: BTreeMap::new(),
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, v: &str) -> Result<T, Failure> {
    v.trim()
        .parse()
        .map_err(|_| Failure::validation(format!("bad value `{v}` for `{key}`")))
}

fn parse_list(key: &str, v: &str) -> Result<Vec<u64>, Failure> {
    let seeds: Vec<u64> = v
        .split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|s| parse(key, s))
        .collect::<Result<_, _>>()?;
    if seeds.is_empty() {
        return Err(Failure::validation(format!(
            "`{key}` needs at least one seed"
        )));
    }
    Ok(seeds)
}

impl Settings {
    /// Sets one dotted key, e.g. `seed`, `train.folds` or `model.hidden`.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), Failure> {
        match key {
            "seed" => self.seed = parse(key, value)?,
            "train.seeds" => self.seeds = parse_list(key, value)?,
            "train.folds" => self.folds = parse(key, value)?,
            "train.holdout" => self.holdout = parse(key, value)?,
            _ => {
                let Some(field) = key.strip_prefix("model.") else {
                    return Err(Failure::validation(format!("unknown setting `{key}`")));
                };
                HecGnnConfig::default()
                    .set(field, value.trim())
                    .map_err(Failure::validation)?;
                self.model
                    .insert(field.to_string(), value.trim().to_string());
            }
        }
        Ok(())
    }

    pub fn merge_toml(&mut self, text: &str) -> Result<(), Failure> {
        let table: toml::Table = text
            .parse()
            .map_err(|e| Failure::validation(format!("config: {e}")))?;
        for (key, value) in table {
            match value {
                toml::Value::Table(inner) => {
                    for (k, v) in inner {
                        self.set(&format!("{key}.{k}"), &toml_text(&v)?)?;
                    }
                }
                v => self.set(&key, &toml_text(&v)?)?,
            }
        }
        Ok(())
    }

    pub fn merge_file(&mut self, path: &Path) -> Result<(), Failure> {
        let text = std::fs::read_to_string(path).map_err(|e| Failure::io(path, e))?;
        self.merge_toml(&text)
    }

    /// Applies `POWERGEAR_SEED`, `POWERGEAR_TRAIN_FOLDS`,
    /// `POWERGEAR_MODEL_HIDDEN` and the like.
    pub fn merge_env(
        &mut self,
        vars: impl IntoIterator<Item = (String, String)>,
    ) -> Result<(), Failure> {
        for (name, value) in vars {
            let Some(rest) = name.strip_prefix(ENV_PREFIX) else {
                continue;
            };
            let rest = rest.to_ascii_lowercase();
            let key = if let Some(k) = rest.strip_prefix("model_") {
                format!("model.{k}")
            } else if let Some(k) = rest.strip_prefix("train_") {
                format!("train.{k}")
            } else {
                rest
            };
            self.set(&key, &value)?;
        }
        Ok(())
    }

    /// Model config for a power kind with the overrides applied.
    pub fn model_config(&self, base: HecGnnConfig) -> Result<HecGnnConfig, Failure> {
        let mut c = base;
        for (k, v) in &self.model {
            c.set(k, v).map_err(Failure::validation)?;
        }
        c.validate()
            .map_err(|e| Failure::validation(e.to_string()))?;
        Ok(c)
    }
}

fn toml_text(v: &toml::Value) -> Result<String, Failure> {
    Ok(match v {
        toml::Value::String(s) => s.clone(),
        toml::Value::Integer(i) => i.to_string(),
        toml::Value::Float(f) => f.to_string(),
        toml::Value::Boolean(b) => b.to_string(),
        toml::Value::Array(items) => items
            .iter()
            .map(toml_text)
            .collect::<Result<Vec<_>, _>>()?
            .join(","),
        other => {
            return Err(Failure::validation(format!(
                "unsupported config value {other}"
            )))
        }
    })
}
