//! Run configuration: one TOML file plus `key=value` overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluation::Weighting;
use crate::model::ModelConfig;
use crate::parsing::ParserConfig;
use crate::training::TrainConfig;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub corpus: Option<PathBuf>,
    /// Precomputed fold plan; planned from `cv` settings when absent.
    pub folds: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CvConfig {
    pub n_folds: usize,
    pub fold_seed: u64,
    pub jobs: usize,
}

impl Default for CvConfig {
    fn default() -> Self {
        CvConfig {
            n_folds: 5,
            fold_seed: 0,
            jobs: 1,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub weighting: Weighting,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub parser: ParserConfig,
    pub eval: EvalConfig,
    pub cv: CvConfig,
}

fn parse_value(raw: &str) -> toml::Value {
    match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("key v"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

/// Finds every dotted path in `table` whose last segment is `key`.
fn find_paths(table: &toml::Table, key: &str, prefix: &str, out: &mut Vec<String>) {
    for (k, v) in table {
        let path = if prefix.is_empty() {
            k.clone()
        } else {
            format!("{prefix}.{k}")
        };
        if k == key {
            out.push(path.clone());
        }
        if let toml::Value::Table(inner) = v {
            find_paths(inner, key, &path, out);
        }
    }
}

fn set_path(table: &mut toml::Table, path: &str, value: toml::Value) -> Result<()> {
    let mut parts: Vec<&str> = path.split('.').collect();
    let last = parts
        .pop()
        .filter(|s| !s.is_empty())
        .ok_or_else(|| Error::Config(format!("bad key '{path}'")))?;
    let mut cur = table;
    for p in parts {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("'{p}' in '{path}' is not a section")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

/// Every settable key, optional ones included (TOML drops `None` fields).
fn key_schema() -> Result<toml::Table> {
    let mut full = Config::default();
    full.data.corpus = Some(PathBuf::new());
    full.data.folds = Some(PathBuf::new());
    full.model.head_hidden = Some(0);
    full.train.max_steps = Some(0);
    full.parser.inference_k = Some(0);
    toml::Table::try_from(full).map_err(|e| Error::Config(e.to_string()))
}

impl Config {
    /// Parses TOML text and applies `key=value` overrides. A key without a
    /// dot is resolved to the unique field of that name in any section.
    pub fn from_toml_str(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        let defaults = key_schema()?;
        for ov in overrides {
            let (key, raw) = ov
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override '{ov}' is not KEY=VALUE")))?;
            let key = key.trim();
            let path = if key.contains('.') {
                key.to_string()
            } else {
                let mut hits = Vec::new();
                find_paths(&defaults, key, "", &mut hits);
                find_paths(&table, key, "", &mut hits);
                hits.sort();
                hits.dedup();
                match hits.as_slice() {
                    [one] => one.clone(),
                    [] => {
                        return Err(Error::Config(format!(
                            "unknown key '{key}' (use section.key)"
                        )))
                    }
                    many => {
                        return Err(Error::Config(format!("key '{key}' is ambiguous: {many:?}")))
                    }
                }
            };
            set_path(&mut table, &path, parse_value(raw.trim()))?;
        }
        let cfg: Config = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?,
            None => String::new(),
        };
        Self::from_toml_str(&text, overrides)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.parser.validate()?;
        if self.cv.n_folds < 2 {
            return Err(Error::Config("cv.n_folds must be at least 2".into()));
        }
        if self.cv.jobs == 0 {
            return Err(Error::Config("cv.jobs must be at least 1".into()));
        }
        Ok(())
    }
}
