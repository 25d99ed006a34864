//! Config loading, `--set` overrides, output directories and run manifests.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use cim_core::data::{generate_shapes, load_image_folder, LabeledDataset, ShapesConfig, Split};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use toml::{Table, Value};

/// Marks an error that should exit with the configuration-error code.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "configuration error: {}", self.0)
    }
}

impl std::error::Error for ConfigError {}

pub fn config_err(msg: impl Into<String>) -> anyhow::Error {
    ConfigError(msg.into()).into()
}

pub fn read_table(path: Option<&Path>) -> Result<Table> {
    let Some(path) = path else { return Ok(Table::new()) };
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    text.parse::<Table>()
        .map_err(|e| config_err(format!("{}: {e}", path.display())))
}

fn parse_value(raw: &str) -> Value {
    format!("v = {raw}")
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

/// Sets a dotted key such as `train.batch_size` to a TOML literal, creating
/// intermediate tables as needed. Bare words are taken as strings.
pub fn set_key(table: &mut Table, key: &str, value: Value) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(config_err(format!("bad override key {key:?}")));
    }
    let mut cur = table;
    for p in &parts[..parts.len() - 1] {
        let entry = cur.entry(p.to_string()).or_insert_with(|| Value::Table(Table::new()));
        cur = match entry {
            Value::Table(t) => t,
            _ => return Err(config_err(format!("override {key:?} descends into a non-table value"))),
        };
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

pub fn apply_overrides(table: &mut Table, sets: &[String]) -> Result<()> {
    for s in sets {
        let (k, v) = s
            .split_once('=')
            .ok_or_else(|| config_err(format!("override {s:?} is not KEY=VALUE")))?;
        set_key(table, k.trim(), parse_value(v.trim()))?;
    }
    Ok(())
}

pub fn take<T: DeserializeOwned + Default>(table: &mut Table, key: &str) -> Result<T> {
    match table.remove(key) {
        None => Ok(T::default()),
        Some(v) => v.try_into().map_err(|e| config_err(format!("[{key}]: {e}"))),
    }
}

pub fn parse<T: DeserializeOwned>(table: Table) -> Result<T> {
    Value::Table(table)
        .try_into()
        .map_err(|e: toml::de::Error| config_err(e.to_string()))
}

/// Where images come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// `shapes` or `folder`.
    pub source: String,
    pub seed: u64,
    pub train_count: usize,
    pub val_count: usize,
    pub size: usize,
    pub num_classes: usize,
    pub train_dir: Option<PathBuf>,
    pub val_dir: Option<PathBuf>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            source: "shapes".into(),
            seed: 0,
            train_count: 1024,
            val_count: 256,
            size: 32,
            num_classes: 6,
            train_dir: None,
            val_dir: None,
        }
    }
}

impl DataConfig {
    pub fn load(&self, split: Split, downsample: usize) -> Result<LabeledDataset> {
        match self.source.as_str() {
            "shapes" => {
                let count = if split == Split::Train { self.train_count } else { self.val_count };
                let cfg = ShapesConfig::new(self.seed, count, self.size, self.num_classes)
                    .split(split)
                    .downsample(downsample);
                Ok(generate_shapes(&cfg)?)
            }
            "folder" => {
                let dir = if split == Split::Train { &self.train_dir } else { &self.val_dir };
                let dir = dir
                    .as_ref()
                    .ok_or_else(|| config_err(format!("data.{:?}_dir is required for folder data", split)))?;
                Ok(load_image_folder(dir, self.size, split)?)
            }
            other => bail!(ConfigError(format!("unknown data source {other:?}"))),
        }
    }
}

/// Refuses to reuse a non-empty directory unless `force` is set, in which
/// case the old contents are removed.
pub fn prepare_out(dir: &Path, force: bool) -> Result<()> {
    if dir.exists() {
        let non_empty = std::fs::read_dir(dir)?.next().is_some();
        if non_empty {
            if !force {
                return Err(config_err(format!(
                    "output directory {} is not empty; pass --force to overwrite",
                    dir.display()
                )));
            }
            std::fs::remove_dir_all(dir)?;
        }
    }
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config_path: Option<PathBuf>,
    pub config_hash: String,
    pub seed: u64,
    pub out_dir: PathBuf,
    pub version: String,
    pub config: serde_json::Value,
}

impl RunManifest {
    pub fn new<T: Serialize>(command: &str, config_path: Option<&Path>, config: &T, seed: u64, out: &Path) -> Result<Self> {
        let value = serde_json::to_value(config)?;
        Ok(Self {
            command: command.into(),
            config_path: config_path.map(Path::to_path_buf),
            config_hash: hash_config(&value)?,
            seed,
            out_dir: out.to_path_buf(),
            version: format!("cim {}", env!("CARGO_PKG_VERSION")),
            config: value,
        })
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(dir.join("manifest.json"), text)?;
        Ok(())
    }
}

/// SHA-256 of the canonical JSON form (object keys sorted).
pub fn hash_config(value: &serde_json::Value) -> Result<String> {
    let canonical = serde_json::to_string(&sort_keys(value))?;
    let digest = Sha256::digest(canonical.as_bytes());
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}

fn sort_keys(v: &serde_json::Value) -> serde_json::Value {
    match v {
        serde_json::Value::Object(m) => {
            let sorted: std::collections::BTreeMap<_, _> = m.iter().map(|(k, v)| (k.clone(), sort_keys(v))).collect();
            serde_json::Value::Object(sorted.into_iter().collect())
        }
        serde_json::Value::Array(a) => serde_json::Value::Array(a.iter().map(sort_keys).collect()),
        other => other.clone(),
    }
}
