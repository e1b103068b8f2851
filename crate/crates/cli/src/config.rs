//! Run configuration: one JSON document covering data generation, the
//! tracker, and training, with dotted-key overrides (`--set a.b.c=v`).

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use stmd_core::data::{BenchmarkConfig, TrackerConfig};
use stmd_core::train::TrainConfig;

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct AppConfig {
    /// Directory holding `train/` and `eval/` sequence directories.
    pub data_dir: Option<PathBuf>,
    pub benchmark: BenchmarkConfig,
    pub tracker: TrackerConfig,
    pub train: TrainConfig,
    /// Dataset shrink factor used by `ablate` so each variant trains within
    /// a desk-scale budget (1.0 = full size).
    pub ablation_scale: f64,
}

impl Default for AppConfig {
    fn default() -> Self {
        AppConfig {
            data_dir: None,
            benchmark: BenchmarkConfig::default(),
            tracker: TrackerConfig::default(),
            train: TrainConfig::default(),
            ablation_scale: 0.25,
        }
    }
}

impl AppConfig {
    pub fn validate(&self) -> Result<()> {
        self.benchmark.validate()?;
        self.tracker.validate()?;
        if !(self.ablation_scale > 0.0 && self.ablation_scale <= 1.0) {
            bail!("ablation_scale must be in (0, 1]");
        }
        Ok(())
    }
}

/// Load the config file (or defaults), apply `--seed` and `--set` overrides,
/// and validate. Unknown keys and type mismatches are rejected.
pub fn load_config(
    path: Option<&Path>,
    seed: Option<u64>,
    sets: &[String],
) -> Result<AppConfig> {
    let mut value: serde_json::Value = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .with_context(|| format!("reading config {}", p.display()))?;
            serde_json::from_str(&text)
                .with_context(|| format!("parsing config {}", p.display()))?
        }
        None => serde_json::to_value(AppConfig::default()).expect("default config serializes"),
    };
    // A partial config file is allowed: merge it over the defaults.
    let mut base = serde_json::to_value(AppConfig::default()).expect("default serializes");
    merge(&mut base, value.take());
    let mut value = base;

    for kv in sets {
        let (key, raw) = kv
            .split_once('=')
            .with_context(|| format!("--set {kv:?} is not key=value"))?;
        apply_override(&mut value, key, raw)?;
    }

    let mut cfg: AppConfig = serde_json::from_value(value).context("config does not match the schema")?;
    if let Some(seed) = seed {
        cfg.benchmark.seed = seed;
        cfg.tracker.seed = seed;
        cfg.train.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn merge(base: &mut serde_json::Value, patch: serde_json::Value) {
    match (base, patch) {
        (serde_json::Value::Object(b), serde_json::Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Set one dotted key. The key must already exist in the schema and the new
/// value must parse to the same JSON type.
fn apply_override(root: &mut serde_json::Value, key: &str, raw: &str) -> Result<()> {
    let mut cur = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = cur
            .as_object_mut()
            .with_context(|| format!("config key {key:?}: {:?} is not an object", parts[..i].join(".")))?;
        cur = obj
            .get_mut(*part)
            .with_context(|| format!("unknown config key {key:?} (no field {part:?})"))?;
        if i + 1 == parts.len() {
            let new: serde_json::Value = serde_json::from_str(raw)
                .unwrap_or_else(|_| serde_json::Value::String(raw.to_string()));
            let compatible = match (&*cur, &new) {
                (serde_json::Value::Null, _) => true,
                (_, serde_json::Value::Null) => true,
                (serde_json::Value::Bool(_), serde_json::Value::Bool(_)) => true,
                (serde_json::Value::Number(_), serde_json::Value::Number(_)) => true,
                (serde_json::Value::String(_), serde_json::Value::String(_)) => true,
                (serde_json::Value::Array(_), serde_json::Value::Array(_)) => true,
                (serde_json::Value::Object(_), serde_json::Value::Object(_)) => true,
                _ => false,
            };
            if !compatible {
                bail!(
                    "config key {key:?} expects a value like {cur}, got {raw:?}"
                );
            }
            *cur = new;
        }
    }
    Ok(())
}
