//! Flat `key=value` run configuration. Blank lines and `#` comments are
//! ignored; unknown keys are rejected. Keys prefixed with `model.` override
//! fields of the preset's model configuration.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{AtdError, Result};
use crate::model::ModelConfig;

pub const KEYS: &[&str] = &[
    "preset",
    "scale",
    "seed",
    "iters",
    "batch",
    "lr",
    "beta1",
    "beta2",
    "weight_decay",
    "warmup_iters",
    "lr_milestones",
    "patch_lr",
    "checkpoint_every",
    "stage2_iters",
    "stage2_patch_lr",
    "stage2_lr",
    "data",
    "synth_count",
    "synth_size",
    "out",
    "checkpoint",
    "input",
    "hr_dir",
    "block",
    "layer",
];

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut rc = Self::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| AtdError::Config(format!("line {}: expected key=value", n + 1)))?;
            rc.set(k.trim(), v.trim())?;
        }
        Ok(rc)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&fs::read_to_string(path)?)
    }

    /// Sets `key`, replacing any earlier value.
    pub fn set(&mut self, key: &str, value: impl Into<String>) -> Result<()> {
        if !KEYS.contains(&key) && !key.starts_with("model.") {
            return Err(AtdError::Config(format!("unknown configuration key {key:?}")));
        }
        self.values.insert(key.to_string(), value.into());
        Ok(())
    }

    /// Applies `Some` overrides (CLI flags win over file values).
    pub fn override_with<V: ToString>(&mut self, key: &str, value: Option<V>) -> Result<()> {
        match value {
            Some(v) => self.set(key, v.to_string()),
            None => Ok(()),
        }
    }

    pub fn raw(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>> {
        self.raw(key)
            .map(|v| {
                v.parse()
                    .map_err(|_| AtdError::Config(format!("invalid value {v:?} for {key}")))
            })
            .transpose()
    }

    pub fn get_or<T: FromStr>(&self, key: &str, default: T) -> Result<T> {
        Ok(self.get(key)?.unwrap_or(default))
    }

    pub fn path(&self, key: &str) -> Option<PathBuf> {
        self.raw(key).map(PathBuf::from)
    }

    pub fn require_path(&self, key: &str) -> Result<PathBuf> {
        self.path(key)
            .ok_or_else(|| AtdError::Config(format!("missing required setting {key}")))
    }

    /// Applies every `model.*` override to `cfg`.
    pub fn apply_model_overrides(&self, cfg: &mut ModelConfig) -> Result<()> {
        for (k, v) in &self.values {
            if let Some(field) = k.strip_prefix("model.") {
                cfg.set(field, v)?;
            }
        }
        cfg.validate()
    }

    /// Comma-separated list of integers.
    pub fn get_list(&self, key: &str) -> Result<Option<Vec<usize>>> {
        self.raw(key)
            .map(|v| {
                v.split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(|s| {
                        s.parse()
                            .map_err(|_| AtdError::Config(format!("invalid entry {s:?} in {key}")))
                    })
                    .collect()
            })
            .transpose()
    }
}
