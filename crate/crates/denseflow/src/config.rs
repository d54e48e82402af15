//! TOML run configuration.
//!
//! `[model]` and `[train]` each start from a preset (`preset = "..."`, by
//! default the desk preset) and override any subset of its fields:
//!
//! ```toml
//! checkpoint_every = 250
//!
//! [model]
//! preset = "DenseFlow-12-4"
//! growth_rate = 6
//! coupling = { kind = "glow" }
//!
//! [train]
//! preset = "desk"
//! lr = 5e-4
//! ```

use std::path::Path;

use denseflow_core::flow::FlowConfig;
use denseflow_core::trainer::TrainConfig;
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::error::{Error, Result};

/// Fully resolved configuration, as stored in checkpoints.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Steps between periodic checkpoints; 0 writes only the final one.
    pub checkpoint_every: u64,
    pub model: FlowConfig,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig { checkpoint_every: 500, model: FlowConfig::desk(), train: TrainConfig::desk() }
    }
}

pub fn train_preset(name: &str) -> Option<TrainConfig> {
    match name.to_ascii_lowercase().as_str() {
        "desk" => Some(TrainConfig::desk()),
        "imagenet32" => Some(TrainConfig::imagenet32()),
        "imagenet64" => Some(TrainConfig::imagenet64()),
        "celeba" => Some(TrainConfig::celeba()),
        "cifar10" => Some(TrainConfig::cifar10()),
        _ => None,
    }
}

pub const TRAIN_PRESETS: [&str; 5] = ["desk", "imagenet32", "imagenet64", "celeba", "cifar10"];

fn merge(base: &mut Table, over: Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(Value::Table(b)), Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

fn to_table<T: Serialize>(v: &T) -> Table {
    match Value::try_from(v) {
        Ok(Value::Table(t)) => t,
        _ => unreachable!("configs serialize to tables"),
    }
}

fn section<T, F>(root: &mut Table, key: &str, default: T, lookup: F, names: &[&str]) -> Result<T>
where
    T: Serialize + for<'de> Deserialize<'de>,
    F: Fn(&str) -> Option<T>,
{
    let mut over = match root.remove(key) {
        None => Table::new(),
        Some(Value::Table(t)) => t,
        Some(_) => return Err(Error::Config(format!("`{}` must be a table", key))),
    };
    let base = match over.remove("preset") {
        None => default,
        Some(Value::String(name)) => lookup(&name).ok_or_else(|| {
            Error::Config(format!("unknown {} preset `{}` (known: {})", key, name, names.join(", ")))
        })?,
        Some(_) => return Err(Error::Config(format!("`{}.preset` must be a string", key))),
    };
    let mut t = to_table(&base);
    merge(&mut t, over);
    Value::Table(t).try_into().map_err(|e: toml::de::Error| Error::Config(format!("[{}]: {}", key, e.message())))
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let mut root: Table = text.parse().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        let model = section(&mut root, "model", FlowConfig::desk(), FlowConfig::preset, &FlowConfig::preset_names())?;
        let train = section(&mut root, "train", TrainConfig::desk(), train_preset, &TRAIN_PRESETS)?;
        let checkpoint_every = match root.remove("checkpoint_every") {
            None => RunConfig::default().checkpoint_every,
            Some(Value::Integer(n)) if n >= 0 => n as u64,
            Some(v) => return Err(Error::Config(format!("checkpoint_every must be a non-negative integer, got {}", v))),
        };
        if let Some(k) = root.keys().next() {
            return Err(Error::Config(format!("unknown key `{}`", k)));
        }
        let cfg = RunConfig { checkpoint_every, model, train };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {}", path.display(), m)),
            e => e,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        Ok(())
    }

    /// Canonical TOML text; `from_toml(to_toml())` is the identity.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configs serialize to TOML")
    }
}
