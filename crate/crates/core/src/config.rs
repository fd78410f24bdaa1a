//! Run configuration files and presets.
//!
//! A run config is TOML with a `version` key. Two optional preset names fill
//! in defaults before the file's own values are applied:
//!
//! * `schedule` (`bsd68`, `mouse`, `flywing`, `convallaria`, `desk`): network
//!   size, training schedule and PSNR range convention.
//! * `method` (e.g. `n2v-default`, `n2v2-median`): the architectural switches
//!   and the replacement strategy.
//!
//! Every value written in the file wins over both presets, and expanded
//! configs keep the preset names, so expanding an expanded config changes
//! nothing. Seeds left out are derived from the top-level `seed`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::error::{Error, Result};
use crate::eval::RangePolicy;
use crate::masking::{ReplacementKind, ReplacementStrategy};
use crate::model::{ModelConfig, PoolingKind};
use crate::noise::NoiseSpec;
use crate::rng::derive_seed;
use crate::train::TrainConfig;

pub const CONFIG_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSettings {
    pub range: RangePolicy,
    pub tile: usize,
    pub margin: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataPaths {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub val: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_noisy: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_gt: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub version: u32,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub schedule: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub method: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    #[serde(default)]
    pub data: DataPaths,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noise: Option<NoiseSpec>,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalSettings,
}

pub const SCHEDULES: [&str; 5] = ["bsd68", "mouse", "flywing", "convallaria", "desk"];

pub const METHODS: [&str; 11] = [
    "n2v-default",
    "n2v-uwocp",
    "n2v-nores-uwocp",
    "n2v-nores-mean",
    "n2v-nores-median",
    "n2v-bp-uwcp",
    "n2v-nosk-uwcp",
    "n2v2-uwcp",
    "n2v2-uwocp",
    "n2v2-mean",
    "n2v2-median",
];

/// Architecture and replacement strategy of a method preset.
pub fn method_preset(name: &str) -> Option<(bool, bool, PoolingKind, ReplacementKind)> {
    use PoolingKind::*;
    use ReplacementKind::*;
    // (residual, top_skip, pooling, strategy)
    Some(match name {
        "n2v-default" => (true, true, Max, Uwcp),
        "n2v-uwocp" => (true, true, Max, Uwocp),
        "n2v-nores-uwocp" => (false, true, Max, Uwocp),
        "n2v-nores-mean" => (false, true, Max, Mean),
        "n2v-nores-median" => (false, true, Max, Median),
        "n2v-bp-uwcp" => (true, true, MaxBlur, Uwcp),
        "n2v-nosk-uwcp" => (true, false, Max, Uwcp),
        "n2v2-uwcp" => (false, false, MaxBlur, Uwcp),
        "n2v2-uwocp" => (false, false, MaxBlur, Uwocp),
        "n2v2-mean" => (false, false, MaxBlur, Mean),
        "n2v2-median" => (false, false, MaxBlur, Median),
        _ => return None,
    })
}

/// Network size, training schedule and evaluation settings of a schedule
/// preset.
pub fn schedule_preset(name: &str) -> Option<(ModelConfig, TrainConfig, EvalSettings)> {
    let eval = |range| EvalSettings {
        range,
        tile: 256,
        margin: 64,
    };
    Some(match name {
        "bsd68" => (
            ModelConfig::n2v(2, 96),
            TrainConfig::bsd68(),
            eval(RangePolicy::BSD68),
        ),
        "mouse" => (
            ModelConfig::n2v(3, 64),
            TrainConfig::mouse(),
            eval(RangePolicy::GroundTruth),
        ),
        "flywing" => (
            ModelConfig::n2v(3, 64),
            TrainConfig::flywing(),
            eval(RangePolicy::GroundTruth),
        ),
        "convallaria" => (
            ModelConfig::n2v(3, 64),
            TrainConfig::convallaria(),
            eval(RangePolicy::GroundTruth),
        ),
        "desk" => (
            ModelConfig::n2v(2, 16),
            TrainConfig::desk(),
            EvalSettings {
                range: RangePolicy::GroundTruth,
                tile: 128,
                margin: 48,
            },
        ),
        _ => return None,
    })
}

fn to_table<T: Serialize>(v: &T) -> Table {
    Table::try_from(v).expect("preset serializes to a table")
}

/// Recursively overlays `top` onto `base`.
fn merge(base: &mut Table, top: Table) {
    for (k, v) in top {
        match (base.get_mut(&k), v) {
            (Some(Value::Table(b)), Value::Table(t)) => merge(b, t),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

fn string_key(t: &Table, key: &str) -> Result<Option<String>> {
    match t.get(key) {
        None => Ok(None),
        Some(Value::String(s)) => Ok(Some(s.clone())),
        Some(_) => Err(Error::config(key, "must be a string")),
    }
}

/// Parses a dotted `key=value` override; the value is read as a TOML value
/// when possible and as a plain string otherwise.
pub fn parse_override(text: &str) -> Result<(Vec<String>, Value)> {
    let (key, raw) = text
        .split_once('=')
        .ok_or_else(|| Error::config(text, "override must look like key=value"))?;
    let path: Vec<String> = key.trim().split('.').map(str::to_string).collect();
    if path.iter().any(String::is_empty) {
        return Err(Error::config(key, "empty key segment"));
    }
    let raw = raw.trim();
    let value = format!("v = {raw}")
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()));
    Ok((path, value))
}

pub fn set_path(table: &mut Table, path: &[String], value: Value) -> Result<()> {
    let (last, parents) = path.split_last().expect("non-empty key path");
    let mut cur = table;
    for (i, seg) in parents.iter().enumerate() {
        let entry = cur
            .entry(seg.clone())
            .or_insert_with(|| Value::Table(Table::new()));
        cur = match entry {
            Value::Table(t) => t,
            _ => return Err(Error::config(path[..=i].join("."), "is not a table")),
        };
    }
    cur.insert(last.clone(), value);
    Ok(())
}

impl RunConfig {
    /// Expands presets and derived seeds, then validates.
    pub fn expand(user: Table) -> Result<RunConfig> {
        match user.get("version") {
            None => return Err(Error::config("version", "missing (expected 1)")),
            Some(Value::Integer(v)) if *v == CONFIG_VERSION as i64 => {}
            Some(v) => {
                return Err(Error::config(
                    "version",
                    format!("unsupported value {v} (expected {CONFIG_VERSION})"),
                ))
            }
        }
        let seed = match user.get("seed") {
            None => 0,
            Some(Value::Integer(s)) if *s >= 0 => *s as u64,
            Some(_) => return Err(Error::config("seed", "must be a non-negative integer")),
        };
        let schedule = string_key(&user, "schedule")?;
        let method = string_key(&user, "method")?;

        let mut base = Table::new();
        base.insert("seed".into(), Value::Integer(seed as i64));
        let (model, mut train, eval) = schedule_preset(schedule.as_deref().unwrap_or("desk"))
            .ok_or_else(|| {
                Error::config(
                    "schedule",
                    format!(
                        "unknown preset {:?}; known: {}",
                        schedule.as_deref().unwrap_or(""),
                        SCHEDULES.join(", ")
                    ),
                )
            })?;
        let mut model = model;
        if let Some(m) = &method {
            let (residual, top_skip, pooling, kind) = method_preset(m).ok_or_else(|| {
                Error::config(
                    "method",
                    format!("unknown preset {m:?}; known: {}", METHODS.join(", ")),
                )
            })?;
            model.residual = residual;
            model.top_skip = top_skip;
            model.pooling = pooling;
            train.strategy = ReplacementStrategy::new(kind);
        }
        train.seed = derive_seed(seed, "train");
        base.insert("model".into(), Value::Table(to_table(&model)));
        base.insert("train".into(), Value::Table(to_table(&train)));
        base.insert("eval".into(), Value::Table(to_table(&eval)));
        if let Some(Value::Table(noise)) = user.get("noise") {
            if !noise.contains_key("seed") {
                let mut t = Table::new();
                t.insert(
                    "seed".into(),
                    Value::Integer(derive_seed(seed, "noise") as i64),
                );
                base.insert("noise".into(), Value::Table(t));
            }
        }
        merge(&mut base, user);
        let cfg: RunConfig = serde_path_to_error::deserialize(base).map_err(|e| {
            let path = e.path().to_string();
            let message = e.into_inner().to_string();
            let first = message.lines().next().unwrap_or_default().to_string();
            Error::config(if path == "." { "config".into() } else { path }, first)
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_toml(text: &str) -> Result<RunConfig> {
        Self::from_toml_with(text, &[])
    }

    /// Parses `text`, applies `key=value` overrides on top, then expands.
    pub fn from_toml_with(text: &str, overrides: &[String]) -> Result<RunConfig> {
        let mut table: Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::config("config", e.message().to_string()))?;
        for o in overrides {
            let (path, value) = parse_override(o)?;
            set_path(&mut table, &path, value)?;
        }
        Self::expand(table)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_with(&text, overrides)
    }

    /// Minimal config naming only presets, for command-line use.
    pub fn from_presets(
        schedule: Option<&str>,
        method: Option<&str>,
        seed: u64,
        overrides: &[String],
    ) -> Result<RunConfig> {
        let mut t = Table::new();
        t.insert("version".into(), Value::Integer(CONFIG_VERSION as i64));
        t.insert("seed".into(), Value::Integer(seed as i64));
        if let Some(s) = schedule {
            t.insert("schedule".into(), Value::String(s.into()));
        }
        if let Some(m) = method {
            t.insert("method".into(), Value::String(m.into()));
        }
        for o in overrides {
            let (path, value) = parse_override(o)?;
            set_path(&mut t, &path, value)?;
        }
        Self::expand(t)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate(&self.model)?;
        let m = self.model.size_multiple();
        if self.eval.tile == 0 || !self.eval.tile.is_multiple_of(m) {
            return Err(Error::config(
                "eval.tile",
                format!("must be a positive multiple of {m} (2^depth)"),
            ));
        }
        if let Some(noise) = &self.noise {
            noise
                .validate()
                .map_err(|e| Error::config("noise", e.to_string()))?;
        }
        Ok(())
    }
}
