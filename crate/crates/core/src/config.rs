//! Run configuration: one TOML document covering every module, plus
//! dotted-path command-line overrides (`--set train.base_lr=0.02`).
//!
//! Missing keys take documented defaults; unknown keys are errors naming
//! the key. The fully resolved document is echoed into run outputs so a
//! run is reproducible from the echo and the seed alone.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backbone::BackboneConfig;
use crate::data::InputNorm;
use crate::eval::Top1Mode;
use crate::stream::DEFAULT_CONFIDENCE_THRESHOLD;
use crate::synth::SyntheticDatasetSpec;
use crate::train::TrainConfig;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSettings {
    pub top1: Top1Mode,
}

impl Default for EvalSettings {
    fn default() -> Self {
        EvalSettings { top1: Top1Mode::Balanced }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StreamSettings {
    /// Rejection threshold on the best cosine; below it the prediction
    /// carries no class.
    pub threshold: f64,
}

impl Default for StreamSettings {
    fn default() -> Self {
        StreamSettings { threshold: DEFAULT_CONFIDENCE_THRESHOLD }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub backbone: BackboneConfig,
    pub train: TrainConfig,
    pub synth: SyntheticDatasetSpec,
    pub norm: InputNorm,
    pub eval: EvalSettings,
    pub stream: StreamSettings,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            backbone: BackboneConfig::table_default(),
            train: TrainConfig::default(),
            synth: SyntheticDatasetSpec::default(),
            norm: InputNorm::default(),
            eval: EvalSettings::default(),
            stream: StreamSettings::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.train.validate()?;
        self.synth.validate()?;
        if !(-1.0..=1.0).contains(&self.stream.threshold) {
            return Err(Error::Config(format!(
                "stream threshold must be a cosine in [-1, 1], got {}",
                self.stream.threshold
            )));
        }
        for (name, v) in [("mean", self.norm.mean), ("std", self.norm.std)] {
            if v.iter().any(|x| !x.is_finite()) || (name == "std" && v.iter().any(|&x| x <= 0.0)) {
                return Err(Error::Config(format!("bad input norm {name} {v:?}")));
            }
        }
        Ok(())
    }

    /// Resolved echo for run outputs.
    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }
}

/// Loads the optional file, applies overrides in order (later wins), then
/// deserializes strictly.
pub fn parse_config(path: Option<&Path>, overrides: &[String]) -> Result<RunConfig> {
    let mut table = match path {
        Some(p) => std::fs::read_to_string(p)
            .map_err(|e| Error::Config(format!("reading {}: {e}", p.display())))?
            .parse::<toml::Table>()
            .map_err(|e| Error::Config(format!("parsing {}: {e}", p.display())))?,
        None => toml::Table::new(),
    };
    for spec in overrides {
        apply_override(&mut table, spec)?;
    }
    let config: RunConfig = toml::Value::Table(table)
        .try_into()
        .map_err(|e| Error::Config(e.to_string()))?;
    config.validate()?;
    Ok(config)
}

/// Applies one `dotted.path=value` override, creating intermediate tables.
pub fn apply_override(table: &mut toml::Table, spec: &str) -> Result<()> {
    let (path, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override '{spec}' is not key=value")))?;
    let path = path.trim();
    let keys: Vec<&str> = path.split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(Error::Config(format!("override '{spec}' has an empty path segment")));
    }
    let mut current = table;
    for key in &keys[..keys.len() - 1] {
        current = current
            .entry(key.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| {
                Error::Config(format!("override path '{path}' crosses non-table key '{key}'"))
            })?;
    }
    current.insert(keys[keys.len() - 1].to_string(), parse_value(raw.trim()));
    Ok(())
}

/// Parses the right-hand side as a TOML literal, falling back to a bare
/// string (`--set train.seed=3` and `--set eval.top1=plain` both work).
fn parse_value(raw: &str) -> toml::Value {
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}
