//! Experiment configuration file: network, training and data sections in
//! one JSON document, with dotted-key overrides.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::backbone::NetworkConfig;
use crate::error::{Error, Result};
use crate::train::{DataConfig, TrainConfig};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub network: NetworkConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.network.validate_for_block(self.data.block_points)?;
        if !(self.data.cube_size > 0.0) {
            return Err(Error::contract("cube_size must be positive"));
        }
        Ok(())
    }

    /// Applies `section.key=value`; see [`apply_override`].
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        apply_override(self, assignment)
    }
}

/// Sets the dotted field `key` of any serde document from `key=value`.
/// The key must already exist; the value is read as JSON, falling back to
/// a plain string.
pub fn apply_override<T: Serialize + DeserializeOwned>(target: &mut T, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::contract(format!("override '{assignment}' is not key=value")))?;
    let key = key.trim();
    let value: Value = serde_json::from_str(raw.trim()).unwrap_or_else(|_| Value::String(raw.trim().to_string()));
    let mut doc = serde_json::to_value(&*target)?;
    let mut slot = &mut doc;
    for part in key.split('.') {
        slot = slot
            .as_object_mut()
            .and_then(|m| m.get_mut(part))
            .ok_or_else(|| Error::contract(format!("unknown config key '{key}'")))?;
    }
    *slot = value;
    *target = serde_json::from_value(doc).map_err(|e| Error::contract(format!("bad value for '{key}': {e}")))?;
    Ok(())
}
