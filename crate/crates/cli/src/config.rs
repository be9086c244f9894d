//! Optional JSON config file: `{ "<subcommand>": { "<flag>": value } }`.
//! Flags given on the command line win over config values, which win over
//! built-in defaults.

use std::path::Path;

use serde::de::DeserializeOwned;

use rankbench_core::error::{Error, Result};

#[derive(Debug, Clone, Default)]
pub struct ConfigFile {
    root: Option<serde_json::Value>,
}

impl ConfigFile {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(ConfigFile::default());
        };
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        let root: serde_json::Value = serde_json::from_str(&text)
            .map_err(|e| Error::usage(format!("config file {}: {e}", path.display())))?;
        if !root.is_object() {
            return Err(Error::usage(format!(
                "config file {} must hold a JSON object",
                path.display()
            )));
        }
        Ok(ConfigFile { root: Some(root) })
    }

    pub fn get<T: DeserializeOwned>(&self, subcommand: &str, key: &str) -> Result<Option<T>> {
        let Some(root) = &self.root else {
            return Ok(None);
        };
        let Some(value) = root.get(subcommand).and_then(|s| s.get(key)) else {
            return Ok(None);
        };
        serde_json::from_value(value.clone())
            .map(Some)
            .map_err(|e| Error::usage(format!("config key {subcommand}.{key}: {e}")))
    }

    /// Flag value, else config value, else default.
    pub fn resolve<T: DeserializeOwned>(
        &self,
        flag: Option<T>,
        subcommand: &str,
        key: &str,
        default: T,
    ) -> Result<T> {
        match flag {
            Some(v) => Ok(v),
            None => Ok(self.get(subcommand, key)?.unwrap_or(default)),
        }
    }

    /// Flag value, else config value, else `None`.
    pub fn resolve_opt<T: DeserializeOwned>(
        &self,
        flag: Option<T>,
        subcommand: &str,
        key: &str,
    ) -> Result<Option<T>> {
        match flag {
            Some(v) => Ok(Some(v)),
            None => self.get(subcommand, key),
        }
    }
}
