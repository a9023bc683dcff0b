//! Flat settings files merged with command-line overrides.
//!
//! A command's settings start from the type's defaults, take every key of the
//! `--config` file, then every override. Overrides come from dedicated flags
//! and from `--set key=value`, where the value is read as a TOML value and
//! falls back to a bare string.

use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use toml::{Table, Value};

use crate::error::{CliError, CliResult};

#[derive(Debug, Default)]
pub struct Overrides(Table);

impl Overrides {
    pub fn from_pairs(pairs: &[String]) -> CliResult<Self> {
        let mut table = Table::new();
        for pair in pairs {
            let (key, raw) = pair
                .split_once('=')
                .ok_or_else(|| CliError::Usage(format!("--set expects key=value, got {pair:?}")))?;
            let key = key.trim();
            if key.is_empty() {
                return Err(CliError::Usage(format!("--set has an empty key in {pair:?}")));
            }
            table.insert(key.to_string(), parse_value(raw.trim()));
        }
        Ok(Self(table))
    }

    pub fn put(&mut self, key: &str, value: impl Into<Value>) {
        self.0.insert(key.to_string(), value.into());
    }

    pub fn put_opt<V: Into<Value>>(&mut self, key: &str, value: Option<V>) {
        if let Some(v) = value {
            self.put(key, v);
        }
    }

    /// TOML integers are signed 64-bit.
    pub fn put_int<V: TryInto<i64> + Copy + std::fmt::Display>(&mut self, key: &str, value: Option<V>) -> CliResult<()> {
        if let Some(v) = value {
            let i = v
                .try_into()
                .map_err(|_| CliError::Usage(format!("{key} = {v} does not fit a signed 64-bit integer")))?;
            self.put(key, i);
        }
        Ok(())
    }

    pub fn put_paths(&mut self, key: &str, paths: &[PathBuf]) {
        if !paths.is_empty() {
            let list = paths.iter().map(|p| Value::String(p.display().to_string())).collect::<Vec<_>>();
            self.put(key, list);
        }
    }
}

fn parse_value(raw: &str) -> Value {
    toml::from_str::<Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

/// Builds `T` from an optional config file and the overrides.
pub fn resolve<T: DeserializeOwned>(config: Option<&Path>, overrides: Overrides) -> CliResult<T> {
    let mut table = match config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
            // validate the file alone first so errors point at its lines
            attnpred::config::parse_flat::<T>(&text)
                .map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
            toml::from_str::<Table>(&text).map_err(|e| CliError::Usage(e.to_string()))?
        }
        None => Table::new(),
    };
    table.extend(overrides.0);
    table
        .try_into()
        .map_err(|e: toml::de::Error| CliError::Usage(format!("invalid setting: {}", e.to_string().trim_end())))
}
