//! TOML run configs with dotted-key overrides from the command line.

use std::fs;
use std::path::Path;

use ucl_core::config::RunConfig;

use crate::error::{IoContext, Result, UclError};

/// Parses `key=value`; the value is read as a TOML literal and falls back
/// to a bare string.
pub fn parse_override(s: &str) -> Result<(String, toml::Value)> {
    let (key, raw) = s.split_once('=').ok_or_else(|| UclError::Usage(format!("override `{s}` is not key=value")))?;
    let key = key.trim();
    if key.is_empty() {
        return Err(UclError::Usage(format!("override `{s}` has an empty key")));
    }
    let raw = raw.trim();
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    Ok((key.to_string(), value))
}

fn set_path(table: &mut toml::Table, key: &str, value: toml::Value) -> Result<()> {
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().expect("split yields one part");
    let mut cur = table;
    for p in parts {
        let entry = cur.entry(p.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry.as_table_mut().ok_or_else(|| UclError::Usage(format!("`{p}` in `{key}` is not a table")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

/// Builds a config from a TOML document plus overrides. Unknown keys are
/// rejected and the result is validated.
pub fn config_from_str(doc: &str, overrides: &[(String, toml::Value)]) -> Result<RunConfig> {
    let mut table: toml::Table = toml::from_str(doc).map_err(|e| UclError::Toml(e.to_string()))?;
    for (k, v) in overrides {
        set_path(&mut table, k, v.clone())?;
    }
    let cfg: RunConfig = toml::Value::Table(table).try_into().map_err(|e: toml::de::Error| UclError::Toml(e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_config(path: &Path, overrides: &[(String, toml::Value)]) -> Result<RunConfig> {
    let doc = fs::read_to_string(path).at(path)?;
    config_from_str(&doc, overrides).map_err(|e| match e {
        UclError::Toml(m) => UclError::Toml(format!("{}: {m}", path.display())),
        other => other,
    })
}

pub fn config_to_toml(cfg: &RunConfig) -> Result<String> {
    toml::to_string_pretty(cfg).map_err(|e| UclError::Toml(e.to_string()))
}
