//! Effective configuration: defaults, then `--config` file, then explicit flags.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Value};

use crate::CliError;

fn merge(into: &mut Map<String, Value>, from: Map<String, Value>) {
    for (k, v) in from {
        into.insert(k, v);
    }
}

fn as_object(v: Value, what: &str) -> Result<Map<String, Value>, CliError> {
    match v {
        Value::Object(m) => Ok(m),
        _ => Err(CliError::Usage(format!("{what} must be a table of keys"))),
    }
}

/// Read a TOML config, or a JSON run manifest whose `config` member is reused.
pub fn read_file(path: &Path) -> Result<Map<String, Value>, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
    let is_json = path.extension().is_some_and(|e| e == "json");
    let value: Value = if is_json {
        let v: Value = serde_json::from_str(&text)
            .map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
        match v.get("config") {
            Some(c) if v.get("subcommand").is_some() => c.clone(),
            _ => v,
        }
    } else {
        let t: toml::Table = toml::from_str(&text)
            .map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
        serde_json::to_value(t).map_err(|e| CliError::Usage(e.to_string()))?
    };
    as_object(value, "config file")
}

pub fn resolve<T, F>(file: Option<&Path>, flags: &F) -> Result<T, CliError>
where
    T: Serialize + DeserializeOwned + Default,
    F: Serialize,
{
    let mut base = as_object(
        serde_json::to_value(T::default()).map_err(|e| CliError::Runtime(e.to_string()))?,
        "defaults",
    )?;
    if let Some(path) = file {
        merge(&mut base, read_file(path)?);
    }
    let flags = as_object(
        serde_json::to_value(flags).map_err(|e| CliError::Runtime(e.to_string()))?,
        "flags",
    )?;
    merge(&mut base, flags);
    serde_json::from_value(Value::Object(base)).map_err(|e| CliError::Usage(format!("invalid configuration: {e}")))
}
