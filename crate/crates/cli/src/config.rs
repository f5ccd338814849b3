//! Layered run configuration: built-in defaults, then a TOML file, then
//! command-line flags.

use std::fs;
use std::path::Path;

use anyhow::Context;
use serde::de::DeserializeOwned;
use serde::Serialize;
use toml::Value;

use crate::UsageError;

pub const RESOLVED_CONFIG_FILE: &str = "config.toml";

/// Recursively overlays `top` onto `base`. Tables merge key by key; any
/// other value replaces the one below it.
fn merge(base: &mut Value, top: Value) {
    match (base, top) {
        (Value::Table(b), Value::Table(t)) => {
            for (k, v) in t {
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

pub fn read_file(path: &Path) -> anyhow::Result<Value> {
    let text =
        fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    let value: Value = text
        .parse()
        .map_err(|e| UsageError(format!("config {}: {e}", path.display())))?;
    Ok(value)
}

/// Deserializes `defaults` with `file` layered on top.
pub fn resolve<T: Serialize + DeserializeOwned>(
    defaults: &T,
    file: Option<Value>,
) -> anyhow::Result<T> {
    let mut value = Value::try_from(defaults).context("serializing defaults")?;
    if let Some(file) = file {
        merge(&mut value, file);
    }
    value
        .try_into()
        .map_err(|e: toml::de::Error| UsageError(format!("invalid config: {}", e.message())).into())
}

/// Looks up a dotted key in a parsed file.
pub fn lookup<'a>(file: Option<&'a Value>, path: &[&str]) -> Option<&'a Value> {
    let mut cur = file?;
    for key in path {
        cur = cur.get(key)?;
    }
    Some(cur)
}

pub fn echo<T: Serialize>(dir: &Path, config: &T) -> anyhow::Result<()> {
    fs::create_dir_all(dir)?;
    let text = toml::to_string_pretty(config).context("serializing resolved config")?;
    fs::write(dir.join(RESOLVED_CONFIG_FILE), text)?;
    Ok(())
}
