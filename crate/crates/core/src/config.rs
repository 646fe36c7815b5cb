//! `key=value` overrides on top of JSON-backed configuration structs.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::Value;

use crate::error::{Error, Result};

/// Splits `key=value`; the key may be dotted to reach nested objects.
pub fn parse_override(item: &str) -> Result<(Vec<String>, Value)> {
    let (key, raw) = item
        .split_once('=')
        .ok_or_else(|| Error::InvalidConfig(format!("override '{item}' is not of the form key=value")))?;
    let key = key.trim();
    if key.is_empty() || key.split('.').any(str::is_empty) {
        return Err(Error::InvalidConfig(format!("override '{item}' has an empty key")));
    }
    let raw = raw.trim();
    // Bare words that are not JSON literals are taken as strings.
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    Ok((key.split('.').map(String::from).collect(), value))
}

fn valid_keys(obj: &serde_json::Map<String, Value>, prefix: &str, out: &mut Vec<String>) {
    for (k, v) in obj {
        let name = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match v {
            Value::Object(inner) => valid_keys(inner, &name, out),
            _ => out.push(name),
        }
    }
}

/// Applies overrides to `base` through its JSON form. Unknown keys are
/// rejected with the list of valid ones; type errors come from deserialization.
pub fn apply_overrides<T: Serialize + DeserializeOwned>(base: &T, overrides: &[String]) -> Result<T> {
    let mut root = serde_json::to_value(base)?;
    for item in overrides {
        let (path, value) = parse_override(item)?;
        let mut slot = &mut root;
        for (depth, part) in path.iter().enumerate() {
            let known = slot.as_object().is_some_and(|o| o.contains_key(part));
            if !known {
                let mut keys = Vec::new();
                if let Value::Object(o) = &root {
                    valid_keys(o, "", &mut keys);
                }
                return Err(Error::InvalidConfig(format!(
                    "unknown key '{}'; valid keys: {}",
                    path[..=depth].join("."),
                    keys.join(", ")
                )));
            }
            slot = slot.get_mut(part).expect("checked above");
        }
        *slot = value;
    }
    serde_json::from_value(root).map_err(|e| Error::InvalidConfig(e.to_string()))
}

/// Reads a JSON config file; missing fields take their defaults.
pub fn load_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}
