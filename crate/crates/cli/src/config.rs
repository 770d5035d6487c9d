//! Flat dotted-key configuration: defaults, a JSON file, then `key=value`
//! overrides, validated against the key set of the defaults.

use std::collections::BTreeMap;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Value};

use crate::CliError;

pub type Flat = BTreeMap<String, Value>;

fn flatten_into(prefix: &str, value: &Value, out: &mut Flat) {
    match value {
        Value::Object(map) if !map.is_empty() => {
            for (k, v) in map {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten_into(&key, v, out);
            }
        }
        _ => {
            out.insert(prefix.to_string(), value.clone());
        }
    }
}

pub fn flatten(value: &Value) -> Flat {
    let mut out = Flat::new();
    flatten_into("", value, &mut out);
    out
}

pub fn unflatten(flat: &Flat) -> Value {
    let mut root = Map::new();
    for (key, v) in flat {
        let mut node = &mut root;
        let mut parts = key.split('.').peekable();
        while let Some(part) = parts.next() {
            if parts.peek().is_none() {
                node.insert(part.to_string(), v.clone());
            } else {
                node = node
                    .entry(part.to_string())
                    .or_insert_with(|| Value::Object(Map::new()))
                    .as_object_mut()
                    .expect("dotted keys never collide with leaves");
            }
        }
    }
    Value::Object(root)
}

fn unknown_key(key: &str, valid: &Flat) -> CliError {
    let listing: Vec<&str> = valid.keys().map(String::as_str).collect();
    CliError::Usage(format!("unknown config key {key:?}; valid keys:\n  {}", listing.join("\n  ")))
}

/// Parses `key=value`; the value is read as JSON when possible, else as a string.
pub fn parse_override(s: &str) -> Result<(String, Value), CliError> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| CliError::Usage(format!("override {s:?} is not key=value")))?;
    let value = serde_json::from_str(v).unwrap_or_else(|_| Value::String(v.to_string()));
    Ok((k.trim().to_string(), value))
}

/// Resolves the effective configuration for `defaults`.
pub fn resolve<T: Serialize + DeserializeOwned>(
    defaults: &T,
    file: Option<&Path>,
    overrides: &[(String, Value)],
) -> Result<(T, Flat), CliError> {
    let base = serde_json::to_value(defaults).map_err(|e| CliError::Usage(e.to_string()))?;
    let mut flat = flatten(&base);
    let valid = flat.clone();
    if let Some(path) = file {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        let parsed: Value = serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("config {}: {e}", path.display())))?;
        let Value::Object(map) = parsed else {
            return Err(CliError::Usage(format!("config {} must be a flat JSON object", path.display())));
        };
        for (k, v) in map {
            if !valid.contains_key(&k) {
                return Err(unknown_key(&k, &valid));
            }
            flat.insert(k, v);
        }
    }
    for (k, v) in overrides {
        if !valid.contains_key(k) {
            return Err(unknown_key(k, &valid));
        }
        flat.insert(k.clone(), v.clone());
    }
    let cfg = serde_json::from_value(unflatten(&flat)).map_err(|e| CliError::Usage(format!("invalid config value: {e}")))?;
    // Re-flatten so the recorded config reflects normalized values.
    let normalized = flatten(&serde_json::to_value(&cfg).map_err(|e| CliError::Usage(e.to_string()))?);
    Ok((cfg, normalized))
}

/// FNV-1a over the canonical (sorted-key) JSON of the flat config.
pub fn config_hash(flat: &Flat) -> String {
    let text = serde_json::to_string(flat).expect("json values serialize");
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in text.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    format!("{h:016x}")
}
