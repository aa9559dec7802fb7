//! Layered JSON configuration: defaults, then an optional file, then
//! `dotted.key=value` overrides. Keys absent from the defaults are rejected.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::Value;

fn merge(base: &mut Value, patch: Value, path: &str) -> Result<(), String> {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                let sub = if path.is_empty() { k.clone() } else { format!("{path}.{k}") };
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v, &sub)?,
                    None => return Err(format!("unknown config key {sub:?}")),
                }
            }
            Ok(())
        }
        (slot, v) => {
            *slot = v;
            Ok(())
        }
    }
}

/// Parses `key.path=value`; the value is read as JSON when it parses,
/// otherwise as a plain string.
pub fn parse_override(s: &str) -> Result<(Vec<String>, Value), String> {
    let (k, v) = s.split_once('=').ok_or_else(|| format!("override {s:?} is not of the form key=value"))?;
    let keys: Vec<String> = k.trim().split('.').map(str::to_string).collect();
    if keys.iter().any(String::is_empty) {
        return Err(format!("override {s:?} has an empty key segment"));
    }
    let v = v.trim();
    let value = serde_json::from_str(v).unwrap_or_else(|_| Value::String(v.to_string()));
    Ok((keys, value))
}

pub fn apply_override(base: &mut Value, keys: &[String], value: Value) -> Result<(), String> {
    let mut patch = value;
    for k in keys.iter().rev() {
        patch = Value::Object([(k.clone(), patch)].into_iter().collect());
    }
    merge(base, patch, "")
}

/// Defaults ← file ← overrides, deserialised into `C`.
pub fn layered<C: Serialize + DeserializeOwned + Default>(file: Option<&Path>, overrides: &[String]) -> Result<C, String> {
    let mut v = serde_json::to_value(C::default()).map_err(|e| e.to_string())?;
    if let Some(p) = file {
        let text = std::fs::read_to_string(p).map_err(|e| format!("cannot read config {}: {e}", p.display()))?;
        let patch: Value = serde_json::from_str(&text).map_err(|e| format!("config {}: {e}", p.display()))?;
        merge(&mut v, patch, "")?;
    }
    for o in overrides {
        let (keys, value) = parse_override(o)?;
        apply_override(&mut v, &keys, value)?;
    }
    serde_json::from_value(v).map_err(|e| format!("invalid config: {e}"))
}
