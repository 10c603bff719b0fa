use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Value};

use crate::failure::{CliResult, Failure};

/// Builds a configuration from `base`, an optional JSON file merged over it,
/// and `key.path=value` overrides. Keys unknown to `base` are rejected.
pub fn load<T: Serialize + DeserializeOwned>(base: &T, file: Option<&Path>, overrides: &[String]) -> CliResult<T> {
    let reference = serde_json::to_value(base).map_err(|e| Failure::Runtime(e.to_string()))?;
    let mut value = reference.clone();
    if let Some(path) = file {
        let text = std::fs::read_to_string(path).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?;
        let from_file: Value =
            serde_json::from_str(&text).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?;
        check_keys(&from_file, &reference, "")?;
        merge(&mut value, from_file);
    }
    for o in overrides {
        apply_override(&mut value, o)?;
    }
    serde_json::from_value(value).map_err(|e| Failure::Usage(format!("invalid configuration: {e}")))
}

fn check_keys(value: &Value, reference: &Value, prefix: &str) -> CliResult<()> {
    let (Value::Object(v), Value::Object(r)) = (value, reference) else {
        return Ok(());
    };
    for (k, sub) in v {
        let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        let known = r
            .get(k)
            .ok_or_else(|| Failure::Usage(format!("unknown configuration key {path:?}")))?;
        check_keys(sub, known, &path)?;
    }
    Ok(())
}

fn merge(dst: &mut Value, src: Value) {
    match (dst, src) {
        (Value::Object(d), Value::Object(s)) => {
            for (k, v) in s {
                match d.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        d.insert(k, v);
                    }
                }
            }
        }
        (d, s) => *d = s,
    }
}

fn apply_override(value: &mut Value, text: &str) -> CliResult<()> {
    let (key, raw) = text
        .split_once('=')
        .ok_or_else(|| Failure::Usage(format!("override {text:?} is not KEY=VALUE")))?;
    let parsed = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let parts: Vec<&str> = key.split('.').collect();
    let mut cur = value;
    for (i, part) in parts.iter().enumerate() {
        let obj: &mut Map<String, Value> = cur
            .as_object_mut()
            .ok_or_else(|| Failure::Usage(format!("{key:?}: {} is not an object", parts[..i].join("."))))?;
        let slot = obj
            .get_mut(*part)
            .ok_or_else(|| Failure::Usage(format!("unknown configuration key {key:?}")))?;
        if i + 1 == parts.len() {
            *slot = parsed;
            return Ok(());
        }
        cur = slot;
    }
    Ok(())
}
