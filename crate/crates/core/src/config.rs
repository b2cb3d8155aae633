//! Config files: JSON, or flat `key = value` lines. Keys may be dotted
//! (`loss.lambda_bc = 0.1`) or bare when the name is unique within one
//! section (`lambda_bc = 0.1`). Missing keys keep their defaults.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Value};

use crate::{Error, Result};

fn scalar(raw: &str) -> Value {
    let raw = raw.trim();
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.trim_matches('"').to_string()))
}

/// Parses `key = value` lines (`#` starts a comment) into a nested object.
pub fn parse_key_values(text: &str) -> Result<Value> {
    let mut root = Map::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Error::InvalidConfig(format!("config line {}: expected key = value", n + 1)))?;
        let path: Vec<&str> = key.trim().split('.').map(str::trim).collect();
        if path.iter().any(|p| p.is_empty()) {
            return Err(Error::InvalidConfig(format!("config line {}: empty key", n + 1)));
        }
        let mut node = &mut root;
        for part in &path[..path.len() - 1] {
            let entry = node.entry(part.to_string()).or_insert_with(|| Value::Object(Map::new()));
            node = entry
                .as_object_mut()
                .ok_or_else(|| Error::InvalidConfig(format!("config line {}: `{part}` is not a section", n + 1)))?;
        }
        node.insert(path[path.len() - 1].to_string(), scalar(value));
    }
    Ok(Value::Object(root))
}

pub fn parse_config_text(text: &str) -> Result<Value> {
    if text.trim_start().starts_with('{') {
        Ok(serde_json::from_str(text)?)
    } else {
        parse_key_values(text)
    }
}

/// Writes `patch` over `base`. Unknown top-level keys are routed into the one
/// nested section that already has them.
fn merge(base: &mut Value, patch: &Value, top: bool) -> Result<()> {
    let (Value::Object(b), Value::Object(p)) = (&mut *base, patch) else {
        *base = patch.clone();
        return Ok(());
    };
    for (k, v) in p {
        if let Some(slot) = b.get_mut(k) {
            if slot.is_object() && v.is_object() {
                merge(slot, v, false)?;
            } else {
                *slot = v.clone();
            }
            continue;
        }
        let owners: Vec<String> =
            if top { b.iter().filter(|(_, s)| s.get(k).is_some()).map(|(name, _)| name.clone()).collect() } else { vec![] };
        match owners.as_slice() {
            [one] => {
                b.get_mut(one).and_then(Value::as_object_mut).expect("owner is an object").insert(k.clone(), v.clone());
            }
            [] => return Err(Error::InvalidConfig(format!("unknown config key `{k}`"))),
            many => return Err(Error::InvalidConfig(format!("ambiguous config key `{k}` (in {})", many.join(", ")))),
        }
    }
    Ok(())
}

/// Overlays a parsed config on the defaults of `T`.
pub fn apply<T: Serialize + DeserializeOwned + Default>(patch: &Value) -> Result<T> {
    apply_to(T::default(), patch)
}

pub fn apply_to<T: Serialize + DeserializeOwned>(base: T, patch: &Value) -> Result<T> {
    let mut v = serde_json::to_value(base)?;
    merge(&mut v, patch, true)?;
    serde_json::from_value(v).map_err(|e| Error::InvalidConfig(e.to_string()))
}

pub fn load<T: Serialize + DeserializeOwned + Default>(path: &Path) -> Result<T> {
    apply(&parse_config_text(&std::fs::read_to_string(path)?)?)
}
