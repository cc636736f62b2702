//! Layered configuration: defaults, then a TOML file, then command-line overrides.

use std::fmt::Write as _;
use std::path::Path;

use pod_core::config::RunConfig;
use pod_core::synth::LayoutSpec;
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Value};

use crate::CliError;

fn to_json<T: Serialize>(value: &T) -> Value {
    serde_json::to_value(value).expect("configs serialize")
}

fn read_toml(path: &Path) -> Result<Value, CliError> {
    if !path.exists() {
        return Err(CliError::Missing(path.to_path_buf()));
    }
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Io(path.to_path_buf(), e))?;
    let table: toml::Table =
        toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    Ok(to_json(&table))
}

/// Recursively overlays `over` onto `base`; tables merge, everything else replaces.
pub fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
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

/// Sets a dotted key such as `train.lr`, creating tables on the way.
pub fn set_path(root: &mut Value, key: &str, value: Value) -> Result<(), CliError> {
    let mut node = root;
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(CliError::Config(format!("malformed key `{key}`")));
    }
    for part in &parts[..parts.len() - 1] {
        if !node.is_object() {
            return Err(CliError::Config(format!(
                "`{key}` does not name a table entry"
            )));
        }
        node = node
            .as_object_mut()
            .expect("checked")
            .entry(part.to_string())
            .or_insert_with(|| Value::Object(Map::new()));
    }
    match node.as_object_mut() {
        Some(table) => {
            table.insert(parts[parts.len() - 1].to_string(), value);
            Ok(())
        }
        None => Err(CliError::Config(format!(
            "`{key}` does not name a table entry"
        ))),
    }
}

/// Parses the right-hand side of `key=value` as a TOML value, falling back
/// to a bare string.
pub fn parse_assignment(text: &str) -> Result<(String, Value), CliError> {
    let (key, raw) = text
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("expected key=value, got `{text}`")))?;
    let raw = raw.trim();
    let value = match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => to_json(&t.remove("v").expect("parsed key")),
        Err(_) => Value::String(raw.to_string()),
    };
    Ok((key.trim().to_string(), value))
}

fn finish<T: DeserializeOwned>(value: Value) -> Result<T, CliError> {
    serde_json::from_value(value).map_err(|e| CliError::Config(e.to_string()))
}

/// Defaults, overlaid by `file`, then `sets`, then `typed` overrides.
pub fn load_run_config(
    file: Option<&Path>,
    sets: &[String],
    typed: &[(&str, Value)],
) -> Result<RunConfig, CliError> {
    let mut value = to_json(&RunConfig::default());
    if let Some(path) = file {
        merge(&mut value, read_toml(path)?);
    }
    for s in sets {
        let (k, v) = parse_assignment(s)?;
        set_path(&mut value, &k, v)?;
    }
    for (k, v) in typed {
        set_path(&mut value, k, v.clone())?;
    }
    let cfg: RunConfig = finish(value)?;
    cfg.validate()
        .map_err(|e| CliError::Config(e.to_string()))?;
    Ok(cfg)
}

/// A layout spec file overlaid on `base`.
pub fn load_layout_spec(base: &LayoutSpec, file: Option<&Path>) -> Result<LayoutSpec, CliError> {
    let mut value = to_json(base);
    if let Some(path) = file {
        merge(&mut value, read_toml(path)?);
    }
    let spec: LayoutSpec = finish(value)?;
    spec.validate()
        .map_err(|e| CliError::Config(e.to_string()))?;
    Ok(spec)
}

fn flatten(prefix: &str, value: &Value, out: &mut Vec<(String, String)>) {
    match value {
        Value::Object(map) if !map.is_empty() => {
            for (k, v) in map {
                let key = if prefix.is_empty() {
                    k.clone()
                } else {
                    format!("{prefix}.{k}")
                };
                flatten(&key, v, out);
            }
        }
        v => out.push((prefix.to_string(), v.to_string())),
    }
}

/// Every configuration key with its default, one `key = value` per line.
pub fn defaults_help() -> String {
    let mut keys = Vec::new();
    flatten("", &to_json(&RunConfig::default()), &mut keys);
    let mut text = String::from(
        "Configuration keys (TOML file via --config, or --set key=value; command-line flags win over --set, which wins over the file):\n",
    );
    for (k, v) in keys {
        let _ = writeln!(text, "  {k} = {v}");
    }
    text
}
