//! Layered run configuration. A run starts from built-in defaults, applies a
//! plain-text `key = value` file, then applies command-line overrides, each
//! layer winning over the one before. Overrides address fields by dotted
//! path (`loss.top_k`, `views.flip_p`) and are checked against the config
//! tree, so a misspelled key is an error instead of a silent no-op.

use std::fs;
use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use neco_core::train::TrainConfig;
use serde_json::Value;

/// Parses a config file: UTF-8, one `key = value` pair per line, `#` starts
/// a comment, blank lines are skipped.
pub fn parse_config_file(path: &Path) -> Result<Vec<(String, String)>> {
    let text =
        fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut pairs = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = match raw.find('#') {
            Some(pos) => &raw[..pos],
            None => raw,
        };
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            anyhow!("{}:{}: expected `key = value`", path.display(), idx + 1)
        })?;
        let key = key.trim();
        if key.is_empty() {
            bail!("{}:{}: empty key", path.display(), idx + 1);
        }
        pairs.push((key.to_string(), value.trim().to_string()));
    }
    Ok(pairs)
}

/// Splits one `key=value` command-line override.
pub fn parse_override(raw: &str) -> Result<(String, String)> {
    let (key, value) = raw
        .split_once('=')
        .ok_or_else(|| anyhow!("override `{raw}` is not of the form key=value"))?;
    let key = key.trim();
    if key.is_empty() {
        bail!("override `{raw}` has an empty key");
    }
    Ok((key.to_string(), value.trim().to_string()))
}

/// Applies dotted-path overrides on top of `base` and deserializes the
/// result. Every key must name an existing field; values are parsed against
/// the field's current JSON type.
pub fn apply_overrides(base: &TrainConfig, pairs: &[(String, String)]) -> Result<TrainConfig> {
    let mut tree = serde_json::to_value(base).context("serializing config")?;
    for (key, value) in pairs {
        set_key(&mut tree, key, value)?;
    }
    serde_json::from_value(tree).map_err(|e| anyhow!("invalid config value: {e}"))
}

fn set_key(tree: &mut Value, key: &str, raw: &str) -> Result<()> {
    let segments: Vec<&str> = key.split('.').collect();
    let mut node = tree;
    for (i, seg) in segments.iter().enumerate() {
        let obj = node
            .as_object_mut()
            .ok_or_else(|| anyhow!("unknown config key `{key}`"))?;
        let next = obj
            .get_mut(*seg)
            .ok_or_else(|| anyhow!("unknown config key `{key}`"))?;
        if i + 1 == segments.len() {
            *next = parse_value(next, key, raw)?;
            return Ok(());
        }
        node = next;
    }
    bail!("unknown config key `{key}`")
}

/// Parses `raw` guided by the JSON type currently stored at the key. On the
/// nullable keys (`*_path`, `top_k`) the literal `none` clears the field, and
/// `all` is the idiomatic spelling for sorting all references. Elsewhere
/// `none` stays a plain string so enum values spelled that way still work.
fn parse_value(current: &Value, key: &str, raw: &str) -> Result<Value> {
    let nullable = key.ends_with("_path") || key.ends_with("top_k");
    if raw == "none" && nullable {
        return Ok(Value::Null);
    }
    if raw == "all" && key.ends_with("top_k") {
        return Ok(Value::Null);
    }
    match current {
        Value::Bool(_) => raw
            .parse::<bool>()
            .map(Value::Bool)
            .map_err(|_| anyhow!("key `{key}` wants true or false, got `{raw}`")),
        Value::Number(_) => parse_number(key, raw),
        Value::String(_) => Ok(Value::String(raw.to_string())),
        Value::Null => Ok(parse_number(key, raw)
            .unwrap_or_else(|_| Value::String(raw.to_string()))),
        Value::Array(items) => {
            let parts: Vec<&str> = raw.split(',').map(str::trim).collect();
            if parts.len() != items.len() {
                bail!(
                    "key `{key}` wants {} comma-separated values, got {}",
                    items.len(),
                    parts.len()
                );
            }
            items
                .iter()
                .zip(&parts)
                .map(|(item, part)| parse_value(item, key, part))
                .collect::<Result<Vec<_>>>()
                .map(Value::Array)
        }
        Value::Object(_) => bail!("key `{key}` names a config section, not a field"),
    }
}

fn parse_number(key: &str, raw: &str) -> Result<Value> {
    if let Ok(n) = raw.parse::<u64>() {
        return Ok(Value::from(n));
    }
    if let Ok(n) = raw.parse::<i64>() {
        return Ok(Value::from(n));
    }
    let f: f64 = raw
        .parse()
        .map_err(|_| anyhow!("key `{key}` wants a number, got `{raw}`"))?;
    serde_json::Number::from_f64(f)
        .map(Value::Number)
        .ok_or_else(|| anyhow!("key `{key}` wants a finite number, got `{raw}`"))
}
