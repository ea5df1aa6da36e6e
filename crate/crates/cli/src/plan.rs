//! Plan loading: JSON file, then `--set key=value` overrides, then the
//! seed fallback.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use gridcast::trainer::TrainPlan;
use serde_json::Value;

use crate::UsageError;

/// Applies one dotted-path override. Array elements are addressed by index
/// (`phases.0.epochs=3`). Values parse as JSON, falling back to a string.
pub fn apply_override(root: &mut Value, assignment: &str) -> Result<()> {
    let Some((path, raw)) = assignment.split_once('=') else {
        bail!(UsageError(format!("override `{assignment}` is not key=value")));
    };
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = root;
    let keys: Vec<&str> = path.split('.').collect();
    for (i, key) in keys.iter().enumerate() {
        let last = i + 1 == keys.len();
        node = match node {
            Value::Object(map) => {
                if last {
                    map.insert(key.to_string(), value);
                    return Ok(());
                }
                map.entry(key.to_string()).or_insert_with(|| Value::Object(Default::default()))
            }
            Value::Array(items) => {
                let idx: usize = key
                    .parse()
                    .map_err(|_| UsageError(format!("`{key}` in `{path}` is not an array index")))?;
                let len = items.len();
                let slot = items
                    .get_mut(idx)
                    .ok_or_else(|| UsageError(format!("index {idx} in `{path}` is out of range ({len} items)")))?;
                if last {
                    *slot = value;
                    return Ok(());
                }
                slot
            }
            _ => bail!(UsageError(format!("`{path}` descends into a non-container value"))),
        };
    }
    bail!(UsageError(format!("empty override path in `{assignment}`")))
}

pub fn seed_fallback() -> Result<Option<u64>> {
    match std::env::var("GRIDCAST_SEED") {
        Ok(s) => Ok(Some(
            s.trim()
                .parse()
                .map_err(|_| UsageError(format!("GRIDCAST_SEED=`{s}` is not an unsigned integer")))?,
        )),
        Err(_) => Ok(None),
    }
}

pub fn load_plan(path: &Path, overrides: &[String]) -> Result<TrainPlan> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading plan {}", path.display()))?;
    let mut value: Value = serde_json::from_str(&text)
        .map_err(|e| UsageError(format!("{}:{}:{}: {e}", path.display(), e.line(), e.column())))?;
    if !value.is_object() {
        bail!(UsageError(format!("{}: plan must be a JSON object", path.display())));
    }
    if value.get("seed").is_none() {
        let seed = seed_fallback()?.unwrap_or(0);
        value["seed"] = Value::from(seed);
    }
    for o in overrides {
        apply_override(&mut value, o)?;
    }
    let plan: TrainPlan = serde_json::from_value(value).map_err(|e| {
        let anchor = if overrides.is_empty() {
            format!("{}", path.display())
        } else {
            format!("{} (after overrides)", path.display())
        };
        UsageError(format!("{anchor}: {e}"))
    })?;
    plan.validate().map_err(|e| UsageError(format!("{}: {e}", path.display())))?;
    Ok(plan)
}

/// Expands one glob; a pattern without metacharacters must name a file.
pub fn expand_glob(pattern: &str) -> gridcast::Result<Vec<PathBuf>> {
    let paths = glob::glob(pattern).map_err(|e| gridcast::Error::Config(format!("bad glob `{pattern}`: {e}")))?;
    let mut out: Vec<PathBuf> = paths.filter_map(|p| p.ok()).collect();
    out.sort();
    Ok(out)
}
