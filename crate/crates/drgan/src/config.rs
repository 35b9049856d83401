//! JSON run configuration with `key.path=value` overrides.

use std::path::{Path, PathBuf};

use drgan_core::trainer::TrainConfig;
use serde_json::Value;

use crate::error::{read_json, write_json, Error, Result};

pub const RUN_DIR_ENV: &str = "DRGAN_RUN_DIR";

/// Sets `path` (dot separated) in `root` to `raw`, parsed as JSON when
/// possible and as a string otherwise. Unknown keys are rejected.
pub fn apply_override(root: &mut Value, assignment: &str) -> Result<()> {
    let (key, raw) = assignment.split_once('=').ok_or_else(|| Error::Usage(format!("override {assignment:?} is not key=value")))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = node.as_object_mut().ok_or_else(|| Error::Usage(format!("{key}: {part} is not inside an object")))?;
        let slot = obj.get_mut(*part).ok_or_else(|| Error::Usage(format!("unknown config key {key}")))?;
        if i + 1 == parts.len() {
            *slot = value;
            return Ok(());
        }
        node = slot;
    }
    unreachable!()
}

/// Defaults, then the optional file, then overrides in order.
pub fn resolve(file: Option<&Path>, overrides: &[String]) -> Result<TrainConfig> {
    let mut value = serde_json::to_value(TrainConfig::default()).expect("config serializes");
    if let Some(path) = file {
        let from_file: TrainConfig = read_json(path)?;
        value = serde_json::to_value(from_file).expect("config serializes");
    }
    for o in overrides {
        apply_override(&mut value, o)?;
    }
    let cfg: TrainConfig = serde_json::from_value(value).map_err(|e| Error::Usage(format!("invalid config: {e}")))?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn write_resolved(dir: &Path, cfg: &TrainConfig) -> Result<()> {
    write_json(&dir.join("resolved_config.json"), cfg)
}

/// Explicit directory, else `$DRGAN_RUN_DIR/<default_name>`, else `./runs/<default_name>`.
pub fn run_dir(explicit: Option<&Path>, default_name: &str) -> PathBuf {
    match explicit {
        Some(p) => p.to_path_buf(),
        None => std::env::var_os(RUN_DIR_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("runs")).join(default_name),
    }
}
