//! Config files mirror the command-line flags: one `[subcommand]` table whose
//! keys are the flag names with underscores. Flags win over the file.

use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Value};

/// Fills unset optional settings with their defaults, so snapshots show
/// every value a run actually used.
pub trait Defaults {
    fn fill_defaults(&mut self) {}
}

/// Merges the `[section]` table of `file` under the flags in `cli`, then
/// applies defaults.
pub fn resolve<T: Serialize + DeserializeOwned + Defaults>(cli: &T, file: Option<&Path>, section: &str) -> Result<T> {
    let mut merged = match file {
        Some(path) => section_table(path, section)?,
        None => Map::new(),
    };
    let known = match serde_json::to_value(cli)? {
        Value::Object(m) => m,
        _ => bail!("arguments must serialize to a table"),
    };
    if let Some(bad) = merged.keys().find(|k| !known.contains_key(*k)) {
        bail!("unknown key `{bad}` in [{section}] of the config file");
    }
    for (k, v) in known {
        if !v.is_null() {
            merged.insert(k, v);
        }
    }
    let mut out: T =
        serde_json::from_value(Value::Object(merged)).with_context(|| format!("invalid [{section}] settings"))?;
    out.fill_defaults();
    Ok(out)
}

fn section_table(path: &Path, section: &str) -> Result<Map<String, Value>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    let doc: toml::Table = toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
    match doc.get(section) {
        None => Ok(Map::new()),
        Some(t) => match serde_json::to_value(t)? {
            Value::Object(m) => Ok(m),
            _ => bail!("[{section}] in {} must be a table", path.display()),
        },
    }
}

/// Writes the settings actually used as a one-section TOML file.
pub fn write_snapshot<T: Serialize>(settings: &T, section: &str, path: &Path) -> Result<()> {
    let mut value = serde_json::to_value(settings)?;
    if let Value::Object(m) = &mut value {
        m.retain(|_, v| !v.is_null());
    }
    let mut doc = toml::Table::new();
    doc.insert(section.to_string(), toml::Value::try_from(value)?);
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, toml::to_string(&doc)?).with_context(|| format!("writing {}", path.display()))?;
    log::info!("effective config written to {}", path.display());
    Ok(())
}
