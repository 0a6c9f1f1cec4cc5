//! Defaults from a JSON config file, overridden by flags given on the
//! command line.
//!
//! The file is an object whose keys are flag names (`min_prob` or
//! `min-prob`). A key naming a subcommand (`"train": {...}`) holds
//! settings for that subcommand only and wins over top-level keys. Keys
//! that match no flag of the running subcommand are ignored, so one file
//! can serve a whole pipeline.

use std::path::Path;

use anyhow::{bail, Context, Result};
use clap::parser::ValueSource;
use clap::ArgMatches;
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Value};

pub fn load(path: &Path) -> Result<Map<String, Value>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    match serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))? {
        Value::Object(m) => Ok(m),
        _ => bail!("config {} must be a JSON object", path.display()),
    }
}

/// Applies config values to every field of `args` not set on the command line.
pub fn resolve<T>(args: T, subcommand: &str, matches: &ArgMatches, config: Option<&Map<String, Value>>) -> Result<T>
where
    T: Serialize + DeserializeOwned,
{
    let Some(config) = config else {
        return Ok(args);
    };
    let mut value = serde_json::to_value(&args)?;
    let fields = value.as_object_mut().expect("argument structs serialize to objects");
    let section = config.get(subcommand).and_then(Value::as_object);
    let layers = [Some(config), section];
    for layer in layers.into_iter().flatten() {
        for (key, v) in layer {
            let key = key.replace('-', "_");
            if !fields.contains_key(&key) || matches.value_source(&key) == Some(ValueSource::CommandLine) {
                continue;
            }
            fields.insert(key, v.clone());
        }
    }
    serde_json::from_value(value).with_context(|| format!("config values for {subcommand}"))
}
