//! Run configuration as a flat map of dotted keys.
//!
//! Each subcommand declares its keys with defaults. A JSON config file may
//! set any declared key, flags override the file, and `--override key=value`
//! overrides both. Nested core configs are flattened into dotted keys on
//! the way in and rebuilt on the way out, so a key such as
//! `train.optimizer.learning_rate` maps straight onto the struct field.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Value};

use crate::error::CliError;

#[derive(Clone, Debug, Default)]
pub struct Settings {
    values: BTreeMap<String, Value>,
    /// Keys holding filesystem paths; resolved to absolute form on echo.
    path_keys: Vec<String>,
}

fn flatten_into(prefix: &str, value: &Value, out: &mut BTreeMap<String, Value>) {
    match value {
        Value::Object(map) if !map.is_empty() => {
            for (k, v) in map {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten_into(&key, v, out);
            }
        }
        other => {
            out.insert(prefix.to_owned(), other.clone());
        }
    }
}

fn insert_nested(root: &mut Map<String, Value>, path: &[&str], value: Value) {
    match path {
        [] => {}
        [last] => {
            root.insert((*last).to_owned(), value);
        }
        [head, rest @ ..] => {
            let child = root.entry((*head).to_owned()).or_insert_with(|| Value::Object(Map::new()));
            if let Value::Object(map) = child {
                insert_nested(map, rest, value);
            }
        }
    }
}

/// Parses a flag value as JSON, falling back to a plain string.
pub fn parse_value(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_owned()))
}

impl Settings {
    pub fn new() -> Self {
        Settings::default()
    }

    /// Declares a scalar key with its default. `Value::Null` marks a key
    /// with no default.
    pub fn declare(mut self, key: &str, default: Value) -> Self {
        self.values.insert(key.to_owned(), default);
        self
    }

    /// Declares a filesystem path key with no default.
    pub fn declare_path(mut self, key: &str) -> Self {
        self.values.insert(key.to_owned(), Value::Null);
        self.path_keys.push(key.to_owned());
        self
    }

    /// Declares every field of `defaults` under `prefix`, except `seed`,
    /// which comes from the top-level `seed` key.
    pub fn declare_section<T: Serialize>(mut self, prefix: &str, defaults: &T) -> Self {
        let value = serde_json::to_value(defaults).expect("config structs serialize");
        let mut flat = BTreeMap::new();
        flatten_into(prefix, &value, &mut flat);
        flat.remove(&format!("{prefix}.seed"));
        self.values.extend(flat);
        self
    }

    pub fn set(&mut self, key: &str, value: Value) -> Result<(), CliError> {
        match self.values.get_mut(key) {
            Some(slot) => {
                *slot = value;
                Ok(())
            }
            None => Err(CliError::Validation(format!("unknown config key `{key}`"))),
        }
    }

    /// Applies a `key=value` override.
    pub fn set_raw(&mut self, assignment: &str) -> Result<(), CliError> {
        let (key, raw) = assignment
            .split_once('=')
            .ok_or_else(|| CliError::Validation(format!("override `{assignment}` is not of the form key=value")))?;
        self.set(key.trim(), parse_value(raw.trim()))
    }

    /// Applies a flag when it was given.
    pub fn flag<T: Serialize>(&mut self, key: &str, value: Option<T>) -> Result<(), CliError> {
        match value {
            Some(v) => self.set(key, serde_json::to_value(v).expect("flag values serialize")),
            None => Ok(()),
        }
    }

    /// Merges a JSON object of flat dotted keys. The `command` entry that
    /// resolved configs carry is informational and skipped.
    pub fn merge_file(&mut self, path: &Path) -> Result<(), CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Validation(format!("cannot read config {}: {e}", path.display())))?;
        let value: Value = serde_json::from_str(&text)
            .map_err(|e| CliError::Validation(format!("config {} is not valid JSON: {e}", path.display())))?;
        let Value::Object(map) = value else {
            return Err(CliError::Validation(format!("config {} must be a JSON object", path.display())));
        };
        for (k, v) in map.into_iter().filter(|(k, _)| k != "command") {
            self.set(&k, v)?;
        }
        Ok(())
    }

    pub fn value(&self, key: &str) -> &Value {
        self.values.get(key).unwrap_or_else(|| panic!("config key `{key}` was never declared"))
    }

    pub fn get<T: DeserializeOwned>(&self, key: &str) -> Result<T, CliError> {
        serde_json::from_value(self.value(key).clone())
            .map_err(|e| CliError::Validation(format!("config key `{key}`: {e}")))
    }

    pub fn path(&self, key: &str) -> Result<Option<PathBuf>, CliError> {
        self.get::<Option<PathBuf>>(key)
    }

    pub fn require_path(&self, key: &str) -> Result<PathBuf, CliError> {
        let flag = key.replace(['_', '.'], "-");
        self.path(key)?.ok_or_else(|| CliError::Usage(format!("missing required --{flag}")))
    }

    /// Rebuilds the struct declared under `prefix`, with `seed` injected
    /// when given.
    pub fn section<T: DeserializeOwned>(&self, prefix: &str, seed: Option<u64>) -> Result<T, CliError> {
        let mut root = Map::new();
        let lead = format!("{prefix}.");
        for (k, v) in &self.values {
            if let Some(rest) = k.strip_prefix(&lead) {
                insert_nested(&mut root, &rest.split('.').collect::<Vec<_>>(), v.clone());
            }
        }
        if let Some(seed) = seed {
            root.insert("seed".into(), Value::from(seed));
        }
        serde_json::from_value(Value::Object(root)).map_err(|e| CliError::Validation(format!("config section `{prefix}`: {e}")))
    }

    /// Flat JSON object of every key, with path keys made absolute.
    pub fn resolved(&self) -> Value {
        let mut map = Map::new();
        for (k, v) in &self.values {
            let v = match (self.path_keys.contains(k), v) {
                (true, Value::String(p)) => {
                    Value::String(std::path::absolute(p).map_or_else(|_| p.clone(), |a| a.display().to_string()))
                }
                _ => v.clone(),
            };
            map.insert(k.clone(), v);
        }
        Value::Object(map)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde::Deserialize;

    #[derive(Debug, Default, PartialEq, Serialize, Deserialize)]
    #[serde(default)]
    struct Inner {
        rate: f64,
        on: bool,
    }

    #[derive(Debug, Default, PartialEq, Serialize, Deserialize)]
    #[serde(default)]
    struct Outer {
        count: usize,
        seed: u64,
        widths: Vec<usize>,
        inner: Inner,
    }

    fn settings() -> Settings {
        let defaults = Outer { count: 3, seed: 0, widths: vec![1, 2], inner: Inner { rate: 0.5, on: false } };
        Settings::new().declare("seed", Value::from(0)).declare_section("outer", &defaults).declare_path("data")
    }

    #[test]
    fn sections_round_trip_through_dotted_keys() {
        let mut s = settings();
        s.set("outer.inner.rate", Value::from(2.0)).unwrap();
        s.set_raw("outer.widths=[4,5]").unwrap();
        let o: Outer = s.section("outer", Some(9)).unwrap();
        assert_eq!(o, Outer { count: 3, seed: 9, widths: vec![4, 5], inner: Inner { rate: 2.0, on: false } });
        assert!(s.resolved().get("outer.seed").is_none());
    }

    #[test]
    fn unknown_keys_and_bad_values_are_validation_errors() {
        let mut s = settings();
        assert!(matches!(s.set_raw("outer.nope=1"), Err(CliError::Validation(_))));
        assert!(matches!(s.set_raw("no-equals"), Err(CliError::Validation(_))));
        s.set_raw("outer.count=many").unwrap();
        assert!(matches!(s.section::<Outer>("outer", None), Err(CliError::Validation(_))));
        assert!(matches!(s.require_path("data"), Err(CliError::Usage(_))));
    }

    #[test]
    fn file_then_flag_precedence() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        std::fs::write(&path, r#"{"outer.count": 7, "outer.inner.on": true, "data": "d/m.json"}"#).unwrap();
        let mut s = settings();
        s.merge_file(&path).unwrap();
        s.flag("outer.count", Some(8usize)).unwrap();
        s.flag::<usize>("outer.count", None).unwrap();
        let o: Outer = s.section("outer", None).unwrap();
        assert_eq!((o.count, o.inner.on), (8, true));
        let resolved = s.resolved();
        assert!(Path::new(resolved["data"].as_str().unwrap()).is_absolute());
    }
}
