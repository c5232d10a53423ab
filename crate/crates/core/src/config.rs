//! Layered configuration: named preset, then a TOML file, then `key.path=value`
//! overrides.

use std::path::{Path, PathBuf};

use thiserror::Error;
use toml::{Table, Value};

use crate::experiment::{preset, ExperimentSpec};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Parse { path: String, message: String },
    #[error("override `{0}` is not of the form key.path=value")]
    Override(String),
    #[error("`{key}`: {message}")]
    Key { key: String, message: String },
    #[error("unknown preset `{0}` (expected one of meanfield, lowrank, fig2, fig3)")]
    UnknownPreset(String),
}

/// Recursively layers `over` onto `base`. Tables merge key by key; any other
/// value (arrays included) replaces what was there.
pub fn deep_merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Table(b), Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => deep_merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Parses the right-hand side of an override as a TOML value, falling back
/// to a bare string.
fn parse_value(raw: &str) -> Value {
    format!("v = {raw}")
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

/// Applies `a.b.c=value`. Numeric segments index into arrays; missing
/// tables are created.
pub fn apply_override(root: &mut Value, assignment: &str) -> Result<(), ConfigError> {
    let (path, raw) = assignment
        .split_once('=')
        .ok_or_else(|| ConfigError::Override(assignment.into()))?;
    let keys: Vec<&str> = path.trim().split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(ConfigError::Override(assignment.into()));
    }
    let value = parse_value(raw.trim());
    let mut node = root;
    for (depth, key) in keys.iter().enumerate() {
        let last = depth + 1 == keys.len();
        let here = keys[..=depth].join(".");
        node = match node {
            Value::Table(t) => {
                if last {
                    t.insert(key.to_string(), value);
                    return Ok(());
                }
                t.entry(key.to_string()).or_insert_with(|| Value::Table(Table::new()))
            }
            Value::Array(a) => {
                let idx: usize = key.parse().map_err(|_| ConfigError::Key {
                    key: here.clone(),
                    message: "expected an array index".into(),
                })?;
                let len = a.len();
                let slot = a.get_mut(idx).ok_or_else(|| ConfigError::Key {
                    key: here.clone(),
                    message: format!("index out of range (length {len})"),
                })?;
                if last {
                    *slot = value;
                    return Ok(());
                }
                slot
            }
            _ => {
                return Err(ConfigError::Key {
                    key: keys[..depth].join("."),
                    message: "is not a table".into(),
                })
            }
        };
    }
    unreachable!("loop returns on the last key")
}

/// Deserializes a merged tree, reporting the key path of the first error.
pub fn spec_from_value(value: Value) -> Result<ExperimentSpec, ConfigError> {
    let spec: ExperimentSpec = serde_path_to_error::deserialize(value).map_err(|e| {
        let key = e.path().to_string();
        ConfigError::Key {
            key: if key == "." { "<root>".into() } else { key },
            message: e.into_inner().to_string(),
        }
    })?;
    spec.validate()?;
    Ok(spec)
}

pub fn parse_file(path: &Path) -> Result<Table, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.into(),
        source,
    })?;
    text.parse::<Table>().map_err(|e| ConfigError::Parse {
        path: path.display().to_string(),
        message: e.to_string(),
    })
}

/// Resolves the final spec. A top-level `preset = "..."` key in the file is
/// honored unless `preset` is given explicitly.
pub fn load_spec(
    preset_name: Option<&str>,
    file: Option<&Path>,
    overrides: &[String],
) -> Result<ExperimentSpec, ConfigError> {
    let mut file_table = file.map(parse_file).transpose()?;
    let file_preset = match file_table.as_mut().and_then(|t| t.remove("preset")) {
        Some(Value::String(s)) => Some(s),
        Some(_) => {
            return Err(ConfigError::Key {
                key: "preset".into(),
                message: "expected a string".into(),
            })
        }
        None => None,
    };
    let base = match preset_name.map(str::to_string).or(file_preset) {
        Some(name) => preset(&name)?,
        None => ExperimentSpec::default(),
    };
    let mut root = Value::try_from(&base).map_err(|e| ConfigError::Key {
        key: "<root>".into(),
        message: e.to_string(),
    })?;
    if let Some(t) = file_table {
        deep_merge(&mut root, Value::Table(t));
    }
    for o in overrides {
        apply_override(&mut root, o)?;
    }
    spec_from_value(root)
}

/// Convenience for tests and library users: a spec from a TOML string.
pub fn spec_from_str(text: &str) -> Result<ExperimentSpec, ConfigError> {
    let table = text.parse::<Table>().map_err(|e| ConfigError::Parse {
        path: "<string>".into(),
        message: e.to_string(),
    })?;
    let mut root = Value::try_from(ExperimentSpec::default()).expect("default spec serializes");
    deep_merge(&mut root, Value::Table(table));
    spec_from_value(root)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::experiment::Mode;

    #[test]
    fn overrides_parse_as_toml() {
        let mut v = Value::Table(Table::new());
        apply_override(&mut v, "horizon=50").unwrap();
        apply_override(&mut v, "model.preset=meanfield").unwrap();
        apply_override(&mut v, "model.q_coeffs=[1.0, 2.0]").unwrap();
        apply_override(&mut v, "mode=\"bayes\"").unwrap();
        assert_eq!(v["horizon"], Value::Integer(50));
        assert_eq!(v["model"]["preset"], Value::String("meanfield".into()));
        assert_eq!(v["model"]["q_coeffs"][1], Value::Float(2.0));
        assert_eq!(v["mode"], Value::String("bayes".into()));
        assert!(apply_override(&mut v, "novalue").is_err());
        assert!(apply_override(&mut v, "horizon.x=1").is_err());
    }

    #[test]
    fn array_index_override() {
        let mut spec = load_spec(Some("fig2"), None, &["groups.1.model.n=7".into()]).unwrap();
        assert_eq!(spec.groups[1].model.n, Some(7));
        spec = load_spec(Some("fig2"), None, &[]).unwrap();
        assert_eq!(spec.groups[1].model.n, Some(10));
        let err = load_spec(Some("fig2"), None, &["groups.9.model.n=7".into()]).unwrap_err();
        assert!(err.to_string().contains("groups.9"), "{err}");
    }

    #[test]
    fn error_names_key_path() {
        let err = load_spec(Some("meanfield"), None, &["model.kapa=1".into()]).unwrap_err();
        assert!(err.to_string().contains("model"), "{err}");
        let err = load_spec(Some("meanfield"), None, &["tsde.delta=\"x\"".into()]).unwrap_err();
        assert!(err.to_string().contains("tsde.delta"), "{err}");
        let err = load_spec(None, None, &["horizon=0".into()]).unwrap_err();
        assert!(err.to_string().contains("horizon"), "{err}");
    }

    #[test]
    fn file_layer_and_preset_key() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(&path, "preset = \"meanfield\"\nhorizon = 10\nmode = \"bayes\"\n[model]\nn = 4\n").unwrap();
        let spec = load_spec(None, Some(&path), &["horizon=20".into()]).unwrap();
        assert_eq!(spec.name, "meanfield");
        assert_eq!(spec.horizon, 20);
        assert_eq!(spec.mode, Mode::Bayes);
        assert_eq!(spec.model.n, Some(4));
    }

    #[test]
    fn spec_round_trips_through_toml() {
        for name in crate::experiment::PRESETS {
            let spec = preset(name).unwrap();
            assert_eq!(spec_from_str(&spec.canonical_toml()).unwrap(), spec);
        }
    }
}
