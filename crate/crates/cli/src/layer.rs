//! Config-file layering: every flag has a JSON key of the same name (snake
//! case) in the section of its command. Flags given on the command line win.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Value};

use crate::CliError;

/// Loads the whole config file; sections are looked up per command.
pub fn load_file(path: &Path) -> Result<Map<String, Value>, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
    match serde_json::from_str::<Value>(&text) {
        Ok(Value::Object(map)) => Ok(map),
        Ok(_) => Err(CliError::Usage(format!("{}: config must be a JSON object", path.display()))),
        Err(e) => Err(CliError::Usage(format!("{}: {e}", path.display()))),
    }
}

/// Overlays the flags that were set onto the file section `section`.
/// Unset flags serialize as `null` or `false` and never override the file.
pub fn merge<T: Serialize + DeserializeOwned>(
    flags: &T,
    file: Option<&Map<String, Value>>,
    section: &str,
) -> Result<T, CliError> {
    let mut merged = match file.and_then(|f| f.get(section)) {
        Some(Value::Object(m)) => m.clone(),
        Some(_) => return Err(CliError::Usage(format!("config section {section:?} must be an object"))),
        None => Map::new(),
    };
    let Value::Object(set) = serde_json::to_value(flags).expect("flags serialize") else {
        unreachable!("flag structs serialize to objects");
    };
    for (key, value) in set {
        let unset = value.is_null() || value == Value::Bool(false) || value.as_array().is_some_and(|a| a.is_empty());
        if !unset {
            merged.insert(key, value);
        }
    }
    serde_json::from_value(Value::Object(merged)).map_err(|e| CliError::Usage(format!("config section {section:?}: {e}")))
}

/// Required value after layering.
pub fn need<T: Clone>(value: &Option<T>, flag: &str) -> Result<T, CliError> {
    value
        .clone()
        .ok_or_else(|| CliError::Usage(format!("missing --{flag} (flag or config key)")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde::Deserialize;

    #[derive(Debug, Default, Serialize, Deserialize, PartialEq)]
    #[serde(default)]
    struct Flags {
        chunk: Option<f64>,
        out: Option<String>,
        force: bool,
    }

    #[test]
    fn flag_overrides_file() {
        let file: Map<String, Value> =
            serde_json::from_str(r#"{"segment": {"chunk": 30, "out": "a", "force": true}}"#).unwrap();
        let flags = Flags {
            chunk: Some(40.0),
            ..Default::default()
        };
        let merged = merge(&flags, Some(&file), "segment").unwrap();
        assert_eq!(
            merged,
            Flags {
                chunk: Some(40.0),
                out: Some("a".into()),
                force: true
            }
        );
    }

    #[test]
    fn unknown_section_type_is_usage_error() {
        let file: Map<String, Value> = serde_json::from_str(r#"{"segment": 3}"#).unwrap();
        assert!(matches!(merge(&Flags::default(), Some(&file), "segment"), Err(CliError::Usage(_))));
    }
}
