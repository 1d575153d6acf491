//! Versioned JSON files.
//!
//! Every document carries a top-level `"format_version": 1` next to the
//! fields of the stored value.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Value};

use crate::error::{Error, Result};

pub const FORMAT_VERSION: u64 = 1;

pub fn to_json_string<T: Serialize>(value: &T) -> Result<String> {
    let body = serde_json::to_value(value)?;
    let Value::Object(fields) = body else {
        return Err(Error::Invariant(
            "only JSON objects can be versioned".into(),
        ));
    };
    let mut doc = Map::new();
    doc.insert("format_version".into(), FORMAT_VERSION.into());
    doc.extend(fields);
    let mut text = serde_json::to_string_pretty(&Value::Object(doc))?;
    text.push('\n');
    Ok(text)
}

pub fn from_json_str<T: DeserializeOwned>(text: &str) -> Result<T> {
    let mut doc: Value = serde_json::from_str(text)?;
    let Some(fields) = doc.as_object_mut() else {
        return Err(Error::InsufficientData("expected a JSON object".into()));
    };
    let version = fields.remove("format_version").and_then(|v| v.as_u64());
    match version {
        Some(FORMAT_VERSION) => Ok(serde_json::from_value(doc)?),
        Some(found) => Err(Error::FormatVersion {
            found,
            expected: FORMAT_VERSION,
        }),
        None => Err(Error::InsufficientData("missing format_version".into())),
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    std::fs::write(path, to_json_string(value)?)
        .map_err(|e| Error::from(e).context(format!("writing {}", path.display())))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::from(e).context(format!("reading {}", path.display())))?;
    from_json_str(&text).map_err(|e| e.context(format!("parsing {}", path.display())))
}
