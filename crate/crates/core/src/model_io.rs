//! Versioned JSON documents: every model file carries a `"format"` tag.

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::Value;

use crate::error::{Error, Result};

pub fn to_json<T: Serialize>(format: &str, value: &T) -> String {
    let mut v = serde_json::to_value(value).expect("serializable");
    if let Value::Object(map) = &mut v {
        map.insert("format".to_string(), Value::String(format.to_string()));
    }
    serde_json::to_string_pretty(&v).expect("serializable")
}

pub fn from_json<T: DeserializeOwned>(format: &str, text: &str) -> Result<T> {
    let mut v: Value = serde_json::from_str(text).map_err(|e| Error::MalformedModel(e.to_string()))?;
    let Value::Object(map) = &mut v else {
        return Err(Error::MalformedModel("expected a JSON object".into()));
    };
    match map.remove("format") {
        Some(Value::String(f)) if f == format => {}
        Some(other) => return Err(Error::MalformedModel(format!("expected format {format}, got {other}"))),
        None => return Err(Error::MalformedModel("missing format field".into())),
    }
    serde_json::from_value(v).map_err(|e| Error::MalformedModel(e.to_string()))
}

/// Reads only the `"format"` tag of a model document.
pub fn peek_format(text: &str) -> Result<String> {
    let v: Value = serde_json::from_str(text).map_err(|e| Error::MalformedModel(e.to_string()))?;
    v.get("format")
        .and_then(Value::as_str)
        .map(str::to_string)
        .ok_or_else(|| Error::MalformedModel("missing format field".into()))
}
