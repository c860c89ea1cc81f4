//! Partial JSON configuration over a full default.

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::Value;

use crate::error::{Error, Result};

/// Parses `text` as `T`, taking every key missing at any depth from `base`.
pub fn overlay<T: Serialize + DeserializeOwned>(base: &T, text: &str) -> Result<T> {
    let over: Value = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
    let mut merged = serde_json::to_value(base).map_err(|e| Error::Internal(e.to_string()))?;
    merge(&mut merged, over);
    serde_json::from_value(merged).map_err(|e| Error::Config(e.to_string()))
}

fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}
