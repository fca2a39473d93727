//! Record payload codec.
//!
//! Canonical form: `{"timestamp":"<ISO-8601>","seqno":<int>,"values":{...}}`
//! with the value map sorted by key, UTF-8, no trailing newline.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::timebase::{format_timestamp, parse_timestamp, Value};

/// One external message.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TimestampedRecord {
    /// Nanoseconds since the Unix epoch.
    pub data_ts: i64,
    pub seqno: u64,
    pub values: BTreeMap<String, Value>,
}

impl TimestampedRecord {
    pub fn new(data_ts: i64, seqno: u64) -> Self {
        TimestampedRecord {
            data_ts,
            seqno,
            values: BTreeMap::new(),
        }
    }

    pub fn with(mut self, name: impl Into<String>, value: Value) -> Self {
        self.values.insert(name.into(), value);
        self
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum CodecError {
    #[error("cannot encode record {seqno}: {reason}")]
    Encode { seqno: u64, reason: String },
    #[error("decode error at byte {offset}: {message}")]
    Decode { offset: usize, message: String },
}

impl CodecError {
    fn decode(offset: usize, message: impl Into<String>) -> Self {
        CodecError::Decode {
            offset,
            message: message.into(),
        }
    }
}

#[derive(Serialize)]
struct WireOut<'a> {
    timestamp: String,
    seqno: u64,
    values: BTreeMap<&'a str, serde_json::Value>,
}

#[derive(Deserialize)]
struct WireIn {
    timestamp: String,
    seqno: u64,
    values: BTreeMap<String, serde_json::Value>,
}

pub fn encode_record(rec: &TimestampedRecord) -> Result<Vec<u8>, CodecError> {
    let fail = |reason: String| CodecError::Encode {
        seqno: rec.seqno,
        reason,
    };
    if rec.values.is_empty() {
        return Err(fail("record carries no values".into()));
    }
    let timestamp = format_timestamp(rec.data_ts).map_err(|e| fail(e.to_string()))?;
    let mut values = BTreeMap::new();
    for (name, value) in &rec.values {
        let json = match value {
            Value::Integer(v) => serde_json::Value::from(*v),
            Value::Real(v) => serde_json::Number::from_f64(*v)
                .map(serde_json::Value::Number)
                .ok_or_else(|| fail(format!("value {name} is not finite ({v})")))?,
            Value::Boolean(v) => serde_json::Value::Bool(*v),
            Value::Text(v) => serde_json::Value::String(v.clone()),
        };
        values.insert(name.as_str(), json);
    }
    let wire = WireOut {
        timestamp,
        seqno: rec.seqno,
        values,
    };
    serde_json::to_vec(&wire).map_err(|e| fail(e.to_string()))
}

fn byte_offset(bytes: &[u8], line: usize, column: usize) -> usize {
    let line_start = bytes
        .split_inclusive(|b| *b == b'\n')
        .take(line.saturating_sub(1))
        .map(<[u8]>::len)
        .sum::<usize>();
    (line_start + column.saturating_sub(1)).min(bytes.len())
}

pub fn decode_record(bytes: &[u8]) -> Result<TimestampedRecord, CodecError> {
    let wire: WireIn = serde_json::from_slice(bytes).map_err(|e| {
        let suffix = format!(" at line {} column {}", e.line(), e.column());
        let full = e.to_string();
        let message = full.strip_suffix(&suffix).unwrap_or(&full).replace('`', "");
        CodecError::decode(byte_offset(bytes, e.line(), e.column()), message)
    })?;
    // Semantic errors have no precise position once parsed; point at the
    // start of the payload.
    let data_ts =
        parse_timestamp(&wire.timestamp).map_err(|e| CodecError::decode(0, e.to_string()))?;
    if wire.values.is_empty() {
        return Err(CodecError::decode(0, "values must not be empty"));
    }
    let mut values = BTreeMap::new();
    for (name, json) in wire.values {
        let value = match json {
            serde_json::Value::Bool(b) => Value::Boolean(b),
            serde_json::Value::String(s) => Value::Text(s),
            serde_json::Value::Number(n) => {
                if let Some(i) = n.as_i64() {
                    Value::Integer(i)
                } else if n.is_u64() {
                    return Err(CodecError::decode(
                        0,
                        format!("value {name}: integer out of range"),
                    ));
                } else {
                    Value::Real(n.as_f64().unwrap_or(f64::NAN))
                }
            }
            other => {
                return Err(CodecError::decode(
                    0,
                    format!("value {name}: unsupported type {}", json_type(&other)),
                ))
            }
        };
        values.insert(name, value);
    }
    Ok(TimestampedRecord {
        data_ts,
        seqno: wire.seqno,
        values,
    })
}

fn json_type(v: &serde_json::Value) -> &'static str {
    match v {
        serde_json::Value::Null => "null",
        serde_json::Value::Array(_) => "array",
        serde_json::Value::Object(_) => "object",
        serde_json::Value::Bool(_) => "boolean",
        serde_json::Value::Number(_) => "number",
        serde_json::Value::String(_) => "string",
    }
}
