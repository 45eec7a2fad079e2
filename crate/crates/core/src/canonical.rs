//! Canonical JSON text.
//!
//! Every observed value is stored as its canonical string so that equality of
//! behavior reduces to byte equality. The canonical form is:
//!
//! - object keys sorted ascending by their UTF-8 bytes
//! - no insignificant whitespace
//! - integers printed without exponent or fraction
//! - floats printed as the shortest decimal that round-trips to the same `f64`
//!
//! Non-finite floats have no JSON spelling and are rejected.

use serde_json::{Map, Number, Value};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CanonicalError {
    #[error("non-finite number cannot be canonicalized")]
    NonFiniteNumber,
    #[error("invalid JSON: {0}")]
    Parse(String),
}

/// Render `value` in canonical form.
pub fn canonicalize(value: &Value) -> Result<String, CanonicalError> {
    let mut out = String::new();
    write_value(value, &mut out)?;
    Ok(out)
}

/// Parse JSON text and render it canonically.
pub fn canonicalize_str(text: &str) -> Result<String, CanonicalError> {
    let value: Value =
        serde_json::from_str(text).map_err(|e| CanonicalError::Parse(e.to_string()))?;
    canonicalize(&value)
}

/// Build a JSON number from an `f64`, rejecting NaN and infinities.
pub fn number_from_f64(x: f64) -> Result<Value, CanonicalError> {
    Number::from_f64(x)
        .map(Value::Number)
        .ok_or(CanonicalError::NonFiniteNumber)
}

fn write_value(value: &Value, out: &mut String) -> Result<(), CanonicalError> {
    match value {
        Value::Null => out.push_str("null"),
        Value::Bool(b) => out.push_str(if *b { "true" } else { "false" }),
        Value::Number(n) => write_number(n, out)?,
        Value::String(s) => write_string(s, out),
        Value::Array(items) => {
            out.push('[');
            for (i, item) in items.iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                write_value(item, out)?;
            }
            out.push(']');
        }
        Value::Object(map) => write_object(map, out)?,
    }
    Ok(())
}

fn write_object(map: &Map<String, Value>, out: &mut String) -> Result<(), CanonicalError> {
    let mut entries: Vec<(&String, &Value)> = map.iter().collect();
    entries.sort_by(|a, b| a.0.as_bytes().cmp(b.0.as_bytes()));
    out.push('{');
    for (i, (key, value)) in entries.into_iter().enumerate() {
        if i > 0 {
            out.push(',');
        }
        write_string(key, out);
        out.push(':');
        write_value(value, out)?;
    }
    out.push('}');
    Ok(())
}

fn write_number(n: &Number, out: &mut String) -> Result<(), CanonicalError> {
    if let Some(i) = n.as_i64() {
        out.push_str(&i.to_string());
    } else if let Some(u) = n.as_u64() {
        out.push_str(&u.to_string());
    } else {
        let f = n.as_f64().ok_or(CanonicalError::NonFiniteNumber)?;
        if !f.is_finite() {
            return Err(CanonicalError::NonFiniteNumber);
        }
        // serde_json prints floats with ryu: shortest round-trip digits.
        out.push_str(&n.to_string());
    }
    Ok(())
}

fn write_string(s: &str, out: &mut String) {
    // serde_json's string escaping is already minimal and deterministic.
    out.push_str(&serde_json::to_string(s).expect("string serialization is infallible"));
}

/// How two canonical values are compared when scoring against an oracle.
#[derive(Debug, Clone, Copy, PartialEq, Default, serde::Serialize, serde::Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum ValueComparison {
    /// Byte equality of canonical strings.
    #[default]
    Exact,
    /// Numbers (at any depth) may differ by at most `tolerance`.
    Epsilon { tolerance: f64 },
}

impl ValueComparison {
    pub const DEFAULT_TOLERANCE: f64 = 1e-9;

    pub fn epsilon() -> Self {
        ValueComparison::Epsilon {
            tolerance: Self::DEFAULT_TOLERANCE,
        }
    }

    pub fn matches(&self, expected: &str, actual: &str) -> bool {
        if expected == actual {
            return true;
        }
        match self {
            ValueComparison::Exact => false,
            ValueComparison::Epsilon { tolerance } => {
                match (
                    serde_json::from_str::<Value>(expected),
                    serde_json::from_str::<Value>(actual),
                ) {
                    (Ok(a), Ok(b)) => approx_equal(&a, &b, *tolerance),
                    _ => false,
                }
            }
        }
    }
}

fn approx_equal(a: &Value, b: &Value, tolerance: f64) -> bool {
    match (a, b) {
        (Value::Number(x), Value::Number(y)) => match (x.as_f64(), y.as_f64()) {
            (Some(x), Some(y)) => (x - y).abs() <= tolerance,
            _ => false,
        },
        (Value::Array(xs), Value::Array(ys)) => {
            xs.len() == ys.len()
                && xs
                    .iter()
                    .zip(ys)
                    .all(|(x, y)| approx_equal(x, y, tolerance))
        }
        (Value::Object(xs), Value::Object(ys)) => {
            xs.len() == ys.len()
                && xs
                    .iter()
                    .all(|(k, x)| ys.get(k).is_some_and(|y| approx_equal(x, y, tolerance)))
        }
        _ => a == b,
    }
}
