//! Canonical JSON used for signing bytes and audit record hashing.
//!
//! Output is UTF-8 with object keys sorted by code point, no insignificant
//! whitespace, integers in minimal base-10 and strings minimally escaped.
//! Floating-point numbers are not representable.
//!
//! [`parse_strict`] is the matching input side: it rejects duplicate keys,
//! prototype-pollution keys and non-integer numbers anywhere in the document.

use serde::de::{self, Deserialize, Deserializer, MapAccess, SeqAccess, Visitor};
use serde_json::{Map, Number, Value};
use thiserror::Error;

/// Keys that are rejected at any nesting depth.
pub const FORBIDDEN_KEYS: [&str; 3] = ["__proto__", "constructor", "prototype"];

#[derive(Debug, Error, PartialEq, Eq)]
pub enum EncodingError {
    #[error("non-integer number {0} has no canonical form")]
    Float(String),
}

#[derive(Debug, Error)]
#[error("{0}")]
pub struct StrictParseError(String);

impl StrictParseError {
    pub fn message(&self) -> &str {
        &self.0
    }
}

pub fn to_canonical_bytes(value: &Value) -> Result<Vec<u8>, EncodingError> {
    let mut out = Vec::with_capacity(128);
    write_value(value, &mut out)?;
    Ok(out)
}

pub fn to_canonical_string(value: &Value) -> Result<String, EncodingError> {
    // write_value only emits valid UTF-8
    to_canonical_bytes(value).map(|b| String::from_utf8(b).expect("canonical output is UTF-8"))
}

fn write_string(s: &str, out: &mut Vec<u8>) {
    // serde_json escapes exactly `"`, `\` and control characters.
    serde_json::to_writer(&mut *out, s).expect("writing to a Vec cannot fail");
}

fn write_value(value: &Value, out: &mut Vec<u8>) -> Result<(), EncodingError> {
    match value {
        Value::Null => out.extend_from_slice(b"null"),
        Value::Bool(true) => out.extend_from_slice(b"true"),
        Value::Bool(false) => out.extend_from_slice(b"false"),
        Value::Number(n) => {
            if let Some(u) = n.as_u64() {
                out.extend_from_slice(u.to_string().as_bytes());
            } else if let Some(i) = n.as_i64() {
                out.extend_from_slice(i.to_string().as_bytes());
            } else {
                return Err(EncodingError::Float(n.to_string()));
            }
        }
        Value::String(s) => write_string(s, out),
        Value::Array(items) => {
            out.push(b'[');
            for (i, item) in items.iter().enumerate() {
                if i > 0 {
                    out.push(b',');
                }
                write_value(item, out)?;
            }
            out.push(b']');
        }
        Value::Object(map) => {
            let mut keys: Vec<&String> = map.keys().collect();
            keys.sort();
            out.push(b'{');
            for (i, key) in keys.into_iter().enumerate() {
                if i > 0 {
                    out.push(b',');
                }
                write_string(key, out);
                out.push(b':');
                write_value(&map[key], out)?;
            }
            out.push(b'}');
        }
    }
    Ok(())
}

/// Parses JSON, rejecting duplicate keys, [`FORBIDDEN_KEYS`] and floats.
pub fn parse_strict(bytes: &[u8]) -> Result<Value, StrictParseError> {
    serde_json::from_slice::<StrictValue>(bytes)
        .map(|v| v.0)
        .map_err(|e| StrictParseError(e.to_string()))
}

/// Returns true when `bytes` is exactly the canonical encoding of its own
/// strict parse.
pub fn is_canonical(bytes: &[u8]) -> bool {
    match parse_strict(bytes) {
        Ok(v) => to_canonical_bytes(&v).map(|c| c == bytes).unwrap_or(false),
        Err(_) => false,
    }
}

struct StrictValue(Value);

impl<'de> Deserialize<'de> for StrictValue {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        deserializer.deserialize_any(StrictVisitor)
    }
}

struct StrictVisitor;

impl<'de> Visitor<'de> for StrictVisitor {
    type Value = StrictValue;

    fn expecting(&self, f: &mut std::fmt::Formatter) -> std::fmt::Result {
        f.write_str("a JSON value without floats, duplicate keys or forbidden keys")
    }

    fn visit_unit<E>(self) -> Result<StrictValue, E> {
        Ok(StrictValue(Value::Null))
    }

    fn visit_bool<E>(self, v: bool) -> Result<StrictValue, E> {
        Ok(StrictValue(Value::Bool(v)))
    }

    fn visit_i64<E>(self, v: i64) -> Result<StrictValue, E> {
        Ok(StrictValue(Value::Number(v.into())))
    }

    fn visit_u64<E>(self, v: u64) -> Result<StrictValue, E> {
        Ok(StrictValue(Value::Number(v.into())))
    }

    fn visit_f64<E: de::Error>(self, v: f64) -> Result<StrictValue, E> {
        Err(E::custom(format!("non-integer number {v}")))
    }

    fn visit_str<E>(self, v: &str) -> Result<StrictValue, E> {
        Ok(StrictValue(Value::String(v.to_owned())))
    }

    fn visit_string<E>(self, v: String) -> Result<StrictValue, E> {
        Ok(StrictValue(Value::String(v)))
    }

    fn visit_seq<A: SeqAccess<'de>>(self, mut seq: A) -> Result<StrictValue, A::Error> {
        let mut items = Vec::new();
        while let Some(StrictValue(v)) = seq.next_element()? {
            items.push(v);
        }
        Ok(StrictValue(Value::Array(items)))
    }

    fn visit_map<A: MapAccess<'de>>(self, mut map: A) -> Result<StrictValue, A::Error> {
        let mut out = Map::new();
        while let Some(key) = map.next_key::<String>()? {
            if FORBIDDEN_KEYS.contains(&key.as_str()) {
                return Err(de::Error::custom(format!("forbidden key {key:?}")));
            }
            if out.contains_key(&key) {
                return Err(de::Error::custom(format!("duplicate key {key:?}")));
            }
            let StrictValue(v) = map.next_value()?;
            out.insert(key, v);
        }
        Ok(StrictValue(Value::Object(out)))
    }
}

/// Canonical JSON number for an unsigned integer.
pub fn uint(v: u64) -> Value {
    Value::Number(Number::from(v))
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn sorts_keys_and_strips_whitespace() {
        let v: Value = serde_json::from_str(r#"{ "b": [1, 2], "a": {"z": null, "y": true} }"#).unwrap();
        assert_eq!(
            to_canonical_string(&v).unwrap(),
            r#"{"a":{"y":true,"z":null},"b":[1,2]}"#
        );
    }

    #[test]
    fn minimal_escapes() {
        let v = json!({"s": "q\"\\\n\u{1}é"});
        assert_eq!(to_canonical_string(&v).unwrap(), "{\"s\":\"q\\\"\\\\\\n\\u0001é\"}");
    }

    #[test]
    fn code_point_key_order() {
        let v = json!({"é": 1, "z": 2, "Z": 3});
        assert_eq!(to_canonical_string(&v).unwrap(), r#"{"Z":3,"z":2,"é":1}"#);
    }

    #[test]
    fn floats_rejected() {
        assert!(matches!(
            to_canonical_bytes(&json!({"x": 1.5})),
            Err(EncodingError::Float(_))
        ));
        assert!(parse_strict(br#"{"x":1.0}"#).is_err());
    }

    #[test]
    fn strict_rejections() {
        assert!(parse_strict(br#"{"a":1,"a":2}"#).is_err());
        assert!(parse_strict(br#"{"__proto__":{}}"#).is_err());
        assert!(parse_strict(br#"{"x":[{"constructor":1}]}"#).is_err());
        assert!(parse_strict(br#"{"a":-3}"#).is_ok());
    }

    #[test]
    fn canonical_check() {
        assert!(is_canonical(br#"{"a":1}"#));
        assert!(!is_canonical(br#"{"a": 1}"#));
        assert!(!is_canonical(br#"{"s":"\u001F"}"#));
        assert!(is_canonical(br#"{"s":"\u001f"}"#));
    }
}
