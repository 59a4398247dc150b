//! Canonical JSON encoding.
//!
//! Every signature and digest in the system is computed over these bytes, so
//! the encoding is fixed: object keys sorted by code point, no whitespace,
//! UTF-8, shortest round-trip number forms, and timestamps rendered by
//! [`crate::Timestamp`] as RFC-3339 UTC with millisecond precision.

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::digest::Digest;

#[derive(Debug, thiserror::Error)]
pub enum CanonicalError {
    #[error("encoding error: {0}")]
    Encode(String),
    #[error("decoding error: {0}")]
    Decode(#[from] serde_json::Error),
}

pub fn canonical_bytes<T: Serialize + ?Sized>(value: &T) -> Result<Vec<u8>, CanonicalError> {
    let tree = serde_json::to_value(value).map_err(|e| CanonicalError::Encode(e.to_string()))?;
    let mut out = Vec::with_capacity(256);
    write_value(&tree, &mut out)?;
    Ok(out)
}

pub fn canonical_string<T: Serialize + ?Sized>(value: &T) -> Result<String, CanonicalError> {
    // write_value only ever emits UTF-8
    canonical_bytes(value).map(|b| String::from_utf8(b).expect("canonical JSON is UTF-8"))
}

/// SHA-256 of the canonical encoding.
pub fn canonical_digest<T: Serialize + ?Sized>(value: &T) -> Result<Digest, CanonicalError> {
    canonical_bytes(value).map(|b| Digest::of(&b))
}

pub fn decode<T: DeserializeOwned>(bytes: &[u8]) -> Result<T, CanonicalError> {
    Ok(serde_json::from_slice(bytes)?)
}

fn write_value(v: &serde_json::Value, out: &mut Vec<u8>) -> Result<(), CanonicalError> {
    use serde_json::Value as J;
    match v {
        J::Null => out.extend_from_slice(b"null"),
        J::Bool(true) => out.extend_from_slice(b"true"),
        J::Bool(false) => out.extend_from_slice(b"false"),
        J::Number(n) => {
            if let Some(f) = n.as_f64() {
                if !f.is_finite() {
                    return Err(CanonicalError::Encode("non-finite number".into()));
                }
            }
            out.extend_from_slice(n.to_string().as_bytes());
        }
        J::String(s) => serde_json::to_writer(&mut *out, s).map_err(|e| CanonicalError::Encode(e.to_string()))?,
        J::Array(items) => {
            out.push(b'[');
            for (i, item) in items.iter().enumerate() {
                if i > 0 {
                    out.push(b',');
                }
                write_value(item, out)?;
            }
            out.push(b']');
        }
        J::Object(map) => {
            let mut keys: Vec<&String> = map.keys().collect();
            keys.sort_unstable();
            out.push(b'{');
            for (i, k) in keys.into_iter().enumerate() {
                if i > 0 {
                    out.push(b',');
                }
                serde_json::to_writer(&mut *out, k).map_err(|e| CanonicalError::Encode(e.to_string()))?;
                out.push(b':');
                write_value(&map[k], out)?;
            }
            out.push(b'}');
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::value::Value;

    #[test]
    fn empty_tree_is_two_bytes() {
        assert_eq!(canonical_bytes(&Value::map()).unwrap(), b"{}");
    }

    #[test]
    fn key_order_does_not_matter() {
        let a: serde_json::Value = serde_json::from_str(r#"{"b":1,"a":2}"#).unwrap();
        let b: serde_json::Value = serde_json::from_str(r#"{"a":2,"b":1}"#).unwrap();
        assert_eq!(canonical_bytes(&a).unwrap(), canonical_bytes(&b).unwrap());
        assert_eq!(canonical_bytes(&a).unwrap(), br#"{"a":2,"b":1}"#);
    }

    #[test]
    fn pipeline_parameters_sort_by_key() {
        let params = Value::map().with("learning_rate", 0.001).with("batch_size", 32).with("random_seed", 42);
        assert_eq!(canonical_string(&params).unwrap(), r#"{"batch_size":32,"learning_rate":0.001,"random_seed":42}"#);
    }

    #[test]
    fn non_finite_floats_fail() {
        for f in [f64::NAN, f64::INFINITY, f64::NEG_INFINITY] {
            let v = Value::map().with("x", f);
            assert!(matches!(canonical_bytes(&v), Err(CanonicalError::Encode(_))));
        }
    }

    #[test]
    fn code_point_order_and_escaping() {
        let v = Value::map().with("é", 1).with("z", 2).with("A", "a\"b\n");
        assert_eq!(canonical_string(&v).unwrap(), "{\"A\":\"a\\\"b\\n\",\"z\":2,\"é\":1}");
    }

    #[test]
    fn integers_and_floats_keep_their_forms() {
        let v = Value::List(vec![Value::Int(-7), Value::Float(1.0), Value::Float(1e-7), Value::Int(0)]);
        assert_eq!(canonical_string(&v).unwrap(), "[-7,1.0,1e-7,0]");
    }
}
