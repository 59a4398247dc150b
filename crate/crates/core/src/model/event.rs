//! Monitor events and their fixed per-kind payload schemas.
//!
//! | kind                 | required fields                                   | optional             |
//! |----------------------|---------------------------------------------------|----------------------|
//! | `checkpoint_created` | `path`, `digest` (or `error`)                     | `size_bytes`         |
//! | `checkpoint_modified`| `path`, `digest`, `previous_digest` (or `error`)  | `size_bytes`         |
//! | `epoch_start`        | `epoch`, `optimizer_config_hash`                  |                      |
//! | `epoch_end`          | `epoch`, `metrics`, `model_state_hash`            |                      |
//! | `layer_activation`   | `layer_id`, `stats`                               |                      |
//! | `gradient`           | `magnitude`                                       | `norm`, `param`      |
//! | `config_access`      | `key`, `version`                                  | `present`            |
//! | `config_update`      | `key`, `old`, `new`, `version`                    |                      |
//!
//! Digests are `sha256:` strings; `metrics` and `stats` are maps of numbers.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::digest::Digest;
use crate::time::Timestamp;
use crate::value::Value;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    CheckpointCreated,
    CheckpointModified,
    EpochStart,
    EpochEnd,
    LayerActivation,
    Gradient,
    ConfigAccess,
    ConfigUpdate,
}

impl EventKind {
    pub const ALL: [EventKind; 8] = [
        EventKind::CheckpointCreated,
        EventKind::CheckpointModified,
        EventKind::EpochStart,
        EventKind::EpochEnd,
        EventKind::LayerActivation,
        EventKind::Gradient,
        EventKind::ConfigAccess,
        EventKind::ConfigUpdate,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            EventKind::CheckpointCreated => "checkpoint_created",
            EventKind::CheckpointModified => "checkpoint_modified",
            EventKind::EpochStart => "epoch_start",
            EventKind::EpochEnd => "epoch_end",
            EventKind::LayerActivation => "layer_activation",
            EventKind::Gradient => "gradient",
            EventKind::ConfigAccess => "config_access",
            EventKind::ConfigUpdate => "config_update",
        }
    }
}

impl fmt::Display for EventKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EventKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        EventKind::ALL.into_iter().find(|k| k.as_str() == s).ok_or_else(|| format!("unknown event type `{s}`"))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("{kind} payload: {reason}")]
pub struct SchemaError {
    pub kind: EventKind,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonitorEvent {
    pub kind: EventKind,
    pub timestamp: Timestamp,
    pub payload: Value,
}

impl MonitorEvent {
    pub fn new(kind: EventKind, timestamp: Timestamp, payload: Value) -> Result<Self, SchemaError> {
        validate_payload(kind, &payload)?;
        Ok(MonitorEvent { kind, timestamp, payload })
    }

    pub fn validate(&self) -> Result<(), SchemaError> {
        validate_payload(self.kind, &self.payload)
    }
}

#[derive(Clone, Copy)]
enum Field {
    Str,
    Digest,
    NonNegInt,
    Number,
    NumberMap,
    Bool,
    Any,
}

fn check_field(kind: EventKind, name: &str, ty: Field, v: &Value) -> Result<(), SchemaError> {
    let ok = match ty {
        Field::Str => v.as_str().is_some(),
        Field::Digest => v.as_str().is_some_and(|s| s.parse::<Digest>().is_ok()),
        Field::NonNegInt => v.as_i64().is_some_and(|i| i >= 0),
        Field::Number => v.is_number() && !v.has_non_finite(),
        Field::NumberMap => v.as_map().is_some_and(|m| m.values().all(|x| x.is_number() && !x.has_non_finite())),
        Field::Bool => matches!(v, Value::Bool(_)),
        Field::Any => !v.has_non_finite(),
    };
    if ok {
        Ok(())
    } else {
        Err(SchemaError { kind, reason: format!("field `{name}` has the wrong type") })
    }
}

/// Checks `payload` against the schema table for `kind`.
pub fn validate_payload(kind: EventKind, payload: &Value) -> Result<(), SchemaError> {
    use Field::*;
    let err = |reason: String| SchemaError { kind, reason };
    let map = payload.as_map().ok_or_else(|| err("payload must be an object".into()))?;

    let is_checkpoint = matches!(kind, EventKind::CheckpointCreated | EventKind::CheckpointModified);
    let errored = is_checkpoint && map.contains_key("error");

    let (required, optional): (&[(&str, Field)], &[(&str, Field)]) = match kind {
        EventKind::CheckpointCreated if errored => (&[("path", Str), ("error", Str)], &[]),
        EventKind::CheckpointModified if errored => (&[("path", Str), ("error", Str)], &[("previous_digest", Digest)]),
        EventKind::CheckpointCreated => (&[("path", Str), ("digest", Digest)], &[("size_bytes", NonNegInt)]),
        EventKind::CheckpointModified => {
            (&[("path", Str), ("digest", Digest), ("previous_digest", Digest)], &[("size_bytes", NonNegInt)])
        }
        EventKind::EpochStart => (&[("epoch", NonNegInt), ("optimizer_config_hash", Digest)], &[]),
        EventKind::EpochEnd => (&[("epoch", NonNegInt), ("metrics", NumberMap), ("model_state_hash", Digest)], &[]),
        EventKind::LayerActivation => (&[("layer_id", Str), ("stats", NumberMap)], &[]),
        EventKind::Gradient => (&[("magnitude", Number)], &[("norm", Str), ("param", Str)]),
        EventKind::ConfigAccess => (&[("key", Str), ("version", NonNegInt)], &[("present", Bool)]),
        EventKind::ConfigUpdate => (&[("key", Str), ("old", Any), ("new", Any), ("version", NonNegInt)], &[]),
    };

    for (name, ty) in required {
        let v = map.get(*name).ok_or_else(|| err(format!("missing field `{name}`")))?;
        check_field(kind, name, *ty, v)?;
    }
    for (name, v) in map {
        if required.iter().any(|(n, _)| n == name) {
            continue;
        }
        match optional.iter().find(|(n, _)| n == name) {
            Some((_, ty)) => check_field(kind, name, *ty, v)?,
            None => return Err(err(format!("unexpected field `{name}`"))),
        }
    }
    if kind == EventKind::CheckpointModified && !errored && map.get("digest") == map.get("previous_digest") {
        return Err(err("modified checkpoint must change digest".into()));
    }
    Ok(())
}
