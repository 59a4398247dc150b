//! Versioned configuration tracking.
//!
//! Every read and write goes through [`TrackedConfig`] and yields an event,
//! so the final state can be reproduced from the initial mapping plus the
//! recorded updates.

use std::sync::Arc;

use crate::canonical::{canonical_digest, CanonicalError};
use crate::digest::Digest;
use crate::model::{EventKind, MonitorEvent};
use crate::time::Clock;
use crate::value::{Map, Value};

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("config value for `{0}` is not encodable")]
    NotEncodable(String),
    #[error(transparent)]
    Canonical(#[from] CanonicalError),
    #[error("replay: {0}")]
    Replay(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConfigSnapshot {
    pub version: u64,
    pub state_hash: Digest,
}

pub struct TrackedConfig {
    tracking_id: String,
    entries: Map,
    version: u64,
    state_hash: Digest,
    history: Vec<ConfigSnapshot>,
    clock: Arc<dyn Clock>,
}

impl std::fmt::Debug for TrackedConfig {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("TrackedConfig")
            .field("tracking_id", &self.tracking_id)
            .field("version", &self.version)
            .field("state_hash", &self.state_hash)
            .finish()
    }
}

impl TrackedConfig {
    pub fn new(tracking_id: impl Into<String>, entries: Map, clock: Arc<dyn Clock>) -> Result<Self, ConfigError> {
        if let Some((k, _)) = entries.iter().find(|(_, v)| v.has_non_finite()) {
            return Err(ConfigError::NotEncodable(k.clone()));
        }
        let state_hash = canonical_digest(&entries)?;
        Ok(TrackedConfig {
            tracking_id: tracking_id.into(),
            entries,
            version: 0,
            state_hash,
            history: vec![ConfigSnapshot { version: 0, state_hash }],
            clock,
        })
    }

    pub fn tracking_id(&self) -> &str {
        &self.tracking_id
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn state_hash(&self) -> Digest {
        self.state_hash
    }

    pub fn entries(&self) -> &Map {
        &self.entries
    }

    /// One snapshot per version, starting at 0.
    pub fn history(&self) -> &[ConfigSnapshot] {
        &self.history
    }

    pub fn get(&self, key: &str) -> (Option<Value>, MonitorEvent) {
        let value = self.entries.get(key).cloned();
        let payload = Value::map().with("key", key).with("version", self.version).with("present", value.is_some());
        let event = MonitorEvent { kind: EventKind::ConfigAccess, timestamp: self.clock.now(), payload };
        (value, event)
    }

    /// Writes `value` under `key`, bumps the version and returns the update
    /// event. Non-finite numbers are refused before any state changes.
    pub fn set(&mut self, key: &str, value: Value) -> Result<MonitorEvent, ConfigError> {
        if value.has_non_finite() {
            return Err(ConfigError::NotEncodable(key.to_owned()));
        }
        let old = self.entries.insert(key.to_owned(), value.clone()).unwrap_or(Value::Null);
        self.version += 1;
        self.state_hash = canonical_digest(&self.entries)?;
        self.history.push(ConfigSnapshot { version: self.version, state_hash: self.state_hash });
        let payload = Value::map().with("key", key).with("old", old).with("new", value).with("version", self.version);
        Ok(MonitorEvent { kind: EventKind::ConfigUpdate, timestamp: self.clock.now(), payload })
    }
}

/// Applies the `config_update` events in `events`, in order, to `initial`.
/// Returns the final mapping and its version.
pub fn replay_updates(initial: Map, events: &[MonitorEvent]) -> Result<(Map, u64), ConfigError> {
    let mut entries = initial;
    let mut version = 0;
    for ev in events.iter().filter(|e| e.kind == EventKind::ConfigUpdate) {
        let key = ev
            .payload
            .get("key")
            .and_then(Value::as_str)
            .ok_or_else(|| ConfigError::Replay("update without key".into()))?;
        let new = ev.payload.get("new").cloned().ok_or_else(|| ConfigError::Replay("update without value".into()))?;
        let v = ev
            .payload
            .get("version")
            .and_then(Value::as_i64)
            .ok_or_else(|| ConfigError::Replay("update without version".into()))?;
        if v as u64 != version + 1 {
            return Err(ConfigError::Replay(format!("version {v} follows {version}")));
        }
        entries.insert(key.to_owned(), new);
        version += 1;
    }
    Ok((entries, version))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::time::{SteppingClock, Timestamp};
    use proptest::prelude::*;

    fn clock() -> Arc<dyn Clock> {
        Arc::new(SteppingClock::new(Timestamp::EPOCH, 1))
    }

    fn initial() -> Map {
        let Value::Map(m) = Value::map().with("learning_rate", 0.001).with("batch_size", 32) else { unreachable!() };
        m
    }

    #[test]
    fn get_emits_access_event() {
        let cfg = TrackedConfig::new("cfg-1", initial(), clock()).unwrap();
        let (v, ev) = cfg.get("batch_size");
        assert_eq!(v, Some(Value::Int(32)));
        assert_eq!(ev.kind, EventKind::ConfigAccess);
        ev.validate().unwrap();
        let (missing, ev) = cfg.get("momentum");
        assert!(missing.is_none());
        assert_eq!(ev.payload.get("present"), Some(&Value::Bool(false)));
    }

    #[test]
    fn set_bumps_version_and_hash() {
        let mut cfg = TrackedConfig::new("cfg-1", initial(), clock()).unwrap();
        let h0 = cfg.state_hash();
        let ev = cfg.set("learning_rate", Value::Float(0.01)).unwrap();
        ev.validate().unwrap();
        assert_eq!(cfg.version(), 1);
        assert_ne!(cfg.state_hash(), h0);
        assert_eq!(ev.payload.get("old"), Some(&Value::Float(0.001)));
        assert_eq!(cfg.history().len(), 2);
    }

    #[test]
    fn non_finite_is_refused_without_state_change() {
        let mut cfg = TrackedConfig::new("cfg-1", initial(), clock()).unwrap();
        let h0 = cfg.state_hash();
        assert!(cfg.set("learning_rate", Value::Float(f64::NAN)).is_err());
        assert_eq!(cfg.version(), 0);
        assert_eq!(cfg.state_hash(), h0);
    }

    proptest! {
        #[test]
        fn replay_reconstructs_final_state(ops in proptest::collection::vec(("[a-d]", -1000i64..1000), 0..40)) {
            let mut cfg = TrackedConfig::new("cfg", initial(), clock()).unwrap();
            let mut events = Vec::new();
            for (k, v) in &ops {
                events.push(cfg.get(k).1);
                events.push(cfg.set(k, Value::Int(*v)).unwrap());
            }
            let (state, version) = replay_updates(initial(), &events).unwrap();
            prop_assert_eq!(version, cfg.version());
            prop_assert_eq!(&state, cfg.entries());
            prop_assert_eq!(canonical_digest(&state).unwrap(), cfg.state_hash());
        }
    }
}
