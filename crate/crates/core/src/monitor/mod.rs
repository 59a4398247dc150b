//! Runtime monitoring: checkpoint watching, configuration tracking, the
//! framework bridge, and the attestation sidecar that seals a run.

pub mod bridge;
pub mod cache;
pub mod checkpoint;
pub mod config;
pub mod sidecar;
mod sink;

use std::path::PathBuf;
use std::sync::Arc;
use std::time::Duration;

pub use bridge::{BridgeClient, BridgeError, BridgeReply, BridgeServer};
pub use cache::{CacheStats, ManifestCache};
pub use checkpoint::{
    CheckpointRecord, CheckpointTracker, CheckpointWatcher, WatchError, DEFAULT_DEBOUNCE, DEFAULT_EXTENSIONS,
};
pub use config::{replay_updates, ConfigError, TrackedConfig};
pub use sidecar::{event_assertion_count, AttestError, AttestationClient, Finalized, PipelineSession, Transformation};
pub use sink::EventSink;

use crate::model::MonitorEvent;
use crate::time::Clock;

#[derive(Debug, Clone)]
pub struct MonitorConfig {
    pub checkpoint_dir: Option<PathBuf>,
    pub socket: Option<PathBuf>,
    pub extensions: Vec<String>,
    pub debounce: Duration,
}

impl Default for MonitorConfig {
    fn default() -> Self {
        MonitorConfig {
            checkpoint_dir: None,
            socket: None,
            extensions: DEFAULT_EXTENSIONS.iter().map(|s| s.to_string()).collect(),
            debounce: DEFAULT_DEBOUNCE,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum MonitorError {
    #[error(transparent)]
    Watch(#[from] WatchError),
    #[error(transparent)]
    Bridge(#[from] BridgeError),
}

/// A checkpoint watcher and a bridge server feeding one event sink.
#[derive(Debug)]
pub struct Monitor {
    sink: EventSink,
    watcher: Option<CheckpointWatcher>,
    bridge: Option<BridgeServer>,
}

/// Outcome of [`Monitor::finish`].
#[derive(Debug, Clone)]
pub struct Drained {
    pub events: Vec<MonitorEvent>,
    /// Bridge frames acknowledged with an event.
    pub acked_frames: u64,
}

impl Monitor {
    pub fn start(config: &MonitorConfig, clock: Arc<dyn Clock>) -> Result<Self, MonitorError> {
        let sink = EventSink::new();
        let watcher = match &config.checkpoint_dir {
            Some(dir) => {
                let exts: Vec<&str> = config.extensions.iter().map(String::as_str).collect();
                let tracker = CheckpointTracker::new(dir, &exts, Arc::clone(&clock));
                Some(CheckpointWatcher::start(tracker, sink.clone(), config.debounce)?)
            }
            None => None,
        };
        let bridge = match &config.socket {
            Some(path) => Some(BridgeServer::bind(path, sink.clone(), clock, watcher.as_ref().map(|w| w.tracker()))?),
            None => None,
        };
        Ok(Monitor { sink, watcher, bridge })
    }

    pub fn sink(&self) -> &EventSink {
        &self.sink
    }

    pub fn bridge(&self) -> Option<&BridgeServer> {
        self.bridge.as_ref()
    }

    /// Stops every producer, then drains. Nothing can be queued after this
    /// returns, so the drained list is the complete record of the run.
    pub fn finish(mut self) -> Drained {
        let acked_frames = match self.bridge.take() {
            Some(mut b) => {
                b.shutdown();
                b.stats().acked_events()
            }
            None => 0,
        };
        if let Some(w) = self.watcher.take() {
            w.stop();
        }
        Drained { events: self.sink.drain_ordered(), acked_frames }
    }
}
