use std::sync::Arc;

use parking_lot::Mutex;

use crate::model::MonitorEvent;

/// The single ordered queue every observer feeds.
#[derive(Debug, Clone, Default)]
pub struct EventSink {
    events: Arc<Mutex<Vec<MonitorEvent>>>,
}

impl EventSink {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&self, event: MonitorEvent) {
        self.events.lock().push(event);
    }

    pub fn extend(&self, events: impl IntoIterator<Item = MonitorEvent>) {
        self.events.lock().extend(events);
    }

    pub fn len(&self) -> usize {
        self.events.lock().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Takes every buffered event, stably sorted by timestamp.
    pub fn drain_ordered(&self) -> Vec<MonitorEvent> {
        let mut out = std::mem::take(&mut *self.events.lock());
        out.sort_by_key(|e| e.timestamp);
        out
    }
}
