//! Checkpoint file monitoring.
//!
//! [`CheckpointTracker`] holds the digest-tracking state machine; it is pure
//! apart from reading files. [`CheckpointWatcher`] drives it from filesystem
//! notifications on a background thread, coalescing bursts of notifications
//! per path over a debounce window so partially written files are hashed
//! once they settle.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc;
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::{Duration, Instant, SystemTime};

use notify::{EventKind as FsEventKind, RecursiveMode, Watcher};
use parking_lot::Mutex;
use serde::{Deserialize, Serialize};

use super::EventSink;
use crate::digest::Digest;
use crate::model::{measure, ArtifactRole, EventKind, MonitorEvent};
use crate::time::{Clock, Timestamp};
use crate::value::Value;

pub const DEFAULT_EXTENSIONS: &[&str] = &["pt", "ckpt", "safetensors"];
pub const DEFAULT_DEBOUNCE: Duration = Duration::from_millis(200);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckpointChange {
    Created,
    Modified,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckpointRecord {
    pub path: String,
    pub digest: Digest,
    pub observed_at: Timestamp,
    pub change: CheckpointChange,
    pub previous_digest: Option<Digest>,
    pub size_bytes: u64,
}

impl CheckpointRecord {
    pub fn to_event(&self) -> MonitorEvent {
        let kind = match self.change {
            CheckpointChange::Created => EventKind::CheckpointCreated,
            CheckpointChange::Modified => EventKind::CheckpointModified,
        };
        let mut payload = Value::map()
            .with("path", self.path.as_str())
            .with("digest", self.digest.to_string())
            .with("size_bytes", self.size_bytes);
        if let Some(prev) = self.previous_digest {
            payload = payload.with("previous_digest", prev.to_string());
        }
        MonitorEvent { kind, timestamp: self.observed_at, payload }
    }
}

pub struct CheckpointTracker {
    dir: PathBuf,
    extensions: Vec<String>,
    digests: HashMap<PathBuf, Digest>,
    // size and mtime as of the last hash, read before hashing
    stamps: HashMap<PathBuf, (u64, SystemTime)>,
    clock: Arc<dyn Clock>,
}

impl std::fmt::Debug for CheckpointTracker {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("CheckpointTracker").field("dir", &self.dir).field("tracked", &self.digests.len()).finish()
    }
}

impl CheckpointTracker {
    pub fn new(dir: impl Into<PathBuf>, extensions: &[&str], clock: Arc<dyn Clock>) -> Self {
        CheckpointTracker {
            dir: dir.into(),
            extensions: extensions.iter().map(|e| e.trim_start_matches('.').to_owned()).collect(),
            digests: HashMap::new(),
            stamps: HashMap::new(),
            clock,
        }
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn is_checkpoint(&self, path: &Path) -> bool {
        path.extension().and_then(|e| e.to_str()).is_some_and(|e| self.extensions.iter().any(|x| x == e))
    }

    /// Digests of every tracked checkpoint.
    pub fn tracked(&self) -> &HashMap<PathBuf, Digest> {
        &self.digests
    }

    /// Registers every checkpoint present in the directory. Files whose size
    /// and mtime are unchanged since they were last hashed are skipped.
    pub fn scan(&mut self) -> std::io::Result<Vec<MonitorEvent>> {
        let mut paths: Vec<PathBuf> = std::fs::read_dir(&self.dir)?
            .filter_map(Result::ok)
            .map(|e| e.path())
            .filter(|p| p.is_file() && self.is_checkpoint(p))
            .filter(|p| self.stamps.get(p).map_or(true, |s| stamp(p) != Some(*s)))
            .collect();
        paths.sort();
        Ok(paths.iter().filter_map(|p| self.observe(p)).collect())
    }

    /// Hashes `path` and reports a creation, a content change, or nothing
    /// when the digest is unchanged. Read failures surface as an event with
    /// an `error` annotation and leave tracking state untouched.
    pub fn observe(&mut self, path: &Path) -> Option<MonitorEvent> {
        if !self.is_checkpoint(path) {
            return None;
        }
        let previous = self.digests.get(path).copied();
        let observed_at = self.clock.now();
        let before = stamp(path);
        let measured = std::fs::File::open(path).map_err(|e| e.to_string()).and_then(|f| {
            measure(std::io::BufReader::new(f), "", ArtifactRole::Checkpoint).map_err(|e| e.source.to_string())
        });
        let m = match measured {
            Ok(m) => m,
            Err(error) => {
                if !path.exists() {
                    self.forget(path);
                    return None;
                }
                let kind =
                    if previous.is_some() { EventKind::CheckpointModified } else { EventKind::CheckpointCreated };
                let mut payload = Value::map().with("path", path.display().to_string()).with("error", error);
                if let Some(prev) = previous {
                    payload = payload.with("previous_digest", prev.to_string());
                }
                return Some(MonitorEvent { kind, timestamp: observed_at, payload });
            }
        };
        match before {
            Some(st) => self.stamps.insert(path.to_owned(), st),
            None => self.stamps.remove(path),
        };
        let change = match previous {
            None => CheckpointChange::Created,
            Some(prev) if prev != m.digest => CheckpointChange::Modified,
            Some(_) => return None,
        };
        self.digests.insert(path.to_owned(), m.digest);
        let record = CheckpointRecord {
            path: path.display().to_string(),
            digest: m.digest,
            observed_at,
            change,
            previous_digest: previous,
            size_bytes: m.size_bytes,
        };
        Some(record.to_event())
    }

    pub fn forget(&mut self, path: &Path) {
        self.digests.remove(path);
        self.stamps.remove(path);
    }
}

fn stamp(path: &Path) -> Option<(u64, SystemTime)> {
    let md = std::fs::metadata(path).ok()?;
    Some((md.len(), md.modified().ok()?))
}

/// Background filesystem watcher feeding checkpoint events into a sink.
pub struct CheckpointWatcher {
    tracker: Arc<Mutex<CheckpointTracker>>,
    stop: Arc<AtomicBool>,
    thread: Option<JoinHandle<()>>,
}

impl std::fmt::Debug for CheckpointWatcher {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("CheckpointWatcher").finish_non_exhaustive()
    }
}

#[derive(Debug, thiserror::Error)]
pub enum WatchError {
    #[error("watch directory {0} does not exist")]
    MissingDir(PathBuf),
    #[error("filesystem watcher: {0}")]
    Notify(#[from] notify::Error),
    #[error("initial scan: {0}")]
    Io(#[from] std::io::Error),
}

impl CheckpointWatcher {
    /// Starts watching `tracker`'s directory. Registration happens before the
    /// initial scan so no write can fall between the two.
    pub fn start(tracker: CheckpointTracker, sink: EventSink, debounce: Duration) -> Result<Self, WatchError> {
        let dir = tracker.dir().to_owned();
        if !dir.is_dir() {
            return Err(WatchError::MissingDir(dir));
        }
        let (tx, rx) = mpsc::channel::<notify::Result<notify::Event>>();
        let mut watcher = notify::recommended_watcher(tx)?;
        watcher.watch(&dir, RecursiveMode::NonRecursive)?;

        let tracker = Arc::new(Mutex::new(tracker));
        sink.extend(tracker.lock().scan()?);

        let stop = Arc::new(AtomicBool::new(false));
        let thread = {
            let tracker = Arc::clone(&tracker);
            let stop = Arc::clone(&stop);
            std::thread::Builder::new()
                .name("checkpoint-watcher".into())
                .spawn(move || {
                    // keep the watcher alive for the lifetime of the loop
                    let _watcher = watcher;
                    run_watch_loop(rx, &tracker, &sink, &stop, debounce);
                })
                .expect("spawn watcher thread")
        };
        Ok(CheckpointWatcher { tracker, stop, thread: Some(thread) })
    }

    pub fn tracker(&self) -> Arc<Mutex<CheckpointTracker>> {
        Arc::clone(&self.tracker)
    }

    /// Flushes pending paths and stops the thread.
    pub fn stop(mut self) {
        self.shutdown();
    }

    fn shutdown(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

impl Drop for CheckpointWatcher {
    fn drop(&mut self) {
        self.shutdown();
    }
}

fn run_watch_loop(
    rx: mpsc::Receiver<notify::Result<notify::Event>>,
    tracker: &Mutex<CheckpointTracker>,
    sink: &EventSink,
    stop: &AtomicBool,
    debounce: Duration,
) {
    let tick = (debounce / 4).clamp(Duration::from_millis(1), Duration::from_millis(10));
    let mut pending: HashMap<PathBuf, Instant> = HashMap::new();
    loop {
        match rx.recv_timeout(tick) {
            Ok(Ok(event)) => {
                if matches!(event.kind, FsEventKind::Remove(_)) {
                    let mut t = tracker.lock();
                    for p in &event.paths {
                        t.forget(p);
                        pending.remove(p);
                    }
                } else if matches!(event.kind, FsEventKind::Create(_) | FsEventKind::Modify(_) | FsEventKind::Any) {
                    let now = Instant::now();
                    for p in event.paths {
                        pending.insert(p, now);
                    }
                }
            }
            Ok(Err(e)) => log::warn!("watcher error: {e}"),
            Err(mpsc::RecvTimeoutError::Timeout) => {}
            Err(mpsc::RecvTimeoutError::Disconnected) => break,
        }
        let stopping = stop.load(Ordering::SeqCst);
        let now = Instant::now();
        let mut due: Vec<PathBuf> = pending
            .iter()
            .filter(|(_, t)| stopping || now.duration_since(**t) >= debounce)
            .map(|(p, _)| p.clone())
            .collect();
        if !due.is_empty() {
            due.sort();
            let mut t = tracker.lock();
            for p in due {
                pending.remove(&p);
                if let Some(ev) = t.observe(&p) {
                    sink.push(ev);
                }
            }
        }
        if stopping {
            // drain anything the OS queued before the stop request
            while let Ok(Ok(event)) = rx.try_recv() {
                let mut t = tracker.lock();
                for p in event.paths {
                    if let Some(ev) = t.observe(&p) {
                        sink.push(ev);
                    }
                }
            }
            // notifications can trail the write; a final scan closes the gap
            match tracker.lock().scan() {
                Ok(events) => sink.extend(events),
                Err(e) => log::warn!("final checkpoint scan: {e}"),
            }
            break;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::time::SystemClock;

    fn tracker(dir: &Path) -> CheckpointTracker {
        CheckpointTracker::new(dir, DEFAULT_EXTENSIONS, Arc::new(SystemClock))
    }

    #[test]
    fn new_file_is_created_event() {
        let tmp = tempfile::tempdir().unwrap();
        let mut t = tracker(tmp.path());
        let p = tmp.path().join("ckpt-1.pt");
        std::fs::write(&p, b"weights-v1").unwrap();
        let ev = t.observe(&p).unwrap();
        assert_eq!(ev.kind, EventKind::CheckpointCreated);
        assert_eq!(ev.payload.get("digest").unwrap().as_str().unwrap(), Digest::of(b"weights-v1").to_string());
        ev.validate().unwrap();
    }

    #[test]
    fn identical_rewrite_is_silent() {
        let tmp = tempfile::tempdir().unwrap();
        let mut t = tracker(tmp.path());
        let p = tmp.path().join("ckpt-1.pt");
        std::fs::write(&p, b"same").unwrap();
        assert!(t.observe(&p).is_some());
        std::fs::write(&p, b"same").unwrap();
        assert!(t.observe(&p).is_none());
    }

    #[test]
    fn appended_byte_is_modified_with_both_digests() {
        let tmp = tempfile::tempdir().unwrap();
        let mut t = tracker(tmp.path());
        let p = tmp.path().join("model.safetensors");
        std::fs::write(&p, b"abc").unwrap();
        t.observe(&p);
        std::fs::write(&p, b"abcd").unwrap();
        let ev = t.observe(&p).unwrap();
        assert_eq!(ev.kind, EventKind::CheckpointModified);
        // independent oracle values for SHA-256("abc") and SHA-256("abcd")
        assert_eq!(
            ev.payload.get("previous_digest").unwrap().as_str().unwrap(),
            "sha256:ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
        assert_eq!(
            ev.payload.get("digest").unwrap().as_str().unwrap(),
            "sha256:88d4266fd4e6338d13b845fcf289579d209c897823b9217da3e161936f031589"
        );
        ev.validate().unwrap();
    }

    #[test]
    fn rescan_catches_same_size_rewrite() {
        let tmp = tempfile::tempdir().unwrap();
        let mut t = tracker(tmp.path());
        let p = tmp.path().join("w.pt");
        std::fs::write(&p, b"abc").unwrap();
        assert_eq!(t.scan().unwrap().len(), 1);
        std::thread::sleep(Duration::from_millis(20));
        std::fs::write(&p, b"abd").unwrap();
        let events = t.scan().unwrap();
        assert_eq!(events.len(), 1);
        assert_eq!(events[0].kind, EventKind::CheckpointModified);
    }

    #[test]
    fn non_checkpoint_files_are_ignored() {
        let tmp = tempfile::tempdir().unwrap();
        let mut t = tracker(tmp.path());
        let p = tmp.path().join("notes.txt");
        std::fs::write(&p, b"x").unwrap();
        assert!(t.observe(&p).is_none());
    }

    #[test]
    fn scan_registers_existing_files_in_path_order() {
        let tmp = tempfile::tempdir().unwrap();
        for name in ["b.ckpt", "a.pt", "c.txt"] {
            std::fs::write(tmp.path().join(name), name).unwrap();
        }
        let mut t = tracker(tmp.path());
        let events = t.scan().unwrap();
        let paths: Vec<_> =
            events.iter().map(|e| e.payload.get("path").unwrap().as_str().unwrap().to_owned()).collect();
        assert_eq!(events.len(), 2);
        assert!(paths[0].ends_with("a.pt") && paths[1].ends_with("b.ckpt"));
        assert!(t.scan().unwrap().is_empty());
    }

    #[cfg(unix)]
    #[test]
    fn unreadable_file_is_annotated_not_fatal() {
        use std::os::unix::fs::PermissionsExt;
        let tmp = tempfile::tempdir().unwrap();
        let p = tmp.path().join("locked.pt");
        std::fs::write(&p, b"secret").unwrap();
        std::fs::set_permissions(&p, std::fs::Permissions::from_mode(0o000)).unwrap();
        if std::fs::read(&p).is_ok() {
            // running as root: permissions are not enforced
            return;
        }
        let mut t = tracker(tmp.path());
        let ev = t.observe(&p).unwrap();
        assert!(ev.payload.get("error").is_some());
        ev.validate().unwrap();
        assert!(t.tracked().is_empty());
    }

    fn wait_for(sink: &EventSink, n: usize) {
        let deadline = Instant::now() + Duration::from_secs(5);
        while sink.len() < n && Instant::now() < deadline {
            std::thread::sleep(Duration::from_millis(5));
        }
    }

    #[test]
    fn watcher_debounces_a_burst_into_one_event() {
        let tmp = tempfile::tempdir().unwrap();
        let sink = EventSink::new();
        let w = CheckpointWatcher::start(tracker(tmp.path()), sink.clone(), Duration::from_millis(100)).unwrap();
        let p = tmp.path().join("epoch-1.pt");
        for i in 0..10u8 {
            std::fs::write(&p, vec![i; 1000]).unwrap();
        }
        wait_for(&sink, 1);
        std::thread::sleep(Duration::from_millis(250));
        w.stop();
        let events = sink.drain_ordered();
        assert_eq!(events.len(), 1, "{events:?}");
        assert_eq!(events[0].payload.get("digest").unwrap().as_str().unwrap(), Digest::of(&[9u8; 1000]).to_string());
    }

    #[test]
    fn stop_flushes_pending_and_then_goes_quiet() {
        let tmp = tempfile::tempdir().unwrap();
        std::fs::write(tmp.path().join("pre.ckpt"), b"before start").unwrap();
        let sink = EventSink::new();
        let w = CheckpointWatcher::start(tracker(tmp.path()), sink.clone(), Duration::from_secs(60)).unwrap();
        assert_eq!(sink.len(), 1);
        std::fs::write(tmp.path().join("a.pt"), b"1").unwrap();
        std::fs::write(tmp.path().join("b.pt"), b"2").unwrap();
        // debounce is far away; stop must still record both writes
        w.stop();
        assert_eq!(sink.len(), 3);
        std::fs::write(tmp.path().join("c.pt"), b"3").unwrap();
        std::thread::sleep(Duration::from_millis(50));
        assert_eq!(sink.len(), 3);
    }
}
