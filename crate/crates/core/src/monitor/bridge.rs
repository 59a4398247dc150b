//! Local socket bridge for in-process framework hooks.
//!
//! Frames are newline-delimited JSON objects with a `type` field. Event
//! frames carry the payload fields inline plus an optional RFC-3339
//! `timestamp` (required for `gradient`). Every frame gets exactly one reply
//! line: `{"ok":true,...}` or `{"ok":false,"reason":"..."}`.
//!
//! Control frames:
//!
//! - `{"type":"scan_checkpoints"}` registers checkpoints already on disk
//! - `{"type":"init_config","config":{...}}` returns a `tracking_id`
//! - `{"type":"config_get","tracking_id":..,"key":..}` returns `value`
//! - `{"type":"config_set","tracking_id":..,"key":..,"value":..}`

use std::collections::HashMap;
use std::io::{BufRead, BufReader, ErrorKind, Write};
use std::os::unix::net::{UnixListener, UnixStream};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::Duration;

use parking_lot::Mutex;
use serde_json::{json, Value as Json};

use super::checkpoint::CheckpointTracker;
use super::config::TrackedConfig;
use super::EventSink;
use crate::model::{EventKind, MonitorEvent};
use crate::time::{Clock, Timestamp};
use crate::value::Value;

const READ_POLL: Duration = Duration::from_millis(50);

#[derive(Debug, thiserror::Error)]
pub enum BridgeError {
    #[error("bridge socket {path}: {source}")]
    Bind { path: PathBuf, source: std::io::Error },
    #[error("bridge i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("bridge reply is not valid JSON: {0}")]
    BadReply(String),
}

#[derive(Debug, Default)]
pub struct BridgeStats {
    acked: AtomicU64,
    nacked: AtomicU64,
}

impl BridgeStats {
    /// Frames acknowledged that put exactly one event in the sink.
    pub fn acked_events(&self) -> u64 {
        self.acked.load(Ordering::SeqCst)
    }

    pub fn nacked(&self) -> u64 {
        self.nacked.load(Ordering::SeqCst)
    }
}

struct Shared {
    sink: EventSink,
    clock: Arc<dyn Clock>,
    stats: BridgeStats,
    tracker: Option<Arc<Mutex<CheckpointTracker>>>,
    configs: Mutex<HashMap<String, TrackedConfig>>,
    next_config: AtomicU64,
    stop: AtomicBool,
}

pub struct BridgeServer {
    path: PathBuf,
    shared: Arc<Shared>,
    acceptor: Option<JoinHandle<()>>,
    connections: Arc<Mutex<Vec<JoinHandle<()>>>>,
}

impl std::fmt::Debug for BridgeServer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("BridgeServer").field("path", &self.path).finish_non_exhaustive()
    }
}

impl BridgeServer {
    /// Binds `path`, replacing a stale socket file, and starts accepting.
    pub fn bind(
        path: &Path,
        sink: EventSink,
        clock: Arc<dyn Clock>,
        tracker: Option<Arc<Mutex<CheckpointTracker>>>,
    ) -> Result<Self, BridgeError> {
        if path.exists() {
            let _ = std::fs::remove_file(path);
        }
        let listener =
            UnixListener::bind(path).map_err(|source| BridgeError::Bind { path: path.to_owned(), source })?;
        let shared = Arc::new(Shared {
            sink,
            clock,
            stats: BridgeStats::default(),
            tracker,
            configs: Mutex::new(HashMap::new()),
            next_config: AtomicU64::new(1),
            stop: AtomicBool::new(false),
        });
        let connections: Arc<Mutex<Vec<JoinHandle<()>>>> = Arc::default();
        let acceptor = {
            let shared = Arc::clone(&shared);
            let connections = Arc::clone(&connections);
            std::thread::Builder::new()
                .name("bridge-accept".into())
                .spawn(move || {
                    for stream in listener.incoming() {
                        if shared.stop.load(Ordering::SeqCst) {
                            break;
                        }
                        let Ok(stream) = stream else { continue };
                        let shared = Arc::clone(&shared);
                        let handle = std::thread::spawn(move || serve_connection(stream, &shared));
                        connections.lock().push(handle);
                    }
                })
                .expect("spawn bridge acceptor")
        };
        Ok(BridgeServer { path: path.to_owned(), shared, acceptor: Some(acceptor), connections })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn stats(&self) -> &BridgeStats {
        &self.shared.stats
    }

    /// Stops accepting, waits for every connection to finish its buffered
    /// frames, and removes the socket file.
    pub fn stop(mut self) {
        self.shutdown();
    }

    /// Same as [`BridgeServer::stop`] but keeps the stats readable.
    pub fn shutdown(&mut self) {
        if self.shared.stop.swap(true, Ordering::SeqCst) {
            return;
        }
        // wake the blocking accept
        let _ = UnixStream::connect(&self.path);
        if let Some(a) = self.acceptor.take() {
            let _ = a.join();
        }
        for h in self.connections.lock().drain(..) {
            let _ = h.join();
        }
        let _ = std::fs::remove_file(&self.path);
    }
}

impl Drop for BridgeServer {
    fn drop(&mut self) {
        self.shutdown();
    }
}

fn serve_connection(stream: UnixStream, shared: &Shared) {
    if stream.set_read_timeout(Some(READ_POLL)).is_err() {
        return;
    }
    let Ok(mut writer) = stream.try_clone() else { return };
    let mut reader = BufReader::new(stream);
    let mut buf = Vec::new();
    loop {
        match reader.read_until(b'\n', &mut buf) {
            Ok(0) => break,
            Ok(_) if buf.ends_with(b"\n") => {
                let reply = handle_frame(&buf, shared);
                buf.clear();
                let mut line = serde_json::to_vec(&reply).expect("reply serializes");
                line.push(b'\n');
                if writer.write_all(&line).is_err() {
                    break;
                }
            }
            // EOF in the middle of a line
            Ok(_) => break,
            Err(e) if matches!(e.kind(), ErrorKind::WouldBlock | ErrorKind::TimedOut | ErrorKind::Interrupted) => {
                if shared.stop.load(Ordering::SeqCst) && buf.is_empty() {
                    break;
                }
            }
            Err(_) => break,
        }
    }
}

fn nack(shared: &Shared, reason: String) -> Json {
    shared.stats.nacked.fetch_add(1, Ordering::SeqCst);
    json!({"ok": false, "reason": reason})
}

fn emit(shared: &Shared, event: MonitorEvent) {
    shared.sink.push(event);
    shared.stats.acked.fetch_add(1, Ordering::SeqCst);
}

fn handle_frame(line: &[u8], shared: &Shared) -> Json {
    let frame: Json = match serde_json::from_slice(line) {
        Ok(f) => f,
        Err(e) => return nack(shared, format!("malformed: {e}")),
    };
    let Json::Object(mut obj) = frame else {
        return nack(shared, "malformed: frame must be an object".into());
    };
    let Some(Json::String(ty)) = obj.remove("type") else {
        return nack(shared, "malformed: missing `type`".into());
    };
    match ty.as_str() {
        "scan_checkpoints" => {
            let Some(tracker) = &shared.tracker else {
                return nack(shared, "no checkpoint directory is being watched".into());
            };
            match tracker.lock().scan() {
                Ok(events) => {
                    let count = events.len();
                    shared.sink.extend(events);
                    json!({"ok": true, "count": count})
                }
                Err(e) => nack(shared, format!("scan: {e}")),
            }
        }
        "init_config" => {
            let config = match obj.remove("config").map(Value::from_json) {
                Some(Value::Map(m)) => m,
                _ => return nack(shared, "malformed: `config` must be an object".into()),
            };
            let id = format!("cfg-{}", shared.next_config.fetch_add(1, Ordering::SeqCst));
            match TrackedConfig::new(id.clone(), config, Arc::clone(&shared.clock)) {
                Ok(cfg) => {
                    let hash = cfg.state_hash().to_string();
                    shared.configs.lock().insert(id.clone(), cfg);
                    json!({"ok": true, "tracking_id": id, "state_hash": hash})
                }
                Err(e) => nack(shared, e.to_string()),
            }
        }
        "config_get" | "config_set" => {
            let (Some(Json::String(id)), Some(Json::String(key))) = (obj.get("tracking_id"), obj.get("key")) else {
                return nack(shared, "malformed: `tracking_id` and `key` are required".into());
            };
            let mut configs = shared.configs.lock();
            let Some(cfg) = configs.get_mut(id) else {
                return nack(shared, format!("unknown tracking id `{id}`"));
            };
            if ty == "config_get" {
                let (value, event) = cfg.get(key);
                emit(shared, event);
                json!({"ok": true, "value": value.map(|v| serde_json::to_value(v).unwrap_or(Json::Null))})
            } else {
                let value = Value::from_json(obj.get("value").cloned().unwrap_or(Json::Null));
                match cfg.set(key, value) {
                    Ok(event) => {
                        let version = cfg.version();
                        emit(shared, event);
                        json!({"ok": true, "version": version})
                    }
                    Err(e) => nack(shared, e.to_string()),
                }
            }
        }
        other => {
            let kind: EventKind = match other.parse() {
                Ok(k) => k,
                Err(e) => return nack(shared, format!("malformed: {e}")),
            };
            let timestamp = match obj.remove("timestamp") {
                Some(Json::String(s)) => match Timestamp::parse(&s) {
                    Ok(t) => t,
                    Err(e) => return nack(shared, format!("malformed: timestamp: {e}")),
                },
                Some(_) => return nack(shared, "malformed: timestamp must be a string".into()),
                None if kind == EventKind::Gradient => {
                    return nack(shared, "schema: gradient frames must carry a timestamp".into())
                }
                None => shared.clock.now(),
            };
            let payload = Value::from_json(Json::Object(obj));
            match MonitorEvent::new(kind, timestamp, payload) {
                Ok(event) => {
                    emit(shared, event);
                    json!({"ok": true})
                }
                Err(e) => nack(shared, format!("schema: {e}")),
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BridgeReply {
    pub ok: bool,
    pub reason: Option<String>,
    pub body: Json,
}

/// Blocking client for the bridge protocol.
#[derive(Debug)]
pub struct BridgeClient {
    writer: UnixStream,
    reader: BufReader<UnixStream>,
}

impl BridgeClient {
    pub fn connect(path: &Path) -> Result<Self, BridgeError> {
        let writer = UnixStream::connect(path)?;
        let reader = BufReader::new(writer.try_clone()?);
        Ok(BridgeClient { writer, reader })
    }

    pub fn send(&mut self, frame: &Json) -> Result<BridgeReply, BridgeError> {
        let mut line = serde_json::to_vec(frame).map_err(|e| BridgeError::BadReply(e.to_string()))?;
        line.push(b'\n');
        self.send_raw(&line)
    }

    /// Sends pre-encoded bytes, which must end in a newline.
    pub fn send_raw(&mut self, line: &[u8]) -> Result<BridgeReply, BridgeError> {
        self.writer.write_all(line)?;
        let mut reply = String::new();
        if self.reader.read_line(&mut reply)? == 0 {
            return Err(BridgeError::Io(std::io::Error::new(ErrorKind::UnexpectedEof, "bridge closed")));
        }
        let body: Json = serde_json::from_str(&reply).map_err(|e| BridgeError::BadReply(e.to_string()))?;
        Ok(BridgeReply {
            ok: body.get("ok").and_then(Json::as_bool).unwrap_or(false),
            reason: body.get("reason").and_then(Json::as_str).map(str::to_owned),
            body,
        })
    }
}
