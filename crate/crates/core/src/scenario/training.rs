//! A small deterministic "training loop" used to exercise the monitor.
//!
//! It does real floating-point work on a weight vector, writes a `.pt`
//! checkpoint per epoch when given a directory, and reports the usual
//! framework events through an [`EventReporter`].

use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde_json::Value as Json;

use super::ScenarioError;
use crate::canonical::canonical_digest;
use crate::digest::Digest;
use crate::model::{EventKind, MonitorEvent};
use crate::monitor::{BridgeClient, BridgeError, Drained, Monitor, MonitorConfig};
use crate::time::Clock;
use crate::value::Value;

#[derive(Debug, Clone)]
pub struct TrainingSpec {
    pub epochs: usize,
    pub layers: usize,
    pub params: usize,
    /// Inner update passes over the weights per epoch.
    pub passes_per_epoch: usize,
    pub checkpoint_dir: Option<PathBuf>,
    pub seed: u64,
}

impl TrainingSpec {
    /// 4 epochs × 2 layers: five events per epoch, twenty in total.
    pub fn twenty_events(seed: u64) -> Self {
        TrainingSpec { epochs: 4, layers: 2, params: 4096, passes_per_epoch: 2, checkpoint_dir: None, seed }
    }

    pub fn events_per_run(&self) -> usize {
        self.epochs * (3 + self.layers)
    }

    pub fn to_value(&self) -> Value {
        Value::map()
            .with("epochs", self.epochs)
            .with("layers", self.layers)
            .with("params", self.params)
            .with("passes_per_epoch", self.passes_per_epoch)
            .with("seed", self.seed)
    }
}

pub trait EventReporter {
    fn report(&mut self, kind: EventKind, payload: Value) -> Result<(), ScenarioError>;
}

/// Discards everything; the unmonitored baseline.
#[derive(Debug, Default)]
pub struct NullReporter;

impl EventReporter for NullReporter {
    fn report(&mut self, _: EventKind, _: Value) -> Result<(), ScenarioError> {
        Ok(())
    }
}

/// Builds events in-process with timestamps from `clock`.
pub struct Collector {
    clock: Arc<dyn Clock>,
    pub events: Vec<MonitorEvent>,
}

impl Collector {
    pub fn new(clock: Arc<dyn Clock>) -> Self {
        Collector { clock, events: Vec::new() }
    }
}

impl EventReporter for Collector {
    fn report(&mut self, kind: EventKind, payload: Value) -> Result<(), ScenarioError> {
        self.events.push(MonitorEvent::new(kind, self.clock.now(), payload)?);
        Ok(())
    }
}

/// Sends each event as a bridge frame and requires an ACK.
pub struct BridgeReporter {
    client: BridgeClient,
    clock: Arc<dyn Clock>,
    pub acked: usize,
}

impl BridgeReporter {
    pub fn connect(socket: &Path, clock: Arc<dyn Clock>) -> Result<Self, ScenarioError> {
        Ok(BridgeReporter { client: BridgeClient::connect(socket)?, clock, acked: 0 })
    }
}

impl EventReporter for BridgeReporter {
    fn report(&mut self, kind: EventKind, payload: Value) -> Result<(), ScenarioError> {
        let Ok(Json::Object(mut frame)) = serde_json::to_value(&payload) else {
            return Err(BridgeError::BadReply("payload is not an object".into()).into());
        };
        frame.insert("type".into(), Json::String(kind.as_str().into()));
        frame.insert("timestamp".into(), Json::String(self.clock.now().to_string()));
        let reply = self.client.send(&Json::Object(frame))?;
        if !reply.ok {
            return Err(BridgeError::BadReply(reply.reason.unwrap_or_default()).into());
        }
        self.acked += 1;
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct TrainingOutcome {
    /// Little-endian `f64` weights after the last epoch.
    pub model: Vec<u8>,
    pub checkpoints: Vec<PathBuf>,
    pub reported: usize,
    pub final_loss: f64,
}

fn weights_bytes(w: &[f64]) -> Vec<u8> {
    w.iter().flat_map(|x| x.to_le_bytes()).collect()
}

/// Runs the loop. Everything but wall-clock time is a function of `spec`.
pub fn run_training(spec: &TrainingSpec, reporter: &mut dyn EventReporter) -> Result<TrainingOutcome, ScenarioError> {
    let optimizer = Value::map().with("name", "sgd").with("lr", 0.01).with("momentum", 0.9);
    let optimizer_hash = canonical_digest(&optimizer).expect("finite optimizer config");

    // xorshift init keeps this independent of any RNG crate version
    let mut s = spec.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) | 1;
    let mut w: Vec<f64> = (0..spec.params.max(1))
        .map(|_| {
            s ^= s << 13;
            s ^= s >> 7;
            s ^= s << 17;
            (s >> 11) as f64 / (1u64 << 53) as f64 - 0.5
        })
        .collect();
    let mut velocity = vec![0.0f64; w.len()];
    let per_layer = (w.len() / spec.layers.max(1)).max(1);

    let mut reported = 0;
    let mut checkpoints = Vec::new();
    let mut loss = 0.0;
    for epoch in 0..spec.epochs {
        reporter.report(
            EventKind::EpochStart,
            Value::map().with("epoch", epoch).with("optimizer_config_hash", optimizer_hash.to_string()),
        )?;
        reported += 1;

        let mut grad_sq = 0.0;
        for pass in 0..spec.passes_per_epoch {
            let phase = (epoch * spec.passes_per_epoch + pass) as f64;
            grad_sq = 0.0;
            for (i, (x, v)) in w.iter_mut().zip(velocity.iter_mut()).enumerate() {
                let target = ((i as f64) * 0.001 + phase * 0.1).sin() * 0.25;
                let g = (*x - target) + 0.01 * x.tanh();
                grad_sq += g * g;
                *v = 0.9 * *v + g;
                *x -= 0.01 * *v;
            }
        }
        loss = w.iter().enumerate().map(|(i, x)| (x - ((i as f64) * 0.001).sin() * 0.25).powi(2)).sum::<f64>()
            / w.len() as f64;

        for layer in 0..spec.layers {
            let chunk = &w[(layer * per_layer).min(w.len())..((layer + 1) * per_layer).min(w.len())];
            let n = chunk.len().max(1) as f64;
            let mean = chunk.iter().sum::<f64>() / n;
            let var = chunk.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
            let max = chunk.iter().fold(f64::MIN, |a, &b| a.max(b));
            reporter.report(
                EventKind::LayerActivation,
                Value::map()
                    .with("layer_id", format!("layer.{layer}"))
                    .with("stats", Value::map().with("mean", mean).with("std", var.sqrt()).with("max", max)),
            )?;
            reported += 1;
        }

        let bytes = weights_bytes(&w);
        if let Some(dir) = &spec.checkpoint_dir {
            let path = dir.join(format!("epoch-{epoch:03}.pt"));
            std::fs::write(&path, &bytes)?;
            checkpoints.push(path);
        }
        reporter.report(
            EventKind::EpochEnd,
            Value::map()
                .with("epoch", epoch)
                .with("metrics", Value::map().with("loss", loss))
                .with("model_state_hash", Digest::of(&bytes).to_string()),
        )?;
        reporter.report(EventKind::Gradient, Value::map().with("magnitude", grad_sq.sqrt()).with("norm", "l2"))?;
        reported += 2;
    }
    Ok(TrainingOutcome { model: weights_bytes(&w), checkpoints, reported, final_loss: loss })
}

/// Runs `spec` with a monitor attached: a checkpoint watcher on
/// `spec.checkpoint_dir` (if any) and every framework event sent over the
/// bridge.
pub fn run_monitored(
    spec: &TrainingSpec,
    socket: &Path,
    debounce: std::time::Duration,
    clock: Arc<dyn Clock>,
) -> Result<(TrainingOutcome, Drained), ScenarioError> {
    let config = MonitorConfig {
        checkpoint_dir: spec.checkpoint_dir.clone(),
        socket: Some(socket.to_owned()),
        debounce,
        ..MonitorConfig::default()
    };
    let monitor = Monitor::start(&config, Arc::clone(&clock))?;
    let outcome = {
        let mut reporter = BridgeReporter::connect(socket, clock)?;
        run_training(spec, &mut reporter)?
    };
    Ok((outcome, monitor.finish()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::time::{SteppingClock, Timestamp};

    fn clock() -> Arc<dyn Clock> {
        Arc::new(SteppingClock::new(Timestamp::from_millis(super::super::EPOCH_START_MS), 1))
    }

    #[test]
    fn twenty_event_run_reports_twenty_valid_events() {
        let spec = TrainingSpec::twenty_events(7);
        let mut c = Collector::new(clock());
        let out = run_training(&spec, &mut c).unwrap();
        assert_eq!(spec.events_per_run(), 20);
        assert_eq!(out.reported, 20);
        assert_eq!(c.events.len(), 20);
        assert!(c.events.iter().all(|e| e.validate().is_ok()));
        assert!(c.events.windows(2).all(|w| w[0].timestamp < w[1].timestamp));
    }

    #[test]
    fn training_is_deterministic_and_learns() {
        let spec = TrainingSpec::twenty_events(3);
        let a = run_training(&spec, &mut NullReporter).unwrap();
        let b = run_training(&spec, &mut NullReporter).unwrap();
        assert_eq!(a.model, b.model);
        let longer = run_training(&TrainingSpec { epochs: 12, ..spec }, &mut NullReporter).unwrap();
        assert!(longer.final_loss < a.final_loss);
    }

    #[test]
    fn writes_one_checkpoint_per_epoch() {
        let dir = tempfile::tempdir().unwrap();
        let spec = TrainingSpec { checkpoint_dir: Some(dir.path().to_owned()), ..TrainingSpec::twenty_events(1) };
        let out = run_training(&spec, &mut NullReporter).unwrap();
        assert_eq!(out.checkpoints.len(), 4);
        assert_eq!(std::fs::read(&out.checkpoints[3]).unwrap(), out.model);
    }

    #[test]
    fn monitored_run_records_every_frame_and_checkpoint() {
        let tmp = tempfile::tempdir().unwrap();
        let ckpt = tmp.path().join("ckpt");
        std::fs::create_dir(&ckpt).unwrap();
        let spec = TrainingSpec { checkpoint_dir: Some(ckpt), ..TrainingSpec::twenty_events(5) };
        let (out, drained) =
            run_monitored(&spec, &tmp.path().join("m.sock"), std::time::Duration::from_millis(20), clock()).unwrap();
        assert_eq!(drained.acked_frames, 20);
        let checkpoints = drained.events.iter().filter(|e| e.kind == EventKind::CheckpointCreated).count();
        assert_eq!(checkpoints, out.checkpoints.len());
        assert_eq!(drained.events.len(), 20 + checkpoints);
    }
}
