//! Deterministic end-to-end fixtures: a provisioned deployment (platform,
//! enclaves, producer, log), a synthetic training workload, linear artifact
//! chains, and tampering attacks against them.

pub mod attacks;
pub mod training;

use std::path::Path;
use std::sync::Arc;

use parking_lot::Mutex;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;

use crate::crypto::{CryptoError, Enclave, KeyDirectory, QuoteVerifier, SigningIdentity, SimulatedPlatform};
use crate::digest::Digest;
use crate::log::storage::StorageError;
use crate::log::{AdmissionPolicy, LogEntry, LogError, LogHandle, LogWriter, TransparencyLog};
use crate::model::{register_ids, ArtifactMeasurement, ArtifactRole, GoldenValue, MonitorEvent, OperationRecord};
use crate::monitor::{sidecar::system_quote_for, AttestError, AttestationClient, Finalized, Transformation};
use crate::time::{Clock, SteppingClock, Timestamp};
use crate::value::Value;
use crate::verifier::{TrustAnchors, Verifier};

/// 2024-01-01T00:00:00Z
pub const EPOCH_START_MS: i64 = 1_704_067_200_000;

pub const CLIENT_ENV: &[u8] = b"atlas-client/environment/v1";
pub const CLIENT_CODE: &[u8] = b"atlas-client/sidecar/v1";
pub const SYSTEM_ENV: &[u8] = b"ml-system/environment/v1";
pub const SYSTEM_CODE: &[u8] = b"ml-system/pipeline-runtime/v1";

const STAGE_KINDS: [&str; 10] =
    ["ingest", "clean", "dedup", "tokenize", "featurize", "split", "pretrain", "finetune", "evaluate", "package"];

/// Unique, ordered stage names for a chain of `n` stages.
pub fn stage_names(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("{i:03}-{}", STAGE_KINDS[i % STAGE_KINDS.len()])).collect()
}

#[derive(Debug, thiserror::Error)]
pub enum ScenarioError {
    #[error(transparent)]
    Crypto(#[from] CryptoError),
    #[error(transparent)]
    Attest(#[from] AttestError),
    #[error(transparent)]
    Log(#[from] LogError),
    #[error(transparent)]
    Storage(#[from] StorageError),
    #[error(transparent)]
    Bridge(#[from] crate::monitor::BridgeError),
    #[error(transparent)]
    Monitor(#[from] crate::monitor::MonitorError),
    #[error(transparent)]
    Schema(#[from] crate::model::SchemaError),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
}

/// Everything a single-host deployment needs, all derived from one seed.
pub struct Deployment {
    pub seed: u64,
    pub clock: Arc<dyn Clock>,
    pub producer: SigningIdentity,
    pub platform: Arc<SimulatedPlatform>,
    pub system: Enclave,
    pub client: AttestationClient,
    pub log: LogHandle,
    rng: Mutex<ChaCha20Rng>,
}

impl std::fmt::Debug for Deployment {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Deployment").field("seed", &self.seed).finish_non_exhaustive()
    }
}

/// One stage of a pipeline, ready to be attested.
#[derive(Debug, Clone, Default)]
pub struct StageRun {
    pub name: String,
    pub parameters: Value,
    pub inputs: Vec<ArtifactMeasurement>,
    pub outputs: Vec<ArtifactMeasurement>,
    pub precursors: Vec<Digest>,
    pub events: Vec<MonitorEvent>,
}

impl Deployment {
    /// In-memory log, deterministic clock.
    pub fn new(seed: u64) -> Result<Self, ScenarioError> {
        let clock: Arc<dyn Clock> = Arc::new(SteppingClock::new(Timestamp::from_millis(EPOCH_START_MS), 1));
        Self::build(seed, clock, None)
    }

    /// Persistent log under `dir`.
    pub fn with_log_dir(seed: u64, dir: &Path) -> Result<Self, ScenarioError> {
        let clock: Arc<dyn Clock> = Arc::new(SteppingClock::new(Timestamp::from_millis(EPOCH_START_MS), 1));
        Self::build(seed, clock, Some(dir))
    }

    pub fn with_clock(seed: u64, clock: Arc<dyn Clock>) -> Result<Self, ScenarioError> {
        Self::build(seed, clock, None)
    }

    /// Persistent log under `dir` when given, in-memory otherwise. Register
    /// golden values are published only into a log that lacks them.
    pub fn build(seed: u64, clock: Arc<dyn Clock>, dir: Option<&Path>) -> Result<Self, ScenarioError> {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let producer = SigningIdentity::generate_with(&mut rng, false)?;
        let platform = Arc::new(SimulatedPlatform::with_clock(
            SigningIdentity::generate_with(&mut rng, false)?,
            Arc::clone(&clock),
        ));
        let system = Enclave::launch(Arc::clone(&platform), Digest::of(SYSTEM_ENV), Digest::of(SYSTEM_CODE), &mut rng)?;
        let client_enclave =
            Enclave::launch(Arc::clone(&platform), Digest::of(CLIENT_ENV), Digest::of(CLIENT_CODE), &mut rng)?;

        let policy = AdmissionPolicy {
            producers: KeyDirectory::with_keys([producer.public_key()]),
            platforms: QuoteVerifier::new([platform.public_key()]),
        };
        let log_key = SigningIdentity::generate_with(&mut rng, false)?;
        let log = match dir {
            Some(d) => TransparencyLog::open(d, policy)?,
            None => TransparencyLog::new(log_key, policy),
        };
        let log = LogHandle::new(log);

        let register = |id: &str, value: &[u8]| {
            let m = ArtifactMeasurement::from_digest(id, ArtifactRole::Metadata, Digest::of(value), 0);
            GoldenValue::issue(m, &producer, clock.now())
        };
        let system_goldens = vec![
            register(register_ids::SYSTEM_ENVIRONMENT, SYSTEM_ENV),
            register(register_ids::SYSTEM_CODE, SYSTEM_CODE),
        ];
        let client_goldens =
            [register(register_ids::CLIENT_ENVIRONMENT, CLIENT_ENV), register(register_ids::CLIENT_CODE, CLIENT_CODE)];
        let needs_goldens = log.read().goldens_for_artifact_id(register_ids::CLIENT_CODE).is_empty();
        if needs_goldens {
            for g in client_goldens.iter().chain(&system_goldens) {
                log.submit(LogEntry::GoldenValue(g.clone()))?;
            }
        }
        let client = AttestationClient::new(
            client_enclave,
            QuoteVerifier::new([platform.public_key()]),
            system_goldens,
            Some(rng.next_u64()),
        );
        Ok(Deployment { seed, clock, producer, platform, system, client, log, rng: Mutex::new(rng) })
    }

    pub fn trust(&self) -> TrustAnchors {
        TrustAnchors {
            log_key: self.log.read().public_key(),
            producers: KeyDirectory::with_keys([self.producer.public_key()]),
            platforms: QuoteVerifier::new([self.platform.public_key()]),
        }
    }

    pub fn verifier(&self) -> Verifier {
        Verifier::new(self.trust())
    }

    /// Deterministic pseudo-random bytes from the deployment's stream.
    pub fn random_bytes(&self, len: usize) -> Vec<u8> {
        let mut out = vec![0u8; len];
        self.rng.lock().fill_bytes(&mut out);
        out
    }

    pub fn next_u64(&self) -> u64 {
        self.rng.lock().next_u64()
    }

    pub fn publish_golden(&self, m: &ArtifactMeasurement) -> Result<GoldenValue, ScenarioError> {
        let g = GoldenValue::issue(m.clone(), &self.producer, self.clock.now());
        self.log.submit(LogEntry::GoldenValue(g.clone()))?;
        Ok(g)
    }

    /// Runs the client side of one stage without publishing anything.
    pub fn finalize_stage(&self, stage: StageRun) -> Result<Finalized, ScenarioError> {
        let spec = Value::map().with("stage", stage.name.as_str()).with("parameters", stage.parameters.clone());
        let mut session = self.client.begin_pipeline(stage.name.as_str(), spec);
        let quote = system_quote_for(&self.system, &session);
        self.client.attest_system(&mut session, quote)?;
        let started = self.clock.now();
        let ended = self.clock.now();
        let op =
            OperationRecord::new(stage.name.as_str(), &stage.parameters, started, ended).map_err(AttestError::from)?;
        Ok(self.client.finalize_pipeline(
            &session,
            stage.events,
            Transformation {
                inputs: stage.inputs,
                outputs: stage.outputs,
                operations: vec![op],
                precursors: stage.precursors,
            },
        )?)
    }

    /// Attests one stage: system quote, finalize, commit, then goldens for
    /// the outputs.
    pub fn run_stage(&self, stage: StageRun) -> Result<Finalized, ScenarioError> {
        let finalized = self.finalize_stage(stage)?;
        self.client.commit(&finalized, &self.log)?;
        for out in &finalized.attestation.claim.outputs {
            self.publish_golden(out)?;
        }
        Ok(finalized)
    }

    pub fn seal(&self) -> Result<(), ScenarioError> {
        self.log.seal_and_chain()?;
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Artifact {
    pub bytes: Vec<u8>,
    pub measurement: ArtifactMeasurement,
}

impl Artifact {
    pub fn new(id: impl Into<String>, role: ArtifactRole, bytes: Vec<u8>) -> Self {
        let measurement = ArtifactMeasurement::of_bytes(id, role, &bytes);
        Artifact { bytes, measurement }
    }

    pub fn digest(&self) -> Digest {
        self.measurement.digest
    }
}

/// A linear chain: `source → stage 0 → artifact 1 → … → artifact n`.
#[derive(Debug, Clone)]
pub struct Chain {
    pub label: String,
    /// `artifacts[0]` is the unattested source; `artifacts[i]` for `i ≥ 1`
    /// is the output of stage `i - 1`.
    pub artifacts: Vec<Artifact>,
    pub attestations: Vec<Digest>,
    pub stages: Vec<String>,
}

impl Chain {
    pub fn final_artifact(&self) -> &Artifact {
        self.artifacts.last().expect("chain has a source")
    }

    pub fn len(&self) -> usize {
        self.attestations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.attestations.is_empty()
    }
}

fn role_for(i: usize, n: usize) -> ArtifactRole {
    if i + 1 == n {
        ArtifactRole::ModelWeights
    } else if i % 3 == 2 {
        ArtifactRole::Checkpoint
    } else {
        ArtifactRole::Dataset
    }
}

/// Builds and logs a linear chain of `n` stages with `artifact_size`-byte
/// artifacts. `events_for(i)` supplies the monitor events of stage `i`.
pub fn build_chain(
    dep: &Deployment,
    label: &str,
    n: usize,
    artifact_size: usize,
    mut events_for: impl FnMut(usize) -> Vec<MonitorEvent>,
) -> Result<Chain, ScenarioError> {
    let stages = stage_names(n);
    let source =
        Artifact::new(format!("artifact://{label}/source"), ArtifactRole::Dataset, dep.random_bytes(artifact_size));
    dep.publish_golden(&source.measurement)?;
    let mut chain =
        Chain { label: label.to_owned(), artifacts: vec![source], attestations: Vec::new(), stages: Vec::new() };
    for (i, stage) in stages.iter().enumerate() {
        extend_chain(dep, &mut chain, stage, role_for(i, n), artifact_size, events_for(i))?;
    }
    Ok(chain)
}

/// Runs `stage` on the chain's last artifact and appends its output.
pub fn extend_chain(
    dep: &Deployment,
    chain: &mut Chain,
    stage: &str,
    role: ArtifactRole,
    artifact_size: usize,
    events: Vec<MonitorEvent>,
) -> Result<Digest, ScenarioError> {
    let input = chain.final_artifact().measurement.clone();
    let idx = chain.artifacts.len();
    let output = Artifact::new(format!("artifact://{}/{idx:03}", chain.label), role, dep.random_bytes(artifact_size));
    let finalized = dep.run_stage(StageRun {
        name: stage.to_owned(),
        parameters: Value::map().with("seed", dep.seed).with("index", idx),
        inputs: vec![input],
        outputs: vec![output.measurement.clone()],
        precursors: chain.attestations.last().copied().into_iter().collect(),
        events,
    })?;
    let d = finalized.digest();
    chain.artifacts.push(output);
    chain.attestations.push(d);
    chain.stages.push(stage.to_owned());
    Ok(d)
}

/// The manifest document for a deterministic 20-event training run, and its
/// canonical encoding. Identical for identical seeds.
pub fn twenty_event_manifest(seed: u64) -> Result<(Finalized, Vec<u8>), ScenarioError> {
    let dep = Deployment::new(seed)?;
    let spec = training::TrainingSpec::twenty_events(seed);
    let mut collector = training::Collector::new(Arc::clone(&dep.clock));
    let outcome = training::run_training(&spec, &mut collector)?;
    let dataset =
        ArtifactMeasurement::of_bytes("artifact://train/dataset", ArtifactRole::Dataset, b"synthetic dataset");
    let model = ArtifactMeasurement::of_bytes("artifact://train/model", ArtifactRole::ModelWeights, &outcome.model);
    let finalized = dep.finalize_stage(StageRun {
        name: "train".into(),
        parameters: spec.to_value(),
        inputs: vec![dataset],
        outputs: vec![model],
        precursors: Vec::new(),
        events: collector.events,
    })?;
    let bytes = crate::canonical::canonical_bytes(&finalized).map_err(AttestError::from)?;
    Ok((finalized, bytes))
}

/// A chain stage whose work is a monitored training run.
#[derive(Debug)]
pub struct MonitoredStage {
    pub attestation: Digest,
    pub drained: crate::monitor::Drained,
    pub outcome: training::TrainingOutcome,
}

/// Runs `spec` under the monitor and appends the trained model to `chain`
/// as the output of stage `name`, with every drained event attested.
pub fn extend_chain_monitored(
    dep: &Deployment,
    chain: &mut Chain,
    name: &str,
    spec: &training::TrainingSpec,
    socket: &Path,
    debounce: std::time::Duration,
) -> Result<MonitoredStage, ScenarioError> {
    let (outcome, drained) = training::run_monitored(spec, socket, debounce, Arc::clone(&dep.clock))?;
    let input = chain.final_artifact().measurement.clone();
    let idx = chain.artifacts.len();
    let output = Artifact::new(
        format!("artifact://{}/{idx:03}", chain.label),
        ArtifactRole::ModelWeights,
        outcome.model.clone(),
    );
    let finalized = dep.run_stage(StageRun {
        name: name.to_owned(),
        parameters: spec.to_value(),
        inputs: vec![input],
        outputs: vec![output.measurement.clone()],
        precursors: chain.attestations.last().copied().into_iter().collect(),
        events: drained.events.clone(),
    })?;
    let d = finalized.digest();
    chain.artifacts.push(output);
    chain.attestations.push(d);
    chain.stages.push(name.to_owned());
    Ok(MonitoredStage { attestation: d, drained, outcome })
}
