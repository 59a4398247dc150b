//! Attestation client: the TEE-resident sidecar that turns a monitored run
//! into a signed transformation attestation.

use parking_lot::Mutex;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use super::cache::ManifestCache;
use crate::canonical::{canonical_digest, CanonicalError};
use crate::crypto::{Enclave, QuoteRejection, QuoteVerdict, QuoteVerifier, TeeQuote};
use crate::digest::Digest;
use crate::log::{AdmissionError, LogEntry, LogError, LogWriter, Submission};
use crate::model::{
    client_quote_nonce, system_quote_nonce, ArtifactMeasurement, Assertion, Claim, ClaimError, GoldenValue,
    MonitorEvent, OperationRecord, PipelineMetadata, TransformationAttestation,
};
use crate::value::Value;

/// Label prefix of the per-event assertions.
pub const EVENT_LABEL_PREFIX: &str = "atlas.event.";

#[derive(Debug, thiserror::Error)]
pub enum AttestError {
    #[error("quote-not-verified: the ML system has not been attested for {0}")]
    QuoteNotVerified(String),
    #[error("system quote rejected: {0}")]
    SystemQuote(QuoteRejection),
    #[error("event at position {index} is invalid: {reason}")]
    InvalidEvent { index: usize, reason: String },
    #[error(transparent)]
    Encoding(#[from] CanonicalError),
    #[error("claim: {0}")]
    Claim(#[from] ClaimError),
    #[error("manifest {0} is not in the local cache")]
    NotCached(Digest),
    #[error(transparent)]
    Log(#[from] LogError),
}

/// One run between `begin_pipeline` and `finalize_pipeline`.
#[derive(Debug, Clone)]
pub struct PipelineSession {
    pub manifest_id: String,
    pub execution_name: String,
    pub pipeline_spec: Value,
    system_quote: Option<TeeQuote>,
}

impl PipelineSession {
    /// Nonce the ML system must put in its quote for this run.
    pub fn system_nonce(&self) -> [u8; 32] {
        system_quote_nonce(&self.manifest_id)
    }

    pub fn system_verified(&self) -> bool {
        self.system_quote.is_some()
    }
}

/// What the run consumed, produced and did.
#[derive(Debug, Clone, Default)]
pub struct Transformation {
    pub inputs: Vec<ArtifactMeasurement>,
    pub outputs: Vec<ArtifactMeasurement>,
    pub operations: Vec<OperationRecord>,
    pub precursors: Vec<Digest>,
}

/// The manifest document: signed attestation plus the metadata it commits to.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Finalized {
    pub attestation: TransformationAttestation,
    pub metadata: PipelineMetadata,
}

impl Finalized {
    pub fn digest(&self) -> Digest {
        self.attestation.digest()
    }
}

pub struct AttestationClient {
    enclave: Enclave,
    quotes: QuoteVerifier,
    system_goldens: Vec<GoldenValue>,
    cache: ManifestCache,
    ids: Mutex<ChaCha20Rng>,
}

impl std::fmt::Debug for AttestationClient {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("AttestationClient").field("key_id", &self.enclave.identity().key_id()).finish()
    }
}

impl AttestationClient {
    /// `system_goldens` are the expected ML-system register values,
    /// environment first, then code. `id_seed` makes manifest ids
    /// reproducible; `None` draws from the OS.
    pub fn new(
        enclave: Enclave,
        quotes: QuoteVerifier,
        system_goldens: Vec<GoldenValue>,
        id_seed: Option<u64>,
    ) -> Self {
        let rng = match id_seed {
            Some(s) => ChaCha20Rng::seed_from_u64(s),
            None => ChaCha20Rng::from_entropy(),
        };
        AttestationClient { enclave, quotes, system_goldens, cache: ManifestCache::new(), ids: Mutex::new(rng) }
    }

    /// Restarts the manifest-id stream from `seed`.
    pub fn reseed_ids(&self, seed: u64) {
        *self.ids.lock() = ChaCha20Rng::seed_from_u64(seed);
    }

    pub fn enclave(&self) -> &Enclave {
        &self.enclave
    }

    pub fn cache(&self) -> &ManifestCache {
        &self.cache
    }

    pub fn begin_pipeline(&self, execution_name: impl Into<String>, pipeline_spec: Value) -> PipelineSession {
        let mut bytes = [0u8; 16];
        self.ids.lock().fill_bytes(&mut bytes);
        let id = uuid::Builder::from_random_bytes(bytes).into_uuid();
        PipelineSession {
            manifest_id: format!("urn:uuid:{id}"),
            execution_name: execution_name.into(),
            pipeline_spec,
            system_quote: None,
        }
    }

    /// Verifies the ML system's quote for this session.
    pub fn attest_system(&self, session: &mut PipelineSession, quote: TeeQuote) -> Result<(), AttestError> {
        match self.quotes.verify_quote(&quote, &self.system_goldens, &session.system_nonce()) {
            QuoteVerdict::Accepted => {
                session.system_quote = Some(quote);
                Ok(())
            }
            QuoteVerdict::Rejected(r) => Err(AttestError::SystemQuote(r)),
        }
    }

    /// Builds, signs and caches the attestation for a finished run. `events`
    /// must be everything the monitor drained; each becomes one assertion.
    pub fn finalize_pipeline(
        &self,
        session: &PipelineSession,
        mut events: Vec<MonitorEvent>,
        transformation: Transformation,
    ) -> Result<Finalized, AttestError> {
        let system_quote =
            session.system_quote.clone().ok_or_else(|| AttestError::QuoteNotVerified(session.manifest_id.clone()))?;
        for (index, ev) in events.iter().enumerate() {
            ev.validate().map_err(|e| AttestError::InvalidEvent { index, reason: e.to_string() })?;
        }
        events.sort_by_key(|e| e.timestamp);

        let mut assertions = Vec::with_capacity(events.len());
        for ev in &events {
            assertions.push(Assertion {
                label: format!("{EVENT_LABEL_PREFIX}{}", ev.kind),
                body_hash: canonical_digest(ev)?,
            });
        }
        let metadata = PipelineMetadata {
            execution_name: session.execution_name.clone(),
            pipeline_spec: session.pipeline_spec.clone(),
            events,
            system_quote,
        };
        let pipeline_metadata_hash = self.cache.put_metadata(&metadata)?;

        let claim = Claim {
            manifest_id: session.manifest_id.clone(),
            inputs: transformation.inputs,
            outputs: transformation.outputs,
            operations: transformation.operations,
            precursor_hashes: transformation.precursors,
            pipeline_metadata_hash,
            client_quote: self.enclave.quote(&client_quote_nonce(&session.manifest_id)),
            assertions,
        };
        claim.validate()?;
        let attestation = TransformationAttestation::sign(claim, self.enclave.identity());
        self.cache.put_attestation(&attestation);
        Ok(Finalized { attestation, metadata })
    }

    /// Publishes the metadata and then the attestation.
    pub fn commit(&self, finalized: &Finalized, log: &dyn LogWriter) -> Result<Submission, AttestError> {
        let digest = finalized.digest();
        match log.submit(LogEntry::PipelineMetadata(finalized.metadata.clone())) {
            Ok(_) | Err(LogError::Rejected(AdmissionError::Duplicate(_))) => {}
            Err(e) => return Err(e.into()),
        }
        let sub = log.submit(LogEntry::Attestation(finalized.attestation.clone()))?;
        self.cache.mark_committed(digest);
        Ok(sub)
    }

    /// Re-publishes a cached manifest by digest.
    pub fn commit_cached(&self, digest: &Digest, log: &dyn LogWriter) -> Result<Submission, AttestError> {
        let attestation = self.cache.attestation(digest).ok_or(AttestError::NotCached(*digest))?;
        let metadata = self
            .cache
            .metadata(&attestation.claim.pipeline_metadata_hash)
            .ok_or(AttestError::NotCached(attestation.claim.pipeline_metadata_hash))?;
        self.commit(&Finalized { attestation, metadata }, log)
    }
}

/// Number of per-event assertions in a claim.
pub fn event_assertion_count(claim: &Claim) -> usize {
    claim.assertions.iter().filter(|a| a.label.starts_with(EVENT_LABEL_PREFIX)).count()
}

/// Convenience for building a session-bound ML system enclave quote.
pub fn system_quote_for(system: &Enclave, session: &PipelineSession) -> TeeQuote {
    system.quote(&session.system_nonce())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::log::LogReader;
    use crate::model::{ArtifactRole, EventKind};
    use crate::scenario::{Deployment, StageRun};
    use crate::verifier::{Expectation, Subject};

    fn measurement(id: &str, role: ArtifactRole, bytes: &[u8]) -> ArtifactMeasurement {
        ArtifactMeasurement::of_bytes(id, role, bytes)
    }

    #[test]
    fn finalize_requires_attested_system() {
        let dep = Deployment::new(1).unwrap();
        let session = dep.client.begin_pipeline("run", Value::map());
        let err = dep.client.finalize_pipeline(&session, vec![], Transformation::default()).unwrap_err();
        assert!(matches!(err, AttestError::QuoteNotVerified(_)));
        assert!(err.to_string().starts_with("quote-not-verified"));
    }

    #[test]
    fn system_quote_for_another_session_is_rejected() {
        let dep = Deployment::new(2).unwrap();
        let a = dep.client.begin_pipeline("a", Value::map());
        let mut b = dep.client.begin_pipeline("b", Value::map());
        assert_ne!(a.manifest_id, b.manifest_id);
        let stale = system_quote_for(&dep.system, &a);
        assert!(matches!(dep.client.attest_system(&mut b, stale), Err(AttestError::SystemQuote(_))));
        assert!(!b.system_verified());
    }

    #[test]
    fn zero_event_run_is_a_minimal_valid_manifest() {
        let dep = Deployment::new(3).unwrap();
        let out = b"minimal output".to_vec();
        let f = dep
            .run_stage(StageRun {
                name: "convert".into(),
                parameters: Value::map(),
                inputs: vec![measurement("in", ArtifactRole::Dataset, b"minimal input")],
                outputs: vec![measurement("out", ArtifactRole::ModelWeights, &out)],
                precursors: vec![],
                events: vec![],
            })
            .unwrap();
        assert!(f.attestation.claim.assertions.is_empty());
        assert!(f.metadata.events.is_empty());
        assert!(f.attestation.verify_signature());
        let r = dep.verifier().verify_artifact(
            &Subject::Bytes(out.clone()),
            &Expectation::for_digest(Digest::of(&out)),
            &dep.log,
            None,
        );
        assert!(r.passed(), "{:?}", r.first_failure());
    }

    #[test]
    fn bert_style_run_links_dataset_attestation() {
        let dep = Deployment::new(4).unwrap();
        let corpus = measurement("corpus", ArtifactRole::Dataset, b"raw corpus");
        let prep = dep
            .run_stage(StageRun {
                name: "tokenize".into(),
                inputs: vec![corpus],
                outputs: vec![measurement("tokens", ArtifactRole::Dataset, b"tokenized")],
                ..StageRun::default()
            })
            .unwrap();
        let tokens = prep.attestation.claim.outputs[0].clone();
        let vocab = measurement("vocab", ArtifactRole::Config, b"vocab.txt");
        let outputs = vec![
            measurement("ckpt-1", ArtifactRole::Checkpoint, b"c1"),
            measurement("ckpt-2", ArtifactRole::Checkpoint, b"c2"),
            measurement("ckpt-3", ArtifactRole::Checkpoint, b"c3"),
            measurement("bert-final", ArtifactRole::ModelWeights, b"final"),
        ];
        let train = dep
            .run_stage(StageRun {
                name: "pretrain".into(),
                inputs: vec![tokens, vocab],
                outputs: outputs.clone(),
                precursors: vec![prep.digest()],
                ..StageRun::default()
            })
            .unwrap();
        let claim = &train.attestation.claim;
        assert_eq!(claim.inputs.len(), 2);
        assert_eq!(claim.outputs.len(), 4);
        assert_eq!(claim.precursor_hashes, vec![prep.digest()]);
        let r = dep.verifier().verify_artifact(
            &Subject::Bytes(b"final".to_vec()),
            &Expectation::for_digest(outputs[3].digest).with_stage_order(["tokenize", "pretrain"]),
            &dep.log,
            None,
        );
        assert!(r.passed(), "{:?}", r.first_failure());
        assert_eq!(r.chain_length, 2);
    }

    #[test]
    fn each_event_becomes_one_assertion_in_time_order() {
        let dep = Deployment::new(5).unwrap();
        let ev = |ms: i64, magnitude: f64| {
            MonitorEvent::new(
                EventKind::Gradient,
                crate::time::Timestamp::from_millis(ms),
                Value::map().with("magnitude", magnitude),
            )
            .unwrap()
        };
        let f = dep
            .finalize_stage(StageRun {
                name: "s".into(),
                outputs: vec![measurement("o", ArtifactRole::ModelWeights, b"o")],
                events: vec![ev(30, 3.0), ev(10, 1.0), ev(20, 2.0)],
                ..StageRun::default()
            })
            .unwrap();
        assert_eq!(event_assertion_count(&f.attestation.claim), 3);
        let ts: Vec<i64> = f.metadata.events.iter().map(|e| e.timestamp.millis()).collect();
        assert_eq!(ts, [10, 20, 30]);
        for (a, e) in f.attestation.claim.assertions.iter().zip(&f.metadata.events) {
            assert_eq!(a.label, "atlas.event.gradient");
            assert_eq!(a.body_hash, canonical_digest(e).unwrap());
        }
        assert_eq!(f.attestation.claim.pipeline_metadata_hash, f.metadata.digest().unwrap());
    }

    #[test]
    fn invalid_event_is_refused() {
        let dep = Deployment::new(6).unwrap();
        let bad = MonitorEvent {
            kind: EventKind::EpochStart,
            timestamp: crate::time::Timestamp::EPOCH,
            payload: Value::map().with("epoch", -1),
        };
        let err = dep
            .finalize_stage(StageRun {
                name: "s".into(),
                outputs: vec![measurement("o", ArtifactRole::ModelWeights, b"o")],
                events: vec![bad],
                ..StageRun::default()
            })
            .unwrap_err();
        assert!(err.to_string().contains("position 0"), "{err}");
    }

    #[test]
    fn cached_manifest_can_be_committed_later_and_only_once() {
        let dep = Deployment::new(7).unwrap();
        let f = dep
            .finalize_stage(StageRun {
                name: "s".into(),
                outputs: vec![measurement("o", ArtifactRole::ModelWeights, b"o")],
                ..StageRun::default()
            })
            .unwrap();
        let d = f.digest();
        assert!(!dep.client.cache().is_committed(&d));
        dep.client.commit_cached(&d, &dep.log).unwrap();
        assert!(dep.client.cache().is_committed(&d));
        assert!(dep.log.entry(&d).unwrap().is_some());
        let again = dep.client.commit_cached(&d, &dep.log).unwrap_err();
        assert!(again.to_string().contains("duplicate"), "{again}");
        assert!(matches!(dep.client.commit_cached(&Digest::of(b"x"), &dep.log), Err(AttestError::NotCached(_))));
    }

    #[test]
    fn manifest_document_round_trips() {
        let dep = Deployment::new(8).unwrap();
        let f = dep
            .finalize_stage(StageRun {
                name: "s".into(),
                outputs: vec![measurement("o", ArtifactRole::ModelWeights, b"o")],
                ..StageRun::default()
            })
            .unwrap();
        let bytes = crate::canonical::canonical_bytes(&f).unwrap();
        let back: Finalized = crate::canonical::decode(&bytes).unwrap();
        assert_eq!(back, f);
        assert_eq!(back.digest(), f.digest());
    }
}
