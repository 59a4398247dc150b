use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use super::artifact::ArtifactMeasurement;
use super::event::MonitorEvent;
use crate::canonical::{canonical_bytes, CanonicalError};
use crate::crypto::tee::quote_b64;
use crate::crypto::{KeyId, PublicKey, SignatureBytes, SigningIdentity, TeeQuote};
use crate::digest::Digest;
use crate::time::Timestamp;
use crate::value::Value;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OperationRecord {
    pub name: String,
    pub parameters_hash: Digest,
    pub started_at: Timestamp,
    pub ended_at: Timestamp,
}

impl OperationRecord {
    /// `parameters_hash` is taken over the canonical bytes of `parameters`.
    pub fn new(
        name: impl Into<String>,
        parameters: &Value,
        started_at: Timestamp,
        ended_at: Timestamp,
    ) -> Result<Self, CanonicalError> {
        Ok(OperationRecord {
            name: name.into(),
            parameters_hash: Digest::of(&canonical_bytes(parameters)?),
            started_at,
            ended_at,
        })
    }
}

/// Runtime facts collected over one pipeline execution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineMetadata {
    pub execution_name: String,
    pub pipeline_spec: Value,
    pub events: Vec<MonitorEvent>,
    #[serde(with = "quote_b64")]
    pub system_quote: TeeQuote,
}

impl PipelineMetadata {
    pub fn events_ordered(&self) -> bool {
        self.events.windows(2).all(|w| w[0].timestamp <= w[1].timestamp)
    }

    pub fn digest(&self) -> Result<Digest, CanonicalError> {
        canonical_bytes(self).map(|b| Digest::of(&b))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Assertion {
    pub label: String,
    pub body_hash: Digest,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SignatureAlg {
    Ed25519,
}

/// Signature over the canonical claim bytes. The public key travels with the
/// signature because attestation keys are minted per run inside the TEE; it is
/// trusted only through the client quote that binds it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClaimSignature {
    pub alg: SignatureAlg,
    pub key_id: KeyId,
    pub public_key: PublicKey,
    pub sig: SignatureBytes,
}

impl ClaimSignature {
    pub fn sign(identity: &SigningIdentity, bytes: &[u8]) -> Self {
        ClaimSignature {
            alg: SignatureAlg::Ed25519,
            key_id: identity.key_id(),
            public_key: identity.public_key(),
            sig: identity.sign(bytes),
        }
    }

    pub fn verify(&self, bytes: &[u8]) -> bool {
        self.key_id == self.public_key.key_id() && self.public_key.verify(bytes, &self.sig)
    }
}

/// Everything in a transformation attestation except its signature.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Claim {
    pub manifest_id: String,
    pub inputs: Vec<ArtifactMeasurement>,
    pub outputs: Vec<ArtifactMeasurement>,
    pub operations: Vec<OperationRecord>,
    pub precursor_hashes: Vec<Digest>,
    pub pipeline_metadata_hash: Digest,
    #[serde(with = "quote_b64")]
    pub client_quote: TeeQuote,
    pub assertions: Vec<Assertion>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ClaimError {
    #[error("attestation has no outputs")]
    NoOutputs,
    #[error("precursor {0} listed twice")]
    DuplicatePrecursor(Digest),
    #[error("output {0} is byte-identical to an input")]
    OutputEqualsInput(Digest),
    #[error("operation `{0}` ends before it starts")]
    OperationTimeOrder(String),
    #[error("attestation records no operations")]
    NoOperations,
}

impl Claim {
    pub fn canonical_bytes(&self) -> Vec<u8> {
        canonical_bytes(self).expect("claims contain no floats")
    }

    /// The attestation digest: SHA-256 of the canonical claim bytes. Precursor
    /// links and log lookups use this value.
    pub fn digest(&self) -> Digest {
        Digest::of(&self.canonical_bytes())
    }

    /// Structural invariants. Re-publication (no operations) passes here and
    /// is refused at log admission.
    pub fn validate(&self) -> Result<(), ClaimError> {
        if self.outputs.is_empty() {
            return Err(ClaimError::NoOutputs);
        }
        let mut seen = HashSet::new();
        for p in &self.precursor_hashes {
            if !seen.insert(*p) {
                return Err(ClaimError::DuplicatePrecursor(*p));
            }
        }
        if !self.operations.is_empty() {
            let inputs: HashSet<Digest> = self.inputs.iter().map(|m| m.digest).collect();
            if let Some(out) = self.outputs.iter().find(|o| inputs.contains(&o.digest)) {
                return Err(ClaimError::OutputEqualsInput(out.digest));
            }
        }
        if let Some(op) = self.operations.iter().find(|op| op.ended_at < op.started_at) {
            return Err(ClaimError::OperationTimeOrder(op.name.clone()));
        }
        Ok(())
    }

    pub fn stage_names(&self) -> impl Iterator<Item = &str> {
        self.operations.iter().map(|op| op.name.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransformationAttestation {
    #[serde(flatten)]
    pub claim: Claim,
    pub signature: ClaimSignature,
}

impl TransformationAttestation {
    pub fn sign(claim: Claim, identity: &SigningIdentity) -> Self {
        let signature = ClaimSignature::sign(identity, &claim.canonical_bytes());
        TransformationAttestation { claim, signature }
    }

    pub fn digest(&self) -> Digest {
        self.claim.digest()
    }

    pub fn verify_signature(&self) -> bool {
        self.signature.verify(&self.claim.canonical_bytes())
    }

    /// The client quote's report data names this attestation's signing key.
    pub fn quote_binds_signer(&self) -> bool {
        self.claim.client_quote.binds_key(&self.signature.public_key)
    }
}

/// Nonce for the attestation client's own quote: ties it to one manifest.
pub fn client_quote_nonce(manifest_id: &str) -> [u8; 32] {
    Digest::of_parts(&[b"atlas/client-quote\0", manifest_id.as_bytes()]).0
}

/// Nonce the client uses when attesting the ML system for one manifest.
pub fn system_quote_nonce(manifest_id: &str) -> [u8; 32] {
    Digest::of_parts(&[b"atlas/system-quote\0", manifest_id.as_bytes()]).0
}
