//! Tampering against a logged chain, and the harness that checks each
//! attack is caught by the right check.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use super::{extend_chain, Chain, Deployment, ScenarioError};
use crate::crypto::{PublicKey, QuoteVerifier, TeeQuote};
use crate::digest::Digest;
use crate::log::{LogEntry, LogError, LogReader, SignedRoot, StoredEntry};
use crate::merkle::{ConsistencyProof, InclusionProof};
use crate::model::{client_quote_nonce, register_ids, ArtifactRole, GoldenValue, TransformationAttestation};
use crate::time::Timestamp;
use crate::verifier::{check_names, Expectation, Subject, VerificationCache, VerificationReport, Verifier};

/// Field of an attestation an attacker flips one bit of.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MutationField {
    ManifestId,
    InputDigest,
    OutputDigest,
    OperationName,
    PrecursorHash,
    MetadataHash,
    QuoteReportData,
    QuoteRegister,
    Signature,
    SignerKey,
}

impl MutationField {
    pub const ALL: [MutationField; 10] = [
        MutationField::ManifestId,
        MutationField::InputDigest,
        MutationField::OutputDigest,
        MutationField::OperationName,
        MutationField::PrecursorHash,
        MutationField::MetadataHash,
        MutationField::QuoteReportData,
        MutationField::QuoteRegister,
        MutationField::Signature,
        MutationField::SignerKey,
    ];
}

fn flip_str(s: &mut String, bit: usize) {
    let mut bytes = std::mem::take(s).into_bytes();
    if bytes.is_empty() {
        bytes.push(b'a');
    } else {
        // stay within ASCII so the result is still a string
        let i = (bit / 7) % bytes.len();
        bytes[i] ^= 1 << (bit % 7);
        if bytes[i] == 0 {
            bytes[i] = b'?';
        }
    }
    *s = String::from_utf8_lossy(&bytes).into_owned();
}

/// Returns `a` with one bit of `field` flipped. Fields the attestation does
/// not have (no precursors on the first stage) fall back to the signature.
pub fn mutate(a: &TransformationAttestation, field: MutationField, bit: usize) -> TransformationAttestation {
    let mut m = a.clone();
    let c = &mut m.claim;
    match field {
        MutationField::ManifestId => flip_str(&mut c.manifest_id, bit),
        MutationField::InputDigest if !c.inputs.is_empty() => {
            let n = c.inputs.len();
            c.inputs[bit % n].digest = c.inputs[bit % n].digest.with_bit_flipped(bit);
        }
        MutationField::OutputDigest => {
            let n = c.outputs.len();
            c.outputs[bit % n].digest = c.outputs[bit % n].digest.with_bit_flipped(bit);
        }
        MutationField::OperationName if !c.operations.is_empty() => flip_str(&mut c.operations[0].name, bit),
        MutationField::PrecursorHash if !c.precursor_hashes.is_empty() => {
            let n = c.precursor_hashes.len();
            c.precursor_hashes[bit % n] = c.precursor_hashes[bit % n].with_bit_flipped(bit);
        }
        MutationField::MetadataHash => c.pipeline_metadata_hash = c.pipeline_metadata_hash.with_bit_flipped(bit),
        MutationField::QuoteReportData => {
            let b = bit % 512;
            c.client_quote.report_data.0[b / 8] ^= 1 << (b % 8);
        }
        MutationField::QuoteRegister => {
            let n = c.client_quote.measurement_registers.len().max(1);
            if let Some(r) = c.client_quote.measurement_registers.get_mut(bit % n) {
                *r = r.with_bit_flipped(bit);
            }
        }
        MutationField::SignerKey => {
            let b = bit % 256;
            m.signature.public_key.0[b / 8] ^= 1 << (b % 8);
        }
        _ => m.signature.sig = m.signature.sig.with_bit_flipped(bit % 512),
    }
    m
}

/// A log proxy that serves substituted attestations under their original
/// digests. Everything else passes through.
pub struct TamperingReader<'a> {
    inner: &'a dyn LogReader,
    substitutions: HashMap<Digest, TransformationAttestation>,
}

impl<'a> TamperingReader<'a> {
    pub fn new(inner: &'a dyn LogReader) -> Self {
        TamperingReader { inner, substitutions: HashMap::new() }
    }

    pub fn substitute(mut self, digest: Digest, attestation: TransformationAttestation) -> Self {
        self.substitutions.insert(digest, attestation);
        self
    }

    fn patch(&self, entry: LogEntry) -> LogEntry {
        match &entry {
            LogEntry::Attestation(a) => match self.substitutions.get(&a.digest()) {
                Some(m) => LogEntry::Attestation(m.clone()),
                None => entry,
            },
            _ => entry,
        }
    }
}

impl LogReader for TamperingReader<'_> {
    fn log_public_key(&self) -> Result<PublicKey, LogError> {
        self.inner.log_public_key()
    }

    fn signed_root(&self, tree_id: Option<u64>) -> Result<SignedRoot, LogError> {
        self.inner.signed_root(tree_id)
    }

    fn signed_roots(&self) -> Result<Vec<SignedRoot>, LogError> {
        self.inner.signed_roots()
    }

    fn entry(&self, digest: &Digest) -> Result<Option<StoredEntry>, LogError> {
        Ok(self.inner.entry(digest)?.map(|s| StoredEntry { entry: self.patch(s.entry), ..s }))
    }

    fn entry_at(&self, tree_id: u64, leaf_index: u64) -> Result<Option<LogEntry>, LogError> {
        Ok(self.inner.entry_at(tree_id, leaf_index)?.map(|e| self.patch(e)))
    }

    fn inclusion_proof(&self, tree_id: u64, leaf_index: u64, tree_size: u64) -> Result<InclusionProof, LogError> {
        self.inner.inclusion_proof(tree_id, leaf_index, tree_size)
    }

    fn consistency_proof(&self, tree_id: u64, old_size: u64, new_size: u64) -> Result<ConsistencyProof, LogError> {
        self.inner.consistency_proof(tree_id, old_size, new_size)
    }

    fn goldens_for_artifact_id(&self, artifact_id: &str) -> Result<Vec<GoldenValue>, LogError> {
        self.inner.goldens_for_artifact_id(artifact_id)
    }

    fn goldens_for_digest(&self, digest: &Digest) -> Result<Vec<GoldenValue>, LogError> {
        self.inner.goldens_for_digest(digest)
    }

    fn attestations_producing(&self, artifact: &Digest) -> Result<Vec<Digest>, LogError> {
        self.inner.attestations_producing(artifact)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Attack {
    /// One bit of the artifact at chain position `artifact` is flipped.
    ByteFlip { artifact: usize, bit: usize },
    /// The log serves attestation `hop` with one field bit-flipped.
    AttestationMutation { hop: usize, field: MutationField, bit: usize },
    /// A fork of the chain skips stage `stage`.
    StageOmission { stage: usize },
    /// A fork of the chain runs stages `stage` and `stage + 1` swapped.
    StageReorder { stage: usize },
}

impl Attack {
    pub fn expected_check(&self) -> &'static str {
        match self {
            Attack::ByteFlip { .. } => check_names::GOLDEN_VALUE,
            Attack::AttestationMutation { .. } => check_names::SIGNATURE,
            Attack::StageOmission { .. } | Attack::StageReorder { .. } => check_names::STAGE_ORDER,
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            Attack::ByteFlip { .. } => "byte-flip",
            Attack::AttestationMutation { .. } => "attestation-mutation",
            Attack::StageOmission { .. } => "stage-omission",
            Attack::StageReorder { .. } => "stage-reorder",
        }
    }

    /// A uniformly chosen attack against a chain of `n ≥ 2` stages with
    /// `artifact_size`-byte artifacts.
    pub fn random(rng: &mut impl Rng, n: usize, artifact_size: usize) -> Self {
        match rng.gen_range(0..4) {
            0 => Attack::ByteFlip { artifact: rng.gen_range(1..=n), bit: rng.gen_range(0..artifact_size * 8) },
            1 => Attack::AttestationMutation {
                hop: rng.gen_range(0..n),
                field: MutationField::ALL[rng.gen_range(0..MutationField::ALL.len())],
                bit: rng.gen_range(0..4096),
            },
            2 => Attack::StageOmission { stage: rng.gen_range(0..n - 1) },
            _ => Attack::StageReorder { stage: rng.gen_range(0..n - 1) },
        }
    }
}

/// An attack made concrete: what is presented to the verifier.
#[derive(Debug, Clone)]
pub struct PreparedAttack {
    pub attack: Attack,
    pub subject: Subject,
    pub expectation: Expectation,
    pub substitutions: Vec<(Digest, TransformationAttestation)>,
}

impl PreparedAttack {
    pub fn verify(
        &self,
        verifier: &Verifier,
        reader: &dyn LogReader,
        cache: Option<&VerificationCache>,
    ) -> VerificationReport {
        let mut tampered = TamperingReader::new(reader);
        for (d, a) in &self.substitutions {
            tampered = tampered.substitute(*d, a.clone());
        }
        verifier.verify_artifact(&self.subject, &self.expectation, &tampered, cache)
    }
}

/// What the verifier should require of chain position `i`.
pub fn expectation_for(chain: &Chain, i: usize) -> Expectation {
    Expectation::for_digest(chain.artifacts[i].digest()).with_stage_order(chain.stages[..i].iter().cloned())
}

/// Builds the concrete attack. Fork attacks log new, validly signed
/// attestations that branch off `chain` before the tampered stage.
pub fn prepare(
    dep: &Deployment,
    chain: &Chain,
    attack: &Attack,
    fork_id: usize,
) -> Result<PreparedAttack, ScenarioError> {
    let n = chain.len();
    let full = expectation_for(chain, n);
    let prepared = match attack {
        Attack::ByteFlip { artifact, bit } => {
            let mut bytes = chain.artifacts[*artifact].bytes.clone();
            let b = bit % (bytes.len() * 8);
            bytes[b / 8] ^= 1 << (b % 8);
            PreparedAttack {
                attack: attack.clone(),
                subject: Subject::Bytes(bytes),
                expectation: expectation_for(chain, *artifact),
                substitutions: Vec::new(),
            }
        }
        Attack::AttestationMutation { hop, field, bit } => {
            let d = chain.attestations[*hop];
            let original = dep
                .log
                .entry(&d)?
                .and_then(|s| s.entry.as_attestation().cloned())
                .ok_or_else(|| LogError::NotFound(d.to_string()))?;
            PreparedAttack {
                attack: attack.clone(),
                subject: Subject::Bytes(chain.final_artifact().bytes.clone()),
                expectation: full,
                substitutions: vec![(d, mutate(&original, *field, *bit))],
            }
        }
        Attack::StageOmission { stage } | Attack::StageReorder { stage } => {
            let mut order: Vec<usize> = (*stage..n).collect();
            if matches!(attack, Attack::StageOmission { .. }) {
                order.remove(0);
            } else {
                order.swap(0, 1);
            }
            let mut fork = Chain {
                label: format!("{}-fork-{fork_id}", chain.label),
                artifacts: chain.artifacts[..=*stage].to_vec(),
                attestations: chain.attestations[..*stage].to_vec(),
                stages: chain.stages[..*stage].to_vec(),
            };
            let size = chain.final_artifact().bytes.len();
            for (k, &s) in order.iter().enumerate() {
                let role = if k + 1 == order.len() { ArtifactRole::ModelWeights } else { ArtifactRole::Dataset };
                extend_chain(dep, &mut fork, &chain.stages[s], role, size, Vec::new())?;
            }
            PreparedAttack {
                attack: attack.clone(),
                subject: Subject::Bytes(fork.final_artifact().bytes.clone()),
                expectation: Expectation { artifact_digest: fork.final_artifact().digest(), ..full },
                substitutions: Vec::new(),
            }
        }
    };
    Ok(prepared)
}

#[derive(Debug, Clone)]
pub struct InjectionOutcome {
    pub attack: Attack,
    pub report: VerificationReport,
}

impl InjectionOutcome {
    /// Detected means the verdict is fail and the first failing check is
    /// the one this attack targets.
    pub fn detected(&self) -> bool {
        !self.report.passed()
            && self.report.first_failure().map(|c| c.name.as_str()) == Some(self.attack.expected_check())
    }

    pub fn first_failure(&self) -> Option<&str> {
        self.report.first_failure().map(|c| c.name.as_str())
    }
}

/// `count` random attacks against `chain`, all prepared up front so they can
/// be replayed with different cache configurations.
pub fn prepare_random(
    dep: &Deployment,
    chain: &Chain,
    count: usize,
    seed: u64,
) -> Result<Vec<PreparedAttack>, ScenarioError> {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let size = chain.final_artifact().bytes.len();
    (0..count).map(|i| prepare(dep, chain, &Attack::random(&mut rng, chain.len(), size), i)).collect()
}

pub fn run_prepared(
    verifier: &Verifier,
    reader: &dyn LogReader,
    attacks: &[PreparedAttack],
    cache: Option<&VerificationCache>,
) -> Vec<InjectionOutcome> {
    attacks
        .iter()
        .map(|p| InjectionOutcome { attack: p.attack.clone(), report: p.verify(verifier, reader, cache) })
        .collect()
}

/// Quote field a fuzz flip lands in.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QuoteField {
    Register,
    ReportData,
    PlatformKeyId,
    PlatformSignature,
    IssuedAt,
}

/// Flips bit `bit` of `field` in a copy of `quote`.
pub fn flip_quote_bit(quote: &TeeQuote, field: QuoteField, bit: usize) -> TeeQuote {
    let mut q = quote.clone();
    match field {
        QuoteField::Register => {
            let n = q.measurement_registers.len();
            let b = bit % (n * 256);
            q.measurement_registers[b / 256] = q.measurement_registers[b / 256].with_bit_flipped(b % 256);
        }
        QuoteField::ReportData => {
            let b = bit % 512;
            q.report_data.0[b / 8] ^= 1 << (b % 8);
        }
        QuoteField::PlatformKeyId => {
            let b = bit % 256;
            q.platform_key_id.0[b / 8] ^= 1 << (b % 8);
        }
        QuoteField::PlatformSignature => q.platform_sig = q.platform_sig.with_bit_flipped(bit % 512),
        QuoteField::IssuedAt => q.issued_at = Timestamp::from_millis(q.issued_at.millis() ^ (1i64 << (bit % 63))),
    }
    q
}

#[derive(Debug, Clone, Copy, Default)]
pub struct QuoteFuzzOutcome {
    pub trials: usize,
    pub accepted: usize,
    /// The unmodified quote was accepted (sanity check).
    pub baseline_accepted: bool,
}

/// `trials` random single-bit flips of a client quote, each checked the way
/// the log and verifier check it. Field and bit are chosen uniformly, with
/// fields weighted by their size in bits.
pub fn fuzz_client_quote(dep: &Deployment, trials: usize, seed: u64) -> QuoteFuzzOutcome {
    let manifest_id = "urn:uuid:00000000-0000-4000-8000-000000000000";
    let nonce = client_quote_nonce(manifest_id);
    let quote = dep.client.enclave().quote(&nonce);
    let goldens: Vec<GoldenValue> = [register_ids::CLIENT_ENVIRONMENT, register_ids::CLIENT_CODE]
        .iter()
        .filter_map(|id| dep.log.read().goldens_for_artifact_id(id).last().cloned())
        .collect();
    let verifier = QuoteVerifier::new([dep.platform.public_key()]);
    let accepts = |q: &TeeQuote| {
        verifier.verify_quote(q, &goldens, &nonce).is_accepted()
            && q.binds_key(&dep.client.enclave().identity().public_key())
    };
    let baseline_accepted = accepts(&quote);

    let reg_bits = quote.measurement_registers.len() * 256;
    let fields = [
        (QuoteField::Register, reg_bits),
        (QuoteField::ReportData, 512),
        (QuoteField::PlatformKeyId, 256),
        (QuoteField::PlatformSignature, 512),
        (QuoteField::IssuedAt, 63),
    ];
    let total: usize = fields.iter().map(|f| f.1).sum();
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut accepted = 0;
    for _ in 0..trials {
        let mut pick = rng.gen_range(0..total);
        let (field, bit) = fields
            .iter()
            .find_map(|&(f, n)| {
                if pick < n {
                    Some((f, pick))
                } else {
                    pick -= n;
                    None
                }
            })
            .expect("pick < total");
        if accepts(&flip_quote_bit(&quote, field, bit)) {
            accepted += 1;
        }
    }
    QuoteFuzzOutcome { trials, accepted, baseline_accepted }
}
