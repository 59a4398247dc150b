//! Append-only transparency log organized as a chain of Merkle trees.
//!
//! Each pipeline run gets its own tree. Sealing a tree freezes it and opens
//! its successor, whose leaf 0 is a [`ChainLink`] carrying the sealed root.
//! Golden values, pipeline metadata and transformation attestations share
//! the log as distinct entry kinds; every submission passes admission checks
//! before it becomes visible.

mod chain;
mod entry;
mod handle;
pub mod storage;

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use chain::{walk_chain, ChainWalkError};
pub use entry::{ChainLink, LogEntry, SignedRoot, StoredEntry, Submission};
pub use handle::{LogHandle, LogReader, LogWriter};
use storage::{LogStorage, Record, StorageError};

use crate::crypto::{KeyDirectory, PublicKey, QuoteVerdict, QuoteVerifier, SigningIdentity};
use crate::digest::Digest;
use crate::merkle::{ConsistencyProof, InclusionProof, MerkleError, MerkleTree};
use crate::model::{client_quote_nonce, register_ids, GoldenValue, TransformationAttestation};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error, Serialize, Deserialize)]
#[serde(tag = "code", content = "detail", rename_all = "kebab-case")]
pub enum AdmissionError {
    #[error("bad-signature: {0}")]
    BadSignature(String),
    #[error("unknown-precursor: {0}")]
    UnknownPrecursor(Digest),
    #[error("unknown-metadata: {0}")]
    UnknownMetadata(Digest),
    #[error("quote-invalid: {0}")]
    QuoteInvalid(String),
    #[error("tree-sealed: tree {0}")]
    TreeSealed(u64),
    #[error("duplicate: {0} is already logged")]
    Duplicate(Digest),
    #[error("malformed: {0}")]
    Malformed(String),
    #[error("storage: {0}")]
    Storage(String),
}

impl AdmissionError {
    pub fn code(&self) -> &'static str {
        match self {
            AdmissionError::BadSignature(_) => "bad-signature",
            AdmissionError::UnknownPrecursor(_) => "unknown-precursor",
            AdmissionError::UnknownMetadata(_) => "unknown-metadata",
            AdmissionError::QuoteInvalid(_) => "quote-invalid",
            AdmissionError::TreeSealed(_) => "tree-sealed",
            AdmissionError::Duplicate(_) => "duplicate",
            AdmissionError::Malformed(_) => "malformed",
            AdmissionError::Storage(_) => "storage",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error, Serialize, Deserialize)]
#[serde(tag = "error", content = "detail", rename_all = "kebab-case")]
pub enum LogError {
    #[error("log-unavailable: {0}")]
    Unavailable(String),
    #[error("not found: {0}")]
    NotFound(String),
    #[error("out of range: {0}")]
    OutOfRange(String),
    #[error("cannot seal an empty tree")]
    EmptyTree,
    #[error("rejected: {0}")]
    Rejected(#[from] AdmissionError),
}

impl From<MerkleError> for LogError {
    fn from(e: MerkleError) -> Self {
        LogError::OutOfRange(e.to_string())
    }
}

/// Keys the log trusts when admitting entries.
#[derive(Debug, Clone, Default)]
pub struct AdmissionPolicy {
    /// Producers allowed to publish golden values.
    pub producers: KeyDirectory,
    /// TEE platforms whose quotes are recognized.
    pub platforms: QuoteVerifier,
}

#[derive(Debug)]
pub struct LogTree {
    pub tree_id: u64,
    pub sealed: bool,
    pub chain_link: Option<Digest>,
    merkle: MerkleTree,
    entries: Vec<LogEntry>,
    latest: SignedRoot,
}

impl LogTree {
    pub fn size(&self) -> u64 {
        self.merkle.len()
    }

    pub fn root(&self) -> Digest {
        self.merkle.root()
    }

    pub fn entry(&self, index: u64) -> Option<&LogEntry> {
        self.entries.get(index as usize)
    }

    pub fn merkle(&self) -> &MerkleTree {
        &self.merkle
    }
}

#[derive(Debug, Clone, Copy)]
struct Location {
    tree_id: u64,
    leaf_index: u64,
}

pub struct TransparencyLog {
    key: SigningIdentity,
    policy: AdmissionPolicy,
    trees: Vec<LogTree>,
    by_digest: HashMap<Digest, Location>,
    goldens_by_id: HashMap<String, Vec<Digest>>,
    goldens_by_artifact: HashMap<Digest, Vec<Digest>>,
    producing: HashMap<Digest, Vec<Digest>>,
    storage: Option<LogStorage>,
}

impl std::fmt::Debug for TransparencyLog {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("TransparencyLog")
            .field("key_id", &self.key.key_id())
            .field("trees", &self.trees.len())
            .field("entries", &self.by_digest.len())
            .finish()
    }
}

impl TransparencyLog {
    /// In-memory log.
    pub fn new(key: SigningIdentity, policy: AdmissionPolicy) -> Self {
        let mut log = TransparencyLog {
            key,
            policy,
            trees: Vec::new(),
            by_digest: HashMap::new(),
            goldens_by_id: HashMap::new(),
            goldens_by_artifact: HashMap::new(),
            producing: HashMap::new(),
            storage: None,
        };
        log.open_tree(None);
        log
    }

    /// Persistent log rooted at `dir`, rebuilt by replaying its entry file.
    pub fn open(dir: &Path, policy: AdmissionPolicy) -> Result<Self, StorageError> {
        let key = LogStorage::load_or_create_key(dir)?;
        let (storage, records) = LogStorage::open(dir)?;
        let mut log = Self::new(key, policy);
        for (i, rec) in records.into_iter().enumerate() {
            log.replay(rec).map_err(|reason| StorageError::Corrupt { line: i + 1, reason })?;
        }
        log.storage = Some(storage);
        Ok(log)
    }

    pub fn public_key(&self) -> PublicKey {
        self.key.public_key()
    }

    pub fn policy(&self) -> &AdmissionPolicy {
        &self.policy
    }

    pub fn current_tree_id(&self) -> u64 {
        self.trees.len() as u64 - 1
    }

    pub fn tree(&self, tree_id: u64) -> Option<&LogTree> {
        self.trees.get(tree_id as usize)
    }

    pub fn trees(&self) -> &[LogTree] {
        &self.trees
    }

    pub fn len(&self) -> usize {
        self.by_digest.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_digest.is_empty()
    }

    fn current(&self) -> &LogTree {
        self.trees.last().expect("log always has a tree")
    }

    fn open_tree(&mut self, chain_link: Option<Digest>) {
        let tree_id = self.trees.len() as u64;
        let merkle = MerkleTree::new();
        let latest = SignedRoot::sign(tree_id, 0, merkle.root(), &self.key);
        self.trees.push(LogTree { tree_id, sealed: false, chain_link, merkle, entries: Vec::new(), latest });
    }

    fn tree_or_err(&self, tree_id: u64) -> Result<&LogTree, LogError> {
        self.tree(tree_id).ok_or_else(|| LogError::NotFound(format!("tree {tree_id}")))
    }

    // --- admission -------------------------------------------------------

    /// Runs admission checks and, if they pass, appends `entry` at the
    /// right-most leaf of the current tree. A rejected entry leaves the log
    /// untouched.
    pub fn submit(&mut self, entry: LogEntry) -> Result<Submission, AdmissionError> {
        let current = self.current();
        if current.sealed {
            return Err(AdmissionError::TreeSealed(current.tree_id));
        }
        let digest = entry.digest();
        if self.by_digest.contains_key(&digest) {
            return Err(AdmissionError::Duplicate(digest));
        }
        match &entry {
            LogEntry::Attestation(a) => self.admit_attestation(a)?,
            LogEntry::GoldenValue(g) => {
                if !g.verify(&self.policy.producers) {
                    return Err(AdmissionError::BadSignature(format!(
                        "golden value for {} is not signed by a registered producer",
                        g.measurement.artifact_id
                    )));
                }
            }
            LogEntry::PipelineMetadata(m) => {
                if crate::canonical::canonical_bytes(m).is_err() {
                    return Err(AdmissionError::Malformed("pipeline metadata is not encodable".into()));
                }
                if !m.events_ordered() {
                    return Err(AdmissionError::Malformed("events are not in timestamp order".into()));
                }
                if let Some(e) = m.events.iter().find_map(|ev| ev.validate().err()) {
                    return Err(AdmissionError::Malformed(e.to_string()));
                }
                self.policy
                    .platforms
                    .verify_platform(&m.system_quote)
                    .map_err(|r| AdmissionError::QuoteInvalid(format!("system quote: {r}")))?;
            }
            LogEntry::ChainLink(_) => {
                return Err(AdmissionError::Malformed("chain links are written by the log itself".into()));
            }
        }
        self.append(entry).map_err(|e| AdmissionError::Storage(e.to_string()))
    }

    fn admit_attestation(&self, a: &TransformationAttestation) -> Result<(), AdmissionError> {
        a.claim.validate().map_err(|e| AdmissionError::Malformed(e.to_string()))?;
        if a.claim.operations.is_empty() {
            return Err(AdmissionError::Malformed("re-publication without operations".into()));
        }
        if !a.verify_signature() {
            return Err(AdmissionError::BadSignature("claim signature does not verify".into()));
        }
        let quote = &a.claim.client_quote;
        let goldens = self.register_goldens(
            &[register_ids::CLIENT_ENVIRONMENT, register_ids::CLIENT_CODE],
            &quote.measurement_registers,
        )?;
        let nonce = client_quote_nonce(&a.claim.manifest_id);
        match self.policy.platforms.verify_quote(quote, &goldens, &nonce) {
            QuoteVerdict::Accepted => {}
            QuoteVerdict::Rejected(r) => return Err(AdmissionError::QuoteInvalid(format!("client quote: {r}"))),
        }
        if !a.quote_binds_signer() {
            return Err(AdmissionError::QuoteInvalid("client quote does not bind the signing key".into()));
        }
        for p in &a.claim.precursor_hashes {
            if !matches!(self.entry(p).map(|s| s.entry), Some(LogEntry::Attestation(_))) {
                return Err(AdmissionError::UnknownPrecursor(*p));
            }
        }
        let meta = a.claim.pipeline_metadata_hash;
        if !matches!(self.entry(&meta).map(|s| s.entry), Some(LogEntry::PipelineMetadata(_))) {
            return Err(AdmissionError::UnknownMetadata(meta));
        }
        Ok(())
    }

    /// For each register label, the logged golden value matching the quoted
    /// register if there is one, else the most recent (which will mismatch).
    fn register_goldens(&self, ids: &[&str], registers: &[Digest]) -> Result<Vec<GoldenValue>, AdmissionError> {
        ids.iter()
            .enumerate()
            .map(|(i, id)| {
                let goldens = self.goldens_for_artifact_id(id);
                let want = registers.get(i);
                goldens
                    .iter()
                    .find(|g| Some(&g.measurement.digest) == want)
                    .or(goldens.last())
                    .cloned()
                    .ok_or_else(|| AdmissionError::QuoteInvalid(format!("no golden value published for {id}")))
            })
            .collect()
    }

    fn append(&mut self, entry: LogEntry) -> Result<Submission, StorageError> {
        let tree_id = self.current_tree_id();
        let leaf_index = self.current().size();
        let record = Record { tree_id, leaf_index, entry };
        if let Some(storage) = self.storage.as_mut() {
            storage.append(&record)?;
        }
        let digest = self.apply(record.entry);
        Ok(Submission { tree_id, leaf_index, digest, signed_root: self.current().latest.clone() })
    }

    /// In-memory effect of an append; the caller has already validated it.
    fn apply(&mut self, entry: LogEntry) -> Digest {
        let digest = entry.digest();
        let tree_id = self.current_tree_id();
        match &entry {
            LogEntry::Attestation(a) => {
                for out in &a.claim.outputs {
                    self.producing.entry(out.digest).or_default().push(digest);
                }
            }
            LogEntry::GoldenValue(g) => {
                self.goldens_by_id.entry(g.measurement.artifact_id.clone()).or_default().push(digest);
                self.goldens_by_artifact.entry(g.measurement.digest).or_default().push(digest);
            }
            _ => {}
        }
        let key = &self.key;
        let tree = self.trees.last_mut().expect("log always has a tree");
        let leaf_index = tree.merkle.push(&entry.leaf_bytes());
        tree.entries.push(entry);
        tree.latest = SignedRoot::sign(tree_id, tree.merkle.len(), tree.merkle.root(), key);
        self.by_digest.insert(digest, Location { tree_id, leaf_index });
        digest
    }

    fn replay(&mut self, rec: Record) -> Result<(), String> {
        let current = self.current();
        if rec.tree_id == current.tree_id + 1 {
            let Some(link) = rec.entry.as_chain_link() else {
                return Err("new tree does not start with a chain link".into());
            };
            if rec.leaf_index != 0
                || link.previous_tree_id != current.tree_id
                || link.previous_size != current.size()
                || link.previous_root != current.root()
            {
                return Err(format!("chain link for tree {} does not match its predecessor", rec.tree_id));
            }
            self.seal_current();
            self.apply(rec.entry);
            return Ok(());
        }
        if rec.tree_id != current.tree_id || rec.leaf_index != current.size() {
            return Err(format!("record at ({}, {}) is out of sequence", rec.tree_id, rec.leaf_index));
        }
        if rec.entry.as_chain_link().is_some() {
            return Err("chain link in the middle of a tree".into());
        }
        self.apply(rec.entry);
        Ok(())
    }

    fn seal_current(&mut self) -> (Digest, u64) {
        let tree = self.trees.last_mut().expect("log always has a tree");
        tree.sealed = true;
        let root = tree.merkle.root();
        let size = tree.merkle.len();
        self.open_tree(Some(root));
        (root, size)
    }

    /// Seals the current tree and opens its successor, whose leaf 0 embeds
    /// the sealed root. Returns the final signed root of the sealed tree and
    /// the first signed root of the new one.
    pub fn seal_and_chain(&mut self) -> Result<(SignedRoot, SignedRoot), LogError> {
        let current = self.current();
        if current.size() == 0 {
            return Err(LogError::EmptyTree);
        }
        let sealed_root = current.latest.clone();
        let link = ChainLink {
            previous_tree_id: current.tree_id,
            previous_size: current.size(),
            previous_root: current.root(),
        };
        let record = Record { tree_id: current.tree_id + 1, leaf_index: 0, entry: LogEntry::ChainLink(link) };
        if let Some(storage) = self.storage.as_mut() {
            storage.append(&record).map_err(|e| LogError::Unavailable(e.to_string()))?;
        }
        self.seal_current();
        self.apply(record.entry);
        Ok((sealed_root, self.current().latest.clone()))
    }

    // --- reads -----------------------------------------------------------

    pub fn signed_root(&self, tree_id: Option<u64>) -> Result<SignedRoot, LogError> {
        let id = tree_id.unwrap_or_else(|| self.current_tree_id());
        Ok(self.tree_or_err(id)?.latest.clone())
    }

    /// A signed root for a historical size of a tree.
    pub fn signed_root_at(&self, tree_id: u64, size: u64) -> Result<SignedRoot, LogError> {
        let tree = self.tree_or_err(tree_id)?;
        let root = tree.merkle.root_at(size)?;
        Ok(SignedRoot::sign(tree_id, size, root, &self.key))
    }

    pub fn signed_roots(&self) -> Vec<SignedRoot> {
        self.trees.iter().map(|t| t.latest.clone()).collect()
    }

    pub fn prove_inclusion(
        &self,
        tree_id: u64,
        leaf_index: u64,
        tree_size: Option<u64>,
    ) -> Result<InclusionProof, LogError> {
        let tree = self.tree_or_err(tree_id)?;
        Ok(tree.merkle.prove_inclusion(leaf_index, tree_size.unwrap_or(tree.size()))?)
    }

    pub fn prove_consistency(&self, tree_id: u64, old_size: u64, new_size: u64) -> Result<ConsistencyProof, LogError> {
        Ok(self.tree_or_err(tree_id)?.merkle.prove_consistency(old_size, new_size)?)
    }

    pub fn entry(&self, digest: &Digest) -> Option<StoredEntry> {
        let loc = self.by_digest.get(digest)?;
        let entry = self.trees[loc.tree_id as usize].entries[loc.leaf_index as usize].clone();
        Some(StoredEntry { tree_id: loc.tree_id, leaf_index: loc.leaf_index, entry })
    }

    pub fn entry_at(&self, tree_id: u64, leaf_index: u64) -> Option<&LogEntry> {
        self.tree(tree_id)?.entry(leaf_index)
    }

    fn goldens(&self, digests: Option<&Vec<Digest>>) -> Vec<GoldenValue> {
        digests
            .into_iter()
            .flatten()
            .filter_map(|d| self.entry(d))
            .filter_map(|s| match s.entry {
                LogEntry::GoldenValue(g) => Some(g),
                _ => None,
            })
            .collect()
    }

    /// Golden values published under `artifact_id`, oldest first.
    pub fn goldens_for_artifact_id(&self, artifact_id: &str) -> Vec<GoldenValue> {
        self.goldens(self.goldens_by_id.get(artifact_id))
    }

    /// Golden values whose measurement digest is `digest`.
    pub fn goldens_for_digest(&self, digest: &Digest) -> Vec<GoldenValue> {
        self.goldens(self.goldens_by_artifact.get(digest))
    }

    /// Digests of attestations listing `artifact` among their outputs.
    pub fn attestations_producing(&self, artifact: &Digest) -> Vec<Digest> {
        self.producing.get(artifact).cloned().unwrap_or_default()
    }
}
