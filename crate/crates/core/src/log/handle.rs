use std::sync::Arc;

use parking_lot::RwLock;

use super::{LogEntry, LogError, SignedRoot, StoredEntry, Submission, TransparencyLog};
use crate::crypto::PublicKey;
use crate::digest::Digest;
use crate::merkle::{ConsistencyProof, InclusionProof};
use crate::model::GoldenValue;

/// Read access to a transparency log, local or remote.
pub trait LogReader: Send + Sync {
    fn log_public_key(&self) -> Result<PublicKey, LogError>;
    /// Latest signed root of `tree_id`, or of the current tree when `None`.
    fn signed_root(&self, tree_id: Option<u64>) -> Result<SignedRoot, LogError>;
    fn signed_roots(&self) -> Result<Vec<SignedRoot>, LogError>;
    fn entry(&self, digest: &Digest) -> Result<Option<StoredEntry>, LogError>;
    fn entry_at(&self, tree_id: u64, leaf_index: u64) -> Result<Option<LogEntry>, LogError>;
    fn inclusion_proof(&self, tree_id: u64, leaf_index: u64, tree_size: u64) -> Result<InclusionProof, LogError>;
    fn consistency_proof(&self, tree_id: u64, old_size: u64, new_size: u64) -> Result<ConsistencyProof, LogError>;
    fn goldens_for_artifact_id(&self, artifact_id: &str) -> Result<Vec<GoldenValue>, LogError>;
    fn goldens_for_digest(&self, digest: &Digest) -> Result<Vec<GoldenValue>, LogError>;
    fn attestations_producing(&self, artifact: &Digest) -> Result<Vec<Digest>, LogError>;
}

pub trait LogWriter: Send + Sync {
    fn submit(&self, entry: LogEntry) -> Result<Submission, LogError>;
    fn seal_and_chain(&self) -> Result<(SignedRoot, SignedRoot), LogError>;
}

/// Shared in-process log. Submissions serialize on the write lock; reads
/// proceed concurrently.
#[derive(Clone, Debug)]
pub struct LogHandle {
    inner: Arc<RwLock<TransparencyLog>>,
}

impl LogHandle {
    pub fn new(log: TransparencyLog) -> Self {
        LogHandle { inner: Arc::new(RwLock::new(log)) }
    }

    pub fn read(&self) -> parking_lot::RwLockReadGuard<'_, TransparencyLog> {
        self.inner.read()
    }

    pub fn write(&self) -> parking_lot::RwLockWriteGuard<'_, TransparencyLog> {
        self.inner.write()
    }
}

impl LogReader for LogHandle {
    fn log_public_key(&self) -> Result<PublicKey, LogError> {
        Ok(self.read().public_key())
    }

    fn signed_root(&self, tree_id: Option<u64>) -> Result<SignedRoot, LogError> {
        self.read().signed_root(tree_id)
    }

    fn signed_roots(&self) -> Result<Vec<SignedRoot>, LogError> {
        Ok(self.read().signed_roots())
    }

    fn entry(&self, digest: &Digest) -> Result<Option<StoredEntry>, LogError> {
        Ok(self.read().entry(digest))
    }

    fn entry_at(&self, tree_id: u64, leaf_index: u64) -> Result<Option<LogEntry>, LogError> {
        Ok(self.read().entry_at(tree_id, leaf_index).cloned())
    }

    fn inclusion_proof(&self, tree_id: u64, leaf_index: u64, tree_size: u64) -> Result<InclusionProof, LogError> {
        self.read().prove_inclusion(tree_id, leaf_index, Some(tree_size))
    }

    fn consistency_proof(&self, tree_id: u64, old_size: u64, new_size: u64) -> Result<ConsistencyProof, LogError> {
        self.read().prove_consistency(tree_id, old_size, new_size)
    }

    fn goldens_for_artifact_id(&self, artifact_id: &str) -> Result<Vec<GoldenValue>, LogError> {
        Ok(self.read().goldens_for_artifact_id(artifact_id))
    }

    fn goldens_for_digest(&self, digest: &Digest) -> Result<Vec<GoldenValue>, LogError> {
        Ok(self.read().goldens_for_digest(digest))
    }

    fn attestations_producing(&self, artifact: &Digest) -> Result<Vec<Digest>, LogError> {
        Ok(self.read().attestations_producing(artifact))
    }
}

impl LogWriter for LogHandle {
    fn submit(&self, entry: LogEntry) -> Result<Submission, LogError> {
        Ok(self.write().submit(entry)?)
    }

    fn seal_and_chain(&self) -> Result<(SignedRoot, SignedRoot), LogError> {
        self.write().seal_and_chain()
    }
}

impl<T: LogReader + ?Sized> LogReader for Arc<T> {
    fn log_public_key(&self) -> Result<PublicKey, LogError> {
        (**self).log_public_key()
    }
    fn signed_root(&self, tree_id: Option<u64>) -> Result<SignedRoot, LogError> {
        (**self).signed_root(tree_id)
    }
    fn signed_roots(&self) -> Result<Vec<SignedRoot>, LogError> {
        (**self).signed_roots()
    }
    fn entry(&self, digest: &Digest) -> Result<Option<StoredEntry>, LogError> {
        (**self).entry(digest)
    }
    fn entry_at(&self, tree_id: u64, leaf_index: u64) -> Result<Option<LogEntry>, LogError> {
        (**self).entry_at(tree_id, leaf_index)
    }
    fn inclusion_proof(&self, tree_id: u64, leaf_index: u64, tree_size: u64) -> Result<InclusionProof, LogError> {
        (**self).inclusion_proof(tree_id, leaf_index, tree_size)
    }
    fn consistency_proof(&self, tree_id: u64, old_size: u64, new_size: u64) -> Result<ConsistencyProof, LogError> {
        (**self).consistency_proof(tree_id, old_size, new_size)
    }
    fn goldens_for_artifact_id(&self, artifact_id: &str) -> Result<Vec<GoldenValue>, LogError> {
        (**self).goldens_for_artifact_id(artifact_id)
    }
    fn goldens_for_digest(&self, digest: &Digest) -> Result<Vec<GoldenValue>, LogError> {
        (**self).goldens_for_digest(digest)
    }
    fn attestations_producing(&self, artifact: &Digest) -> Result<Vec<Digest>, LogError> {
        (**self).attestations_producing(artifact)
    }
}
