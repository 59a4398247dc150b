use std::collections::HashMap;

use parking_lot::Mutex;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{Expectation, Subject, VerificationCache, VerificationReport, Verifier};
use crate::crypto::PublicKey;
use crate::digest::Digest;
use crate::log::{LogEntry, LogError, LogReader, SignedRoot, StoredEntry};
use crate::merkle::{ConsistencyProof, InclusionProof};
use crate::model::GoldenValue;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerifyRequest {
    pub subject: Subject,
    pub expectation: Expectation,
}

/// Read-through memo over a reader for the duration of one batch, so every
/// request sees the same log snapshot and shared entries are fetched once.
struct Memo<'a> {
    inner: &'a dyn LogReader,
    key: Mutex<Option<PublicKey>>,
    roots: Mutex<Option<Vec<SignedRoot>>>,
    entries: Mutex<HashMap<Digest, Option<StoredEntry>>>,
    goldens_by_id: Mutex<HashMap<String, Vec<GoldenValue>>>,
    goldens_by_digest: Mutex<HashMap<Digest, Vec<GoldenValue>>>,
    producing: Mutex<HashMap<Digest, Vec<Digest>>>,
}

fn memo<K: std::hash::Hash + Eq + Clone, V: Clone>(
    map: &Mutex<HashMap<K, V>>,
    key: &K,
    fetch: impl FnOnce() -> Result<V, LogError>,
) -> Result<V, LogError> {
    if let Some(v) = map.lock().get(key) {
        return Ok(v.clone());
    }
    let v = fetch()?;
    map.lock().insert(key.clone(), v.clone());
    Ok(v)
}

impl<'a> Memo<'a> {
    fn new(inner: &'a dyn LogReader) -> Self {
        Memo {
            inner,
            key: Mutex::new(None),
            roots: Mutex::new(None),
            entries: Mutex::default(),
            goldens_by_id: Mutex::default(),
            goldens_by_digest: Mutex::default(),
            producing: Mutex::default(),
        }
    }
}

impl LogReader for Memo<'_> {
    fn log_public_key(&self) -> Result<PublicKey, LogError> {
        let mut k = self.key.lock();
        if k.is_none() {
            *k = Some(self.inner.log_public_key()?);
        }
        Ok(k.expect("set above"))
    }

    fn signed_root(&self, tree_id: Option<u64>) -> Result<SignedRoot, LogError> {
        let roots = self.signed_roots()?;
        let id = tree_id.unwrap_or(roots.len().saturating_sub(1) as u64);
        roots.get(id as usize).cloned().ok_or_else(|| LogError::NotFound(format!("tree {id}")))
    }

    fn signed_roots(&self) -> Result<Vec<SignedRoot>, LogError> {
        let mut r = self.roots.lock();
        if r.is_none() {
            *r = Some(self.inner.signed_roots()?);
        }
        Ok(r.clone().expect("set above"))
    }

    fn entry(&self, digest: &Digest) -> Result<Option<StoredEntry>, LogError> {
        memo(&self.entries, digest, || self.inner.entry(digest))
    }

    fn entry_at(&self, tree_id: u64, leaf_index: u64) -> Result<Option<LogEntry>, LogError> {
        self.inner.entry_at(tree_id, leaf_index)
    }

    fn inclusion_proof(&self, tree_id: u64, leaf_index: u64, tree_size: u64) -> Result<InclusionProof, LogError> {
        self.inner.inclusion_proof(tree_id, leaf_index, tree_size)
    }

    fn consistency_proof(&self, tree_id: u64, old_size: u64, new_size: u64) -> Result<ConsistencyProof, LogError> {
        self.inner.consistency_proof(tree_id, old_size, new_size)
    }

    fn goldens_for_artifact_id(&self, artifact_id: &str) -> Result<Vec<GoldenValue>, LogError> {
        memo(&self.goldens_by_id, &artifact_id.to_owned(), || self.inner.goldens_for_artifact_id(artifact_id))
    }

    fn goldens_for_digest(&self, digest: &Digest) -> Result<Vec<GoldenValue>, LogError> {
        memo(&self.goldens_by_digest, digest, || self.inner.goldens_for_digest(digest))
    }

    fn attestations_producing(&self, artifact: &Digest) -> Result<Vec<Digest>, LogError> {
        memo(&self.producing, artifact, || self.inner.attestations_producing(artifact))
    }
}

/// Attestation digests reachable from the attestation producing `artifact`.
/// Unreadable entries simply end the walk; the real verification reports them.
fn lineage_set(reader: &dyn LogReader, artifact: &Digest) -> Vec<Digest> {
    let Some(root) = reader.attestations_producing(artifact).ok().and_then(|p| p.last().copied()) else {
        return Vec::new();
    };
    let mut seen = vec![root];
    let mut stack = vec![root];
    while let Some(d) = stack.pop() {
        if let Ok(Some(StoredEntry { entry: LogEntry::Attestation(a), .. })) = reader.entry(&d) {
            for p in a.claim.precursor_hashes {
                if !seen.contains(&p) {
                    seen.push(p);
                    stack.push(p);
                }
            }
        }
    }
    seen
}

fn find(parent: &mut [usize], mut i: usize) -> usize {
    while parent[i] != i {
        parent[i] = parent[parent[i]];
        i = parent[i];
    }
    i
}

impl Verifier {
    /// Verifies many artifacts. Requests whose lineages intersect form one
    /// group and run in order against a shared cache, so common ancestors
    /// are verified once; disjoint groups run in parallel. Reports come back
    /// in request order, and a failing request never affects the others.
    pub fn verify_batch(
        &self,
        requests: &[VerifyRequest],
        reader: &dyn LogReader,
        cache: Option<&VerificationCache>,
    ) -> Vec<VerificationReport> {
        let local;
        let cache = match cache {
            Some(c) => c,
            None => {
                local = VerificationCache::new();
                &local
            }
        };
        let memo = Memo::new(reader);

        let mut parent: Vec<usize> = (0..requests.len()).collect();
        let mut owner: HashMap<Digest, usize> = HashMap::new();
        for (i, req) in requests.iter().enumerate() {
            for d in lineage_set(&memo, &req.expectation.artifact_digest) {
                match owner.get(&d) {
                    Some(&j) => {
                        let (a, b) = (find(&mut parent, i), find(&mut parent, j));
                        parent[a.max(b)] = a.min(b);
                    }
                    None => {
                        owner.insert(d, i);
                    }
                }
            }
        }
        let mut groups: Vec<Vec<usize>> = Vec::new();
        let mut group_of: HashMap<usize, usize> = HashMap::new();
        for i in 0..requests.len() {
            let r = find(&mut parent, i);
            let g = *group_of.entry(r).or_insert_with(|| {
                groups.push(Vec::new());
                groups.len() - 1
            });
            groups[g].push(i);
        }

        let mut results: Vec<(usize, VerificationReport)> = groups
            .par_iter()
            .flat_map_iter(|group| {
                group
                    .iter()
                    .map(|&i| {
                        (i, self.verify_artifact(&requests[i].subject, &requests[i].expectation, &memo, Some(cache)))
                    })
                    .collect::<Vec<_>>()
            })
            .collect();
        results.sort_by_key(|(i, _)| *i);
        results.into_iter().map(|(_, r)| r).collect()
    }
}
