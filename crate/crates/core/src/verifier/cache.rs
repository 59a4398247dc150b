//! Cache of verified transformation attestations.
//!
//! Each entry records the attestation exactly as it was verified and the
//! signed root its inclusion was proven against. Per tree, the cache keeps a
//! checkpoint: the latest signed root it trusts. When the log's root for a
//! tree moves, one consistency proof from the checkpoint to the new root
//! re-validates every entry of that tree at once; if the proof fails, the
//! tree's entries are evicted along with everything that depends on them.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::sync::atomic::{AtomicU64, Ordering};

use parking_lot::RwLock;

use crate::digest::Digest;
use crate::log::{LogError, LogReader, SignedRoot};
use crate::merkle::verify_consistency;
use crate::model::TransformationAttestation;

#[derive(Debug, Clone, PartialEq)]
pub struct CachedHop {
    pub attestation: TransformationAttestation,
    pub verified_under: SignedRoot,
    /// Code register of the producing ML system's quote.
    pub code_hash: Option<Digest>,
}

#[derive(Debug, Default)]
struct State {
    hops: HashMap<Digest, CachedHop>,
    /// precursor → attestations that list it
    dependents: HashMap<Digest, HashSet<Digest>>,
    checkpoints: BTreeMap<u64, SignedRoot>,
}

impl State {
    fn evict_closure(&mut self, start: impl IntoIterator<Item = Digest>) -> usize {
        let mut stack: Vec<Digest> = start.into_iter().collect();
        let mut evicted = 0;
        while let Some(d) = stack.pop() {
            if let Some(hop) = self.hops.remove(&d) {
                evicted += 1;
                for p in &hop.attestation.claim.precursor_hashes {
                    if let Some(set) = self.dependents.get_mut(p) {
                        set.remove(&d);
                    }
                }
            }
            if let Some(deps) = self.dependents.remove(&d) {
                stack.extend(deps);
            }
        }
        evicted
    }

    fn evict_tree(&mut self, tree_id: u64) -> usize {
        let in_tree: Vec<Digest> =
            self.hops.iter().filter(|(_, h)| h.verified_under.tree_id == tree_id).map(|(d, _)| *d).collect();
        self.checkpoints.remove(&tree_id);
        self.evict_closure(in_tree)
    }
}

#[derive(Debug, Default)]
pub struct VerificationCache {
    state: RwLock<State>,
    hits: AtomicU64,
    misses: AtomicU64,
    consistency_checks: AtomicU64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct CacheCounters {
    pub hits: u64,
    pub misses: u64,
    pub consistency_checks: u64,
}

impl VerificationCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.state.read().hops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn contains(&self, digest: &Digest) -> bool {
        self.state.read().hops.contains_key(digest)
    }

    pub fn checkpoints(&self) -> Vec<SignedRoot> {
        self.state.read().checkpoints.values().cloned().collect()
    }

    pub fn counters(&self) -> CacheCounters {
        CacheCounters {
            hits: self.hits.load(Ordering::Relaxed),
            misses: self.misses.load(Ordering::Relaxed),
            consistency_checks: self.consistency_checks.load(Ordering::Relaxed),
        }
    }

    pub fn clear(&self) {
        *self.state.write() = State::default();
    }

    /// Brings every checkpoint up to the current roots. Trees whose new root
    /// is not provably an extension of the checkpoint lose their entries.
    pub fn refresh(&self, roots: &[SignedRoot], reader: &dyn LogReader) -> Result<(), LogError> {
        {
            let s = self.state.read();
            let current = s.checkpoints.iter().all(|(t, cp)| roots.get(*t as usize) == Some(cp));
            if current {
                return Ok(());
            }
        }
        let mut s = self.state.write();
        let stale: Vec<(u64, SignedRoot)> = s
            .checkpoints
            .iter()
            .filter(|(t, cp)| roots.get(**t as usize) != Some(*cp))
            .map(|(t, cp)| (*t, cp.clone()))
            .collect();
        for (tree_id, cp) in stale {
            let Some(new) = roots.get(tree_id as usize) else {
                s.evict_tree(tree_id);
                continue;
            };
            let consistent = if new.tree_size < cp.tree_size {
                false
            } else if new.tree_size == cp.tree_size {
                new.root == cp.root
            } else {
                self.consistency_checks.fetch_add(1, Ordering::Relaxed);
                let proof = reader.consistency_proof(tree_id, cp.tree_size, new.tree_size)?;
                verify_consistency(&proof, &cp.root, &new.root).is_ok()
            };
            if consistent {
                s.checkpoints.insert(tree_id, new.clone());
            } else {
                log::warn!("tree {tree_id}: root is not consistent with checkpoint; evicting");
                s.evict_tree(tree_id);
            }
        }
        Ok(())
    }

    /// A cached hop, only if the attestation being served now is identical
    /// to the one that was verified.
    pub fn lookup(&self, digest: &Digest, served: &TransformationAttestation) -> Option<CachedHop> {
        let s = self.state.read();
        let hit = s
            .hops
            .get(digest)
            .filter(|h| h.attestation == *served && s.checkpoints.contains_key(&h.verified_under.tree_id))
            .cloned();
        drop(s);
        if hit.is_some() {
            self.hits.fetch_add(1, Ordering::Relaxed);
        } else {
            self.misses.fetch_add(1, Ordering::Relaxed);
        }
        hit
    }

    /// Records a hop verified under `hop.verified_under`. Ignored if the
    /// tree's checkpoint has since moved to a different root.
    pub fn insert(&self, digest: Digest, hop: CachedHop) {
        let mut s = self.state.write();
        let tree_id = hop.verified_under.tree_id;
        match s.checkpoints.get(&tree_id) {
            None => {
                s.checkpoints.insert(tree_id, hop.verified_under.clone());
            }
            Some(cp) if *cp == hop.verified_under => {}
            Some(_) => return,
        }
        for p in &hop.attestation.claim.precursor_hashes {
            s.dependents.entry(*p).or_default().insert(digest);
        }
        s.hops.insert(digest, hop);
    }

    /// Evicts `digest` and every cached attestation that transitively lists
    /// it as a precursor. Returns the number of evicted entries.
    pub fn invalidate(&self, digest: &Digest) -> usize {
        let mut s = self.state.write();
        if !s.hops.contains_key(digest) && !s.dependents.contains_key(digest) {
            return 0;
        }
        s.evict_closure([*digest])
    }
}
