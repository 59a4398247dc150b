//! Local manifest store.
//!
//! Manifests are kept decomposed: claims, signatures, assertion bodies and
//! pipeline metadata live in separate tables. Event bodies larger than
//! [`INLINE_LIMIT`] are held once in the body table and referenced by hash
//! from the metadata, so large events are never duplicated.

use std::collections::{BTreeMap, HashMap, HashSet};

use parking_lot::RwLock;

use crate::canonical::{canonical_bytes, decode, CanonicalError};
use crate::crypto::TeeQuote;
use crate::digest::Digest;
use crate::model::{Claim, ClaimSignature, MonitorEvent, PipelineMetadata, TransformationAttestation};
use crate::value::Value;

pub const INLINE_LIMIT: usize = 1024;

#[derive(Debug, Clone)]
enum EventSlot {
    Inline(MonitorEvent),
    Ref(Digest),
}

#[derive(Debug, Clone)]
struct StoredMetadata {
    execution_name: String,
    pipeline_spec: Value,
    events: Vec<EventSlot>,
    system_quote: TeeQuote,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct CacheStats {
    pub claims: usize,
    pub metadata: usize,
    pub bodies: usize,
    pub inline_events: usize,
    pub referenced_events: usize,
}

#[derive(Debug, Default)]
struct Tables {
    bodies: HashMap<Digest, Vec<u8>>,
    metadata: HashMap<Digest, StoredMetadata>,
    claims: HashMap<Digest, Claim>,
    signatures: HashMap<Digest, ClaimSignature>,
    manifests: BTreeMap<String, Digest>,
    committed: HashSet<Digest>,
}

#[derive(Debug, Default)]
pub struct ManifestCache {
    tables: RwLock<Tables>,
}

impl ManifestCache {
    pub fn new() -> Self {
        Self::default()
    }

    /// Stores one assertion body and returns its hash.
    pub fn put_body(&self, bytes: Vec<u8>) -> Digest {
        let d = Digest::of(&bytes);
        self.tables.write().bodies.entry(d).or_insert(bytes);
        d
    }

    pub fn body(&self, hash: &Digest) -> Option<Vec<u8>> {
        self.tables.read().bodies.get(hash).cloned()
    }

    pub fn put_metadata(&self, meta: &PipelineMetadata) -> Result<Digest, CanonicalError> {
        let digest = meta.digest()?;
        let mut events = Vec::with_capacity(meta.events.len());
        for ev in &meta.events {
            let bytes = canonical_bytes(ev)?;
            if bytes.len() > INLINE_LIMIT {
                events.push(EventSlot::Ref(self.put_body(bytes)));
            } else {
                events.push(EventSlot::Inline(ev.clone()));
            }
        }
        let stored = StoredMetadata {
            execution_name: meta.execution_name.clone(),
            pipeline_spec: meta.pipeline_spec.clone(),
            events,
            system_quote: meta.system_quote.clone(),
        };
        self.tables.write().metadata.insert(digest, stored);
        Ok(digest)
    }

    /// Reassembles metadata, resolving referenced event bodies.
    pub fn metadata(&self, digest: &Digest) -> Option<PipelineMetadata> {
        let t = self.tables.read();
        let stored = t.metadata.get(digest)?;
        let mut events = Vec::with_capacity(stored.events.len());
        for slot in &stored.events {
            match slot {
                EventSlot::Inline(ev) => events.push(ev.clone()),
                EventSlot::Ref(h) => events.push(decode(t.bodies.get(h)?).ok()?),
            }
        }
        Some(PipelineMetadata {
            execution_name: stored.execution_name.clone(),
            pipeline_spec: stored.pipeline_spec.clone(),
            events,
            system_quote: stored.system_quote.clone(),
        })
    }

    pub fn put_attestation(&self, a: &TransformationAttestation) -> Digest {
        let d = a.digest();
        let mut t = self.tables.write();
        t.claims.insert(d, a.claim.clone());
        t.signatures.insert(d, a.signature.clone());
        t.manifests.insert(a.claim.manifest_id.clone(), d);
        d
    }

    pub fn attestation(&self, digest: &Digest) -> Option<TransformationAttestation> {
        let t = self.tables.read();
        Some(TransformationAttestation {
            claim: t.claims.get(digest)?.clone(),
            signature: t.signatures.get(digest)?.clone(),
        })
    }

    pub fn by_manifest_id(&self, manifest_id: &str) -> Option<Digest> {
        self.tables.read().manifests.get(manifest_id).copied()
    }

    pub fn mark_committed(&self, digest: Digest) {
        self.tables.write().committed.insert(digest);
    }

    pub fn is_committed(&self, digest: &Digest) -> bool {
        self.tables.read().committed.contains(digest)
    }

    pub fn stats(&self) -> CacheStats {
        let t = self.tables.read();
        let (mut inline, mut referenced) = (0, 0);
        for m in t.metadata.values() {
            for e in &m.events {
                match e {
                    EventSlot::Inline(_) => inline += 1,
                    EventSlot::Ref(_) => referenced += 1,
                }
            }
        }
        CacheStats {
            claims: t.claims.len(),
            metadata: t.metadata.len(),
            bodies: t.bodies.len(),
            inline_events: inline,
            referenced_events: referenced,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::{SigningIdentity, SimulatedPlatform};
    use crate::model::EventKind;
    use crate::time::Timestamp;

    fn metadata(events: Vec<MonitorEvent>) -> PipelineMetadata {
        let platform = SimulatedPlatform::new(SigningIdentity::from_seed([7; 32], false));
        let key = SigningIdentity::from_seed([8; 32], true);
        PipelineMetadata {
            execution_name: "run".into(),
            pipeline_spec: Value::map().with("stages", 2),
            events,
            system_quote: platform.issue_quote(Digest::of(b"e"), Digest::of(b"c"), &[0; 32], key.record()),
        }
    }

    fn stats_event(n: usize) -> MonitorEvent {
        let mut stats = Value::map();
        for i in 0..n {
            stats = stats.with(format!("feature_{i:04}"), i as f64);
        }
        MonitorEvent::new(
            EventKind::LayerActivation,
            Timestamp::from_millis(n as i64),
            Value::map().with("layer_id", "dense").with("stats", stats),
        )
        .unwrap()
    }

    #[test]
    fn large_events_go_by_reference_and_reassemble_exactly() {
        let cache = ManifestCache::new();
        let meta = metadata(vec![stats_event(2), stats_event(200)]);
        let d = cache.put_metadata(&meta).unwrap();
        let s = cache.stats();
        assert_eq!((s.inline_events, s.referenced_events), (1, 1));
        let back = cache.metadata(&d).unwrap();
        assert_eq!(back, meta);
        assert_eq!(back.digest().unwrap(), d);
    }

    #[test]
    fn identical_bodies_are_stored_once() {
        let cache = ManifestCache::new();
        cache.put_metadata(&metadata(vec![stats_event(200)])).unwrap();
        let mut m2 = metadata(vec![stats_event(200)]);
        m2.execution_name = "other".into();
        cache.put_metadata(&m2).unwrap();
        assert_eq!(cache.stats().bodies, 1);
    }
}
