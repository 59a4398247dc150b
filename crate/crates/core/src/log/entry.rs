use serde::{Deserialize, Serialize};

use crate::canonical::canonical_bytes;
use crate::crypto::{PublicKey, SigningIdentity};
use crate::digest::Digest;
use crate::model::{ClaimSignature, GoldenValue, PipelineMetadata, TransformationAttestation};

/// Leaf 0 of every tree after the first: the sealed predecessor's root.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChainLink {
    pub previous_tree_id: u64,
    pub previous_size: u64,
    pub previous_root: Digest,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum LogEntry {
    Attestation(TransformationAttestation),
    GoldenValue(GoldenValue),
    PipelineMetadata(PipelineMetadata),
    ChainLink(ChainLink),
}

impl LogEntry {
    pub fn kind(&self) -> &'static str {
        match self {
            LogEntry::Attestation(_) => "attestation",
            LogEntry::GoldenValue(_) => "golden-value",
            LogEntry::PipelineMetadata(_) => "pipeline-metadata",
            LogEntry::ChainLink(_) => "chain-link",
        }
    }

    /// Bytes hashed into the Merkle leaf. For attestations this is the
    /// canonical claim; for every other kind the canonical entry body.
    pub fn leaf_bytes(&self) -> Vec<u8> {
        match self {
            LogEntry::Attestation(a) => a.claim.canonical_bytes(),
            LogEntry::GoldenValue(g) => canonical_bytes(g).expect("golden values have no floats"),
            // admission rejects metadata that cannot be encoded
            LogEntry::PipelineMetadata(m) => canonical_bytes(m).unwrap_or_default(),
            LogEntry::ChainLink(c) => canonical_bytes(c).expect("chain links have no floats"),
        }
    }

    /// Lookup key. For attestations, the claim digest; for pipeline metadata,
    /// the value recorded as `pipeline_metadata_hash`.
    pub fn digest(&self) -> Digest {
        Digest::of(&self.leaf_bytes())
    }

    pub fn as_attestation(&self) -> Option<&TransformationAttestation> {
        match self {
            LogEntry::Attestation(a) => Some(a),
            _ => None,
        }
    }

    pub fn as_golden(&self) -> Option<&GoldenValue> {
        match self {
            LogEntry::GoldenValue(g) => Some(g),
            _ => None,
        }
    }

    pub fn as_metadata(&self) -> Option<&PipelineMetadata> {
        match self {
            LogEntry::PipelineMetadata(m) => Some(m),
            _ => None,
        }
    }

    pub fn as_chain_link(&self) -> Option<&ChainLink> {
        match self {
            LogEntry::ChainLink(c) => Some(c),
            _ => None,
        }
    }
}

/// An entry together with its position in the tree chain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoredEntry {
    pub tree_id: u64,
    pub leaf_index: u64,
    pub entry: LogEntry,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SignedRoot {
    pub tree_id: u64,
    pub tree_size: u64,
    pub root: Digest,
    pub log_signature: ClaimSignature,
}

#[derive(Serialize)]
struct RootBody {
    tree_id: u64,
    tree_size: u64,
    root: Digest,
}

impl SignedRoot {
    fn body(tree_id: u64, tree_size: u64, root: Digest) -> Vec<u8> {
        canonical_bytes(&RootBody { tree_id, tree_size, root }).expect("integers and digests encode")
    }

    pub fn sign(tree_id: u64, tree_size: u64, root: Digest, log_key: &SigningIdentity) -> Self {
        let log_signature = ClaimSignature::sign(log_key, &Self::body(tree_id, tree_size, root));
        SignedRoot { tree_id, tree_size, root, log_signature }
    }

    pub fn verify(&self, log_key: &PublicKey) -> bool {
        self.log_signature.public_key == *log_key
            && self.log_signature.verify(&Self::body(self.tree_id, self.tree_size, self.root))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Submission {
    pub tree_id: u64,
    pub leaf_index: u64,
    pub digest: Digest,
    pub signed_root: SignedRoot,
}
