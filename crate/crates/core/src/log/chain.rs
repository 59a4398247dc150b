use super::{LogEntry, LogReader, SignedRoot};
use crate::crypto::PublicKey;
use crate::digest::Digest;
use crate::merkle::{leaf_hash, verify_inclusion};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("tree chain broken at tree {at_tree}: {reason}")]
pub struct ChainWalkError {
    pub at_tree: u64,
    pub reason: String,
}

/// Verifies a sequence of per-tree signed roots as one tree chain and
/// returns their roots in order. For every tree `j`: its root must carry a
/// valid log signature, and for `j > 0` leaf 0 must be a chain link proven
/// into root `j` that names exactly root `j-1`. Stops at the first failure.
pub fn walk_chain(
    reader: &dyn LogReader,
    log_key: &PublicKey,
    roots: &[SignedRoot],
) -> Result<Vec<Digest>, ChainWalkError> {
    let mut out = Vec::with_capacity(roots.len());
    for (j, root) in roots.iter().enumerate() {
        let at = j as u64;
        let fail = |reason: String| ChainWalkError { at_tree: at, reason };
        if root.tree_id != at {
            return Err(fail(format!("expected tree {at}, got tree {}", root.tree_id)));
        }
        if !root.verify(log_key) {
            return Err(fail("signed root does not verify under the log key".into()));
        }
        if j > 0 {
            let prev = &roots[j - 1];
            let entry = reader
                .entry_at(at, 0)
                .map_err(|e| fail(e.to_string()))?
                .ok_or_else(|| fail("missing chain-link leaf".into()))?;
            let LogEntry::ChainLink(link) = &entry else {
                return Err(fail(format!("leaf 0 is a {} entry, not a chain link", entry.kind())));
            };
            let proof = reader.inclusion_proof(at, 0, root.tree_size).map_err(|e| fail(e.to_string()))?;
            verify_inclusion(&proof, &leaf_hash(&entry.leaf_bytes()), &root.root)
                .map_err(|e| fail(format!("chain-link leaf inclusion: {e}")))?;
            if link.previous_tree_id != prev.tree_id
                || link.previous_size != prev.tree_size
                || link.previous_root != prev.root
            {
                return Err(fail(format!(
                    "chain link names {} (size {}), predecessor root is {} (size {})",
                    link.previous_root, link.previous_size, prev.root, prev.tree_size
                )));
            }
        }
        out.push(root.root);
    }
    Ok(out)
}
