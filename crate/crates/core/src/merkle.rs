//! Append-only Merkle tree with domain-separated hashing.
//!
//! `leaf = SHA-256(0x00 ‖ entry)`, `node = SHA-256(0x01 ‖ left ‖ right)`; the
//! left subtree of an `n`-leaf tree holds the largest power of two strictly
//! less than `n` leaves. The empty tree hashes to `SHA-256("")`.
//!
//! Hashes of complete, aligned power-of-two subtrees are memoized as leaves
//! arrive, so roots and proofs for any historical size cost `O(log² n)`.

use serde::{Deserialize, Serialize};

use crate::digest::Digest;

pub fn leaf_hash(entry: &[u8]) -> Digest {
    Digest::of_parts(&[&[0x00], entry])
}

pub fn node_hash(left: &Digest, right: &Digest) -> Digest {
    Digest::of_parts(&[&[0x01], &left.0, &right.0])
}

pub fn empty_root() -> Digest {
    Digest::of(b"")
}

/// Largest power of two strictly less than `n` (`n >= 2`).
fn split_point(n: u64) -> u64 {
    debug_assert!(n >= 2);
    1 << (63 - (n - 1).leading_zeros())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InclusionProof {
    pub leaf_index: u64,
    pub tree_size: u64,
    pub audit_path: Vec<Digest>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConsistencyProof {
    pub old_size: u64,
    pub new_size: u64,
    pub path: Vec<Digest>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
pub enum MerkleError {
    #[error("leaf index {index} out of range for tree size {size}")]
    IndexOutOfRange { index: u64, size: u64 },
    #[error("tree size {requested} out of range (current size {current})")]
    SizeOutOfRange { requested: u64, current: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
pub enum ProofError {
    #[error("proof shape does not match the claimed sizes")]
    Malformed,
    #[error("recomputed root does not match")]
    RootMismatch,
}

#[derive(Debug, Clone, Default)]
pub struct MerkleTree {
    /// `levels[k][i]` is the hash of leaves `[i·2^k, (i+1)·2^k)`.
    levels: Vec<Vec<Digest>>,
}

impl MerkleTree {
    pub fn new() -> Self {
        MerkleTree { levels: vec![Vec::new()] }
    }

    pub fn from_leaf_hashes(leaves: impl IntoIterator<Item = Digest>) -> Self {
        let mut t = Self::new();
        for l in leaves {
            t.push_leaf_hash(l);
        }
        t
    }

    pub fn len(&self) -> u64 {
        self.levels[0].len() as u64
    }

    pub fn is_empty(&self) -> bool {
        self.levels[0].is_empty()
    }

    pub fn leaf(&self, index: u64) -> Option<Digest> {
        self.levels[0].get(index as usize).copied()
    }

    pub fn leaves(&self) -> &[Digest] {
        &self.levels[0]
    }

    /// Appends a leaf hash in the right-most empty position; returns its index.
    pub fn push_leaf_hash(&mut self, leaf: Digest) -> u64 {
        let index = self.len();
        self.levels[0].push(leaf);
        let mut k = 0;
        while self.levels[k].len() % 2 == 0 {
            let row = &self.levels[k];
            let parent = node_hash(&row[row.len() - 2], &row[row.len() - 1]);
            if self.levels.len() == k + 1 {
                self.levels.push(Vec::new());
            }
            self.levels[k + 1].push(parent);
            k += 1;
        }
        index
    }

    pub fn push(&mut self, entry: &[u8]) -> u64 {
        self.push_leaf_hash(leaf_hash(entry))
    }

    pub fn root(&self) -> Digest {
        self.root_at(self.len()).expect("current size is in range")
    }

    /// Root of the tree as it stood when it had `size` leaves.
    pub fn root_at(&self, size: u64) -> Result<Digest, MerkleError> {
        self.check_size(size)?;
        Ok(if size == 0 { empty_root() } else { self.subtree(0, size) })
    }

    fn check_size(&self, size: u64) -> Result<(), MerkleError> {
        if size > self.len() {
            return Err(MerkleError::SizeOutOfRange { requested: size, current: self.len() });
        }
        Ok(())
    }

    /// Hash of leaves `[start, start + n)`; `start` is a multiple of the
    /// largest power of two not exceeding `n` whenever reached via the
    /// standard left/right split.
    fn subtree(&self, start: u64, n: u64) -> Digest {
        debug_assert!(n >= 1);
        if n.is_power_of_two() && start % n == 0 {
            let k = n.trailing_zeros() as usize;
            return self.levels[k][(start / n) as usize];
        }
        let k = split_point(n);
        node_hash(&self.subtree(start, k), &self.subtree(start + k, n - k))
    }

    pub fn prove_inclusion(&self, index: u64, size: u64) -> Result<InclusionProof, MerkleError> {
        self.check_size(size)?;
        if index >= size {
            return Err(MerkleError::IndexOutOfRange { index, size });
        }
        let mut path = Vec::new();
        self.inclusion_path(index, 0, size, &mut path);
        Ok(InclusionProof { leaf_index: index, tree_size: size, audit_path: path })
    }

    fn inclusion_path(&self, m: u64, start: u64, n: u64, out: &mut Vec<Digest>) {
        if n == 1 {
            return;
        }
        let k = split_point(n);
        if m < k {
            self.inclusion_path(m, start, k, out);
            out.push(self.subtree(start + k, n - k));
        } else {
            self.inclusion_path(m - k, start + k, n - k, out);
            out.push(self.subtree(start, k));
        }
    }

    pub fn prove_consistency(&self, old_size: u64, new_size: u64) -> Result<ConsistencyProof, MerkleError> {
        self.check_size(new_size)?;
        if old_size == 0 || old_size > new_size {
            return Err(MerkleError::SizeOutOfRange { requested: old_size, current: new_size });
        }
        let mut path = Vec::new();
        if old_size < new_size {
            self.consistency_path(old_size, 0, new_size, true, &mut path);
        }
        Ok(ConsistencyProof { old_size, new_size, path })
    }

    fn consistency_path(&self, m: u64, start: u64, n: u64, whole: bool, out: &mut Vec<Digest>) {
        if m == n {
            if !whole {
                out.push(self.subtree(start, n));
            }
            return;
        }
        let k = split_point(n);
        if m <= k {
            self.consistency_path(m, start, k, whole, out);
            out.push(self.subtree(start + k, n - k));
        } else {
            self.consistency_path(m - k, start + k, n - k, false, out);
            out.push(self.subtree(start, k));
        }
    }
}

/// Shift `fn_` and `sn` right together until `fn_` is odd or zero.
fn shift_while_even(fn_: &mut u64, sn: &mut u64) {
    while *fn_ & 1 == 0 && *fn_ != 0 {
        *fn_ >>= 1;
        *sn >>= 1;
    }
}

pub fn root_from_inclusion(proof: &InclusionProof, leaf: &Digest) -> Result<Digest, ProofError> {
    if proof.leaf_index >= proof.tree_size {
        return Err(ProofError::Malformed);
    }
    let mut fn_ = proof.leaf_index;
    let mut sn = proof.tree_size - 1;
    let mut r = *leaf;
    for p in &proof.audit_path {
        if sn == 0 {
            return Err(ProofError::Malformed);
        }
        if fn_ & 1 == 1 || fn_ == sn {
            r = node_hash(p, &r);
            if fn_ & 1 == 0 {
                shift_while_even(&mut fn_, &mut sn);
            }
        } else {
            r = node_hash(&r, p);
        }
        fn_ >>= 1;
        sn >>= 1;
    }
    if sn != 0 {
        return Err(ProofError::Malformed);
    }
    Ok(r)
}

pub fn verify_inclusion(proof: &InclusionProof, leaf: &Digest, root: &Digest) -> Result<(), ProofError> {
    if root_from_inclusion(proof, leaf)? == *root {
        Ok(())
    } else {
        Err(ProofError::RootMismatch)
    }
}

pub fn verify_consistency(proof: &ConsistencyProof, old_root: &Digest, new_root: &Digest) -> Result<(), ProofError> {
    let (first, second) = (proof.old_size, proof.new_size);
    if first == 0 || first > second {
        return Err(ProofError::Malformed);
    }
    if first == second {
        if !proof.path.is_empty() {
            return Err(ProofError::Malformed);
        }
        return if old_root == new_root { Ok(()) } else { Err(ProofError::RootMismatch) };
    }
    if proof.path.is_empty() {
        return Err(ProofError::Malformed);
    }
    let mut path = proof.path.iter();
    let seed = if first.is_power_of_two() { *old_root } else { *path.next().expect("non-empty") };
    let mut fn_ = first - 1;
    let mut sn = second - 1;
    while fn_ & 1 == 1 {
        fn_ >>= 1;
        sn >>= 1;
    }
    let mut fr = seed;
    let mut sr = seed;
    for c in path {
        if sn == 0 {
            return Err(ProofError::Malformed);
        }
        if fn_ & 1 == 1 || fn_ == sn {
            fr = node_hash(c, &fr);
            sr = node_hash(c, &sr);
            if fn_ & 1 == 0 {
                shift_while_even(&mut fn_, &mut sn);
            }
        } else {
            sr = node_hash(&sr, c);
        }
        fn_ >>= 1;
        sn >>= 1;
    }
    if sn != 0 {
        return Err(ProofError::Malformed);
    }
    if fr == *old_root && sr == *new_root {
        Ok(())
    } else {
        Err(ProofError::RootMismatch)
    }
}
