//! Merkle proofs against a deliberately naive recursive recomputation.

use atlas_core::digest::Digest;
use atlas_core::merkle::{
    leaf_hash, verify_consistency, verify_inclusion, ConsistencyProof, InclusionProof, MerkleTree,
};

mod oracle;
use oracle::{leaves, mth, path, subproof};

fn tree(ls: &[Vec<u8>]) -> MerkleTree {
    let mut t = MerkleTree::new();
    for l in ls {
        t.push(l);
    }
    t
}

fn d(x: [u8; 32]) -> Digest {
    Digest(x)
}

#[test]
fn known_roots() {
    // values computed independently with Python's hashlib
    assert_eq!(MerkleTree::new().root().to_hex(), "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855");
    assert_eq!(leaf_hash(b"").to_hex(), "6e340b9cffb37a989ca544e6bb780a2c78901d3fb33738768511a30617afa01d");
    let mut t = MerkleTree::new();
    for i in 0..3u8 {
        t.push(&[i]);
    }
    assert_eq!(t.root().to_hex(), "3b6cccd7e3e023ff393006f030315ee7ad9eb111b022b41fba7e5b7a3973f688");
}

#[test]
fn inclusion_proofs_match_oracle_and_reject_corruption() {
    for n in 1..=64usize {
        let ls = leaves(n);
        let t = tree(&ls);
        assert_eq!(t.root(), d(mth(&ls)), "root n={n}");
        for size in 1..=n {
            let root = d(mth(&ls[..size]));
            assert_eq!(t.root_at(size as u64).unwrap(), root);
            for m in 0..size {
                let proof = t.prove_inclusion(m as u64, size as u64).unwrap();
                let want: Vec<Digest> = path(m, &ls[..size]).into_iter().map(d).collect();
                assert_eq!(proof.audit_path, want, "n={n} size={size} m={m}");
                let leaf = leaf_hash(&ls[m]);
                verify_inclusion(&proof, &leaf, &root).unwrap();

                assert!(verify_inclusion(&proof, &leaf.with_bit_flipped(m), &root).is_err());
                assert!(verify_inclusion(&proof, &leaf, &root.with_bit_flipped(m)).is_err());
                for i in 0..proof.audit_path.len() {
                    let mut bad = proof.clone();
                    bad.audit_path[i] = bad.audit_path[i].with_bit_flipped(i * 7 + m);
                    assert!(verify_inclusion(&bad, &leaf, &root).is_err(), "n={n} size={size} m={m} i={i}");
                }
                if size > 1 {
                    let wrong_index = InclusionProof { leaf_index: ((m + 1) % size) as u64, ..proof.clone() };
                    assert!(verify_inclusion(&wrong_index, &leaf, &root).is_err());
                }
            }
        }
    }
}

#[test]
fn consistency_proofs_match_oracle_and_reject_corruption() {
    for n in 1..=64usize {
        let ls = leaves(n);
        let t = tree(&ls);
        let new_root = d(mth(&ls));
        for m in 1..=n {
            let old_root = d(mth(&ls[..m]));
            let proof = t.prove_consistency(m as u64, n as u64).unwrap();
            let want: Vec<Digest> = if m == n { vec![] } else { subproof(m, &ls, true).into_iter().map(d).collect() };
            assert_eq!(proof.path, want, "m={m} n={n}");
            verify_consistency(&proof, &old_root, &new_root).unwrap();

            assert!(verify_consistency(&proof, &old_root.with_bit_flipped(1), &new_root).is_err());
            assert!(verify_consistency(&proof, &old_root, &new_root.with_bit_flipped(2)).is_err());
            for i in 0..proof.path.len() {
                let mut bad = proof.clone();
                bad.path[i] = bad.path[i].with_bit_flipped(i * 5 + m);
                assert!(verify_consistency(&bad, &old_root, &new_root).is_err(), "m={m} n={n} i={i}");
            }
            if m < n {
                let truncated = ConsistencyProof { path: proof.path[..proof.path.len() - 1].to_vec(), ..proof.clone() };
                assert!(verify_consistency(&truncated, &old_root, &new_root).is_err());
            }
        }
    }
}
