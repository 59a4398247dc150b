use atlas_core::canonical::canonical_bytes;
use atlas_core::merkle::{leaf_hash, verify_inclusion, MerkleTree};
use atlas_core::scenario::twenty_event_manifest;
use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};

fn tree(n: usize) -> MerkleTree {
    let mut t = MerkleTree::new();
    for i in 0..n {
        t.push(format!("entry-{i}").as_bytes());
    }
    t
}

fn merkle(c: &mut Criterion) {
    let mut g = c.benchmark_group("merkle");
    for n in [64usize, 1024, 16384] {
        g.bench_with_input(BenchmarkId::new("append", n), &n, |b, &n| b.iter(|| tree(n).root()));
        let t = tree(n);
        let root = t.root();
        let leaf = leaf_hash(format!("entry-{}", n / 3).as_bytes());
        g.bench_with_input(BenchmarkId::new("prove_verify_inclusion", n), &n, |b, &n| {
            b.iter(|| {
                let p = t.prove_inclusion((n / 3) as u64, n as u64).unwrap();
                verify_inclusion(&p, &leaf, &root).unwrap();
            })
        });
        g.bench_with_input(BenchmarkId::new("prove_consistency", n), &n, |b, &n| {
            b.iter(|| t.prove_consistency(black_box((n / 2) as u64), n as u64).unwrap())
        });
    }
    g.finish();
}

fn canonical(c: &mut Criterion) {
    let (finalized, bytes) = twenty_event_manifest(7).unwrap();
    c.bench_function(&format!("canonical/manifest_{}_bytes", bytes.len()), |b| {
        b.iter(|| canonical_bytes(black_box(&finalized)).unwrap())
    });
}

criterion_group!(benches, merkle, canonical);
criterion_main!(benches);
