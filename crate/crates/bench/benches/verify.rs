use atlas_core::scenario::attacks::expectation_for;
use atlas_core::scenario::{build_chain, Deployment};
use atlas_core::verifier::{Subject, VerificationCache};
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

fn verify(c: &mut Criterion) {
    let mut g = c.benchmark_group("verify");
    g.sample_size(20);
    for n in [20usize, 120] {
        let dep = Deployment::new(1).unwrap();
        let chain = build_chain(&dep, "bench", n, 4096, |_| Vec::new()).unwrap();
        let verifier = dep.verifier();
        let subject = Subject::Bytes(chain.final_artifact().bytes.clone());
        let expect = expectation_for(&chain, n);
        g.bench_with_input(BenchmarkId::new("cold", n), &n, |b, _| {
            b.iter(|| {
                let cache = VerificationCache::new();
                assert!(verifier.verify_artifact(&subject, &expect, &dep.log, Some(&cache)).passed());
            })
        });
        let cache = VerificationCache::new();
        verifier.verify_artifact(&subject, &expect, &dep.log, Some(&cache));
        g.bench_with_input(BenchmarkId::new("warm", n), &n, |b, _| {
            b.iter(|| assert!(verifier.verify_artifact(&subject, &expect, &dep.log, Some(&cache)).passed()))
        });
    }
    g.finish();
}

criterion_group!(benches, verify);
criterion_main!(benches);
