use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rac_bench::{index, records};
use rac_core::fixtures::random_unit_vectors;
use rac_core::index::{HnswParams, VectorIndex};
use rac_core::Label;

fn build(c: &mut Criterion) {
    let mut g = c.benchmark_group("hnsw_build");
    g.sample_size(10);
    for n in [1000, 5000] {
        let recs = records(n, 64, 1);
        g.bench_with_input(BenchmarkId::from_parameter(n), &recs, |b, recs| {
            b.iter(|| VectorIndex::rebuild(recs.clone(), HnswParams::default()).unwrap())
        });
    }
    g.finish();
}

fn search(c: &mut Criterion) {
    let idx = index(10_000, 64, 2);
    let queries = random_unit_vectors(64, 64, 3);
    let mut g = c.benchmark_group("hnsw_search_k10");
    g.bench_function("hnsw", |b| {
        let mut i = 0;
        b.iter(|| {
            i = (i + 1) % queries.len();
            idx.search(black_box(&queries[i]), 10, None).unwrap()
        })
    });
    g.bench_function("filtered", |b| {
        let secret = |m: &rac_core::index::RecordMetadata| m.label == Label::Secret;
        let mut i = 0;
        b.iter(|| {
            i = (i + 1) % queries.len();
            idx.search(black_box(&queries[i]), 10, Some(&secret)).unwrap()
        })
    });
    g.bench_function("brute_force", |b| {
        let mut i = 0;
        b.iter(|| {
            i = (i + 1) % queries.len();
            idx.brute_force_search(black_box(&queries[i]), 10, None).unwrap()
        })
    });
    g.finish();
}

fn persist(c: &mut Criterion) {
    let idx = index(5000, 64, 4);
    let bytes = idx.to_bytes();
    c.bench_function("index_to_bytes_5k", |b| b.iter(|| black_box(&idx).to_bytes()));
    c.bench_function("index_from_bytes_5k", |b| b.iter(|| VectorIndex::from_bytes(black_box(&bytes)).unwrap()));
}

criterion_group!(benches, build, search, persist);
criterion_main!(benches);
