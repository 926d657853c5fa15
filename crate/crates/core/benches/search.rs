use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[path = "../tests/common/mod.rs"]
mod common;

use searchloop_core::corpus::ingest;
use searchloop_core::retriever::{Bm25Params, Index};

fn bench_search(c: &mut Criterion) {
    let store = ingest(common::synthetic_documents(100_000, 100_000, 90, 30_000), 100).unwrap();
    let index = Index::build(&store, Bm25Params::default()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    c.bench_function("bm25 top-10, 100k passages", |b| {
        b.iter_batched(
            || common::random_query(&mut rng, 30_000),
            |q| index.search(&q, 10).unwrap(),
            BatchSize::SmallInput,
        )
    });
}

fn bench_index(c: &mut Criterion) {
    let store = ingest(common::synthetic_documents(7, 10_000, 90, 30_000), 100).unwrap();
    let mut group = c.benchmark_group("indexing");
    group.sample_size(10);
    group.bench_function("build, 10k passages", |b| b.iter(|| Index::build(&store, Bm25Params::default()).unwrap()));
    group.finish();
}

criterion_group!(benches, bench_search, bench_index);
criterion_main!(benches);
