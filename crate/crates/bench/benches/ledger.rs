use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};
use vguard_bench::payload;
use vguard_core::crypto::HashAlg;
use vguard_core::ledger::DataBatch;

/// Building a batch hashes its whole payload, so cost tracks batch size.
fn batch_hash(c: &mut Criterion) {
    let mut group = c.benchmark_group("data_batch");
    let entry_size = 32u32;
    for beta in [100usize, 1000, 3000, 5000] {
        let data = payload(beta * entry_size as usize);
        group.throughput(Throughput::Elements(beta as u64));
        group.bench_with_input(BenchmarkId::new("new", beta), &data, |b, data| {
            b.iter(|| DataBatch::new(0, entry_size, black_box(data.clone()), HashAlg::Sha256))
        });
        let batch = DataBatch::new(0, entry_size, data, HashAlg::Sha256);
        group.bench_with_input(BenchmarkId::new("entries", beta), &batch, |b, batch| {
            b.iter(|| black_box(batch).entries().count())
        });
    }
    group.finish();
}

criterion_group!(benches, batch_hash);
criterion_main!(benches);
