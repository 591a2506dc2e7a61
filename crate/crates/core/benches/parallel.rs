use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};
use tensorvault::bitdist::mc_expected_distance;
use tensorvault::cdc::{dedup_chunks, ChunkParams};
use tensorvault::pool::DedupSession;
use tensorvault::synth;
use tensorvault::{bitx, par, DType};

fn thread_counts() -> Vec<usize> {
    let all = std::thread::available_parallelism().map_or(1, |n| n.get());
    if all > 1 {
        vec![1, all]
    } else {
        vec![1]
    }
}

fn monte_carlo(c: &mut Criterion) {
    let mut g = c.benchmark_group("mc_expected_distance");
    g.sample_size(10);
    g.throughput(Throughput::Elements(1_000_000));
    for t in thread_counts() {
        g.bench_with_input(BenchmarkId::from_parameter(t), &t, |b, &t| {
            b.iter(|| par::with_threads(t, || mc_expected_distance(0.03, 0.002, 1_000_000, &DType::BF16, 0).unwrap()))
        });
    }
    g.finish();
}

fn bitx_encode(c: &mut Criterion) {
    let base = synth::gaussian_bytes(&DType::BF16, 4 << 20, 0.03, 1).unwrap();
    let fine = synth::perturb_bytes(&DType::BF16, &base, 0.001, 2).unwrap();
    let mut g = c.benchmark_group("bitx_encode");
    g.sample_size(10);
    g.throughput(Throughput::Bytes(fine.len() as u64));
    for t in thread_counts() {
        g.bench_with_input(BenchmarkId::from_parameter(t), &t, |b, &t| {
            b.iter(|| par::with_threads(t, || bitx::bitx_encode(&fine, &base, 3).unwrap()))
        });
    }
    g.finish();
}

fn corpus() -> (Vec<tensorvault::ParsedModelFile>, Vec<Vec<u8>>) {
    let layout = synth::transformer_layout(4, 256, 4096, DType::BF16);
    let models = synth::family(&layout, 0.03, 0.001, 3, 7).unwrap();
    let parsed: Vec<_> = models.iter().map(|m| m.parsed()).collect();
    let raw = models.iter().map(|m| m.to_bytes()).collect();
    (parsed, raw)
}

fn tensor_hashing(c: &mut Criterion) {
    let (parsed, raw) = corpus();
    let bytes: u64 = raw.iter().map(|r| r.len() as u64).sum();
    let mut g = c.benchmark_group("tensor_dedup");
    g.sample_size(10);
    g.throughput(Throughput::Bytes(bytes));
    for t in thread_counts() {
        g.bench_with_input(BenchmarkId::from_parameter(t), &t, |b, &t| {
            b.iter(|| {
                par::with_threads(t, || {
                    let mut s = DedupSession::new();
                    for f in &parsed {
                        s.dedup_tensors(f).unwrap();
                    }
                    s.tensor_report()
                })
            })
        });
    }
    g.finish();
}

fn tensor_vs_chunk(c: &mut Criterion) {
    let (parsed, raw) = corpus();
    let bytes: u64 = raw.iter().map(|r| r.len() as u64).sum();
    let mut g = c.benchmark_group("dedup_granularity");
    g.sample_size(10);
    g.throughput(Throughput::Bytes(bytes));
    g.bench_function("tensor", |b| {
        b.iter(|| {
            let mut s = DedupSession::new();
            for f in &parsed {
                s.dedup_tensors(f).unwrap();
            }
            s.tensor_report()
        })
    });
    g.bench_function("chunk", |b| b.iter(|| dedup_chunks(&raw, &ChunkParams::default()).unwrap()));
    g.finish();
}

criterion_group!(benches, monte_carlo, bitx_encode, tensor_hashing, tensor_vs_chunk);
criterion_main!(benches);
