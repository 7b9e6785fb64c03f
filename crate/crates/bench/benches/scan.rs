use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};

use clinix_core::harness::bench::scan_instance;
use clinix_core::ssm::{scan_with, DEFAULT_CHUNK};
use clinix_core::ScanMode;

fn scan(c: &mut Criterion) {
    let mut group = c.benchmark_group("selective_scan");
    for &(l, ch, n) in &[(256, 4, 16), (1024, 8, 16), (4096, 8, 16)] {
        let [x, abar, bbar, cm, d] = scan_instance(l, ch, n, 0).unwrap();
        group.throughput(Throughput::Elements((l * ch * n) as u64));
        for (label, mode) in [("sequential", ScanMode::Sequential), ("parallel", ScanMode::Parallel)] {
            group.bench_with_input(BenchmarkId::new(label, format!("{l}x{ch}x{n}")), &mode, |b, &mode| {
                b.iter(|| scan_with(&x, &abar, &bbar, &cm, &d, mode, DEFAULT_CHUNK).unwrap())
            });
        }
    }
    group.finish();
}

criterion_group!(benches, scan);
criterion_main!(benches);
