use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};
use qsync_core::correlator::{correlate_timestamps, find_peaks, Binning, DEFAULT_MIN_PROMINENCE};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

/// Two sorted streams with `n` paired events 43 ns apart plus uncorrelated singles.
fn streams(n: usize, seed: u64) -> (Vec<i64>, Vec<i64>) {
    let mut rng = StdRng::seed_from_u64(seed);
    let span_fs = n as i64 * 50_000_000;
    let mut t1 = Vec::with_capacity(2 * n);
    let mut t2 = Vec::with_capacity(2 * n);
    for _ in 0..n {
        let t = rng.random_range(0..span_fs);
        t1.push(t + 43_000_000 + rng.random_range(-300_000..300_000));
        t2.push(t);
        t1.push(rng.random_range(0..span_fs));
        t2.push(rng.random_range(0..span_fs));
    }
    t1.sort_unstable();
    t2.sort_unstable();
    (t1, t2)
}

fn bench_correlate(c: &mut Criterion) {
    let mut group = c.benchmark_group("correlate_timestamps");
    let binning = Binning::around(3.0, 43_000.0, 50_000.0).unwrap();
    for &n in &[10_000usize, 100_000, 1_000_000] {
        let (t1, t2) = streams(n, 7);
        group.throughput(Throughput::Elements((t1.len() + t2.len()) as u64));
        group.bench_with_input(BenchmarkId::from_parameter(n), &n, |b, _| {
            b.iter(|| correlate_timestamps(&t1, &t2, &binning).unwrap())
        });
    }
    group.finish();
}

fn bench_find_peaks(c: &mut Criterion) {
    let (t1, t2) = streams(200_000, 11);
    let binning = Binning::around(3.0, 43_000.0, 50_000.0).unwrap();
    let h = correlate_timestamps(&t1, &t2, &binning).unwrap();
    c.bench_function("find_peaks", |b| b.iter(|| find_peaks(&h, DEFAULT_MIN_PROMINENCE).unwrap()));
}

criterion_group!(benches, bench_correlate, bench_find_peaks);
criterion_main!(benches);
