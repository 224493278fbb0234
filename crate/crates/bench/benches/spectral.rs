use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use nfm_core::{extend_spectrum, irfft, rfft, ExtensionFactors};
use std::hint::black_box;

fn signal(n: usize) -> Vec<f64> {
    (0..n).map(|t| (0.37 * t as f64).sin() + 0.5 * (0.011 * (t * t) as f64).cos()).collect()
}

fn transforms(c: &mut Criterion) {
    let mut group = c.benchmark_group("rfft");
    for n in [96, 720, 2000, 4096] {
        let x = signal(n);
        group.bench_with_input(BenchmarkId::from_parameter(n), &x, |b, x| b.iter(|| rfft(black_box(x))));
    }
    group.finish();

    let mut group = c.benchmark_group("irfft");
    for n in [96, 720, 2000] {
        let s = rfft(&signal(n)).unwrap();
        group.bench_with_input(BenchmarkId::from_parameter(n), &s, |b, s| b.iter(|| irfft(black_box(s))));
    }
    group.finish();

    let s = rfft(&signal(720)).unwrap();
    let f = ExtensionFactors::forecast(720, 96).unwrap();
    c.bench_function("extend_spectrum/720+96", |b| b.iter(|| extend_spectrum(black_box(&s), &f)));
}

criterion_group!(benches, transforms);
criterion_main!(benches);
