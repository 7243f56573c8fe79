use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use toplora::gradcheck::{random_instance, Variant};
use toplora::Adapter;

fn forward_backward(c: &mut Criterion) {
    let mut group = c.benchmark_group("adapter");
    for variant in [Variant::Lora, Variant::Full] {
        for rank in [4, 16] {
            let (adapter, x) = random_instance(variant, 64, 64, rank, 32, 7).unwrap();
            let y = adapter.forward(&x).unwrap();
            let id = format!("{}/r{rank}", variant.as_str());
            group.bench_with_input(BenchmarkId::new("forward", &id), &x, |b, x| {
                b.iter(|| adapter.forward(black_box(x)).unwrap())
            });
            group.bench_with_input(BenchmarkId::new("backward", &id), &x, |b, x| {
                b.iter(|| adapter.backward(black_box(x), black_box(&y)).unwrap())
            });
        }
    }
    group.finish();
}

criterion_group!(benches, forward_backward);
criterion_main!(benches);
