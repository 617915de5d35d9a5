use std::hint::black_box;

use coea_core::encoder::CsaLayer;
use coea_core::nn;
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn bench(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut group = c.benchmark_group("csa_forward");
    for (d, heads, len) in [(32, 2, 20), (128, 4, 50), (128, 4, 200)] {
        let layer = CsaLayer::new(d, heads, &mut rng).unwrap();
        let x = nn::randn2(&mut rng, len, d, 1.0);
        group.bench_with_input(BenchmarkId::from_parameter(format!("d{d}h{heads}n{len}")), &x, |b, x| {
            b.iter(|| layer.forward(black_box(x)).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, bench);
criterion_main!(benches);
