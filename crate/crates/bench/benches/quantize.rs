use std::hint::black_box;

use coea_core::nn;
use coea_core::quantizer::residual_quantize;
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn bench(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut group = c.benchmark_group("residual_quantize");
    for (levels, size) in [(2, 8), (4, 16), (4, 64)] {
        let codebooks: Vec<Array2<f64>> = (0..levels).map(|_| nn::randn2(&mut rng, size, 32, 1.0)).collect();
        let z = nn::randn1(&mut rng, 32, 1.0);
        group.bench_with_input(BenchmarkId::from_parameter(format!("L{levels}xS{size}")), &z, |b, z| {
            b.iter(|| residual_quantize(black_box(z.view()), &codebooks))
        });
    }
    group.finish();
}

criterion_group!(benches, bench);
criterion_main!(benches);
