use std::hint::black_box;
use std::time::Duration;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use privfilter_core::calibration::tau_from_scores;
use privfilter_core::similarity::{batch_score_chunked, pearson, Pool, Query};

fn random_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

fn bench_pearson(c: &mut Criterion) {
    let mut group = c.benchmark_group("pearson");
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for n in [16usize, 64, 256, 1024] {
        let x = random_vec(&mut rng, n);
        let y = random_vec(&mut rng, n);
        group.throughput(Throughput::Elements(n as u64));
        group.bench_with_input(BenchmarkId::from_parameter(n), &n, |b, _| {
            b.iter(|| pearson(black_box(&x), black_box(&y)).unwrap())
        });
    }
    group.finish();
}

fn bench_batch_score(c: &mut Criterion) {
    let mut group = c.benchmark_group("batch_score");
    group.measurement_time(Duration::from_secs(10));
    group.sample_size(10);
    let dim = 256;
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let pool = Pool::build((0..2000).map(|i| {
        (
            format!("img{i:05}"),
            format!("pat{:03}", i % 100),
            random_vec(&mut rng, dim),
        )
    }))
    .unwrap();
    let queries: Vec<Query> = (0..1000)
        .map(|i| Query::new(format!("q{i:04}"), random_vec(&mut rng, dim)))
        .collect();
    group.throughput(Throughput::Elements((queries.len() * pool.len()) as u64));
    for chunk in [1usize, 16, 64, 256] {
        group.bench_with_input(
            BenchmarkId::new("chunk", chunk),
            &chunk,
            |b, &chunk| b.iter(|| batch_score_chunked(black_box(&queries), &pool, chunk).unwrap()),
        );
    }
    group.finish();
}

fn bench_calibration(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let scores: Vec<f64> = (0..100_000).map(|_| rng.random_range(-1.0..1.0)).collect();
    c.bench_function("tau_from_scores/100k", |b| {
        b.iter(|| tau_from_scores(black_box(&scores), 95.0).unwrap())
    });
}

criterion_group!(benches, bench_pearson, bench_batch_score, bench_calibration);
criterion_main!(benches);
