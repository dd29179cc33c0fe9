//! Manual probe for the big-batch scoring path (run with --ignored).

use std::time::Instant;

use privfilter_core::similarity::{batch_score_chunked, Pool, Query};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
#[ignore]
fn probe_pure_compute_scaling() {
    fn spin(n: u64) -> f64 {
        let mut x = 1.000000001f64;
        for _ in 0..n {
            x = x * x % 1.7 + 0.3;
        }
        x
    }
    use rayon::prelude::*;
    let work: Vec<u64> = (0..64).map(|_| 20_000_000u64).collect();
    let mut t1 = 0.0f64;
    for threads in [1usize, 2, 4] {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap();
        let start = Instant::now();
        let s: f64 = pool.install(|| work.par_iter().map(|&n| spin(n)).sum());
        let t = start.elapsed().as_secs_f64();
        if threads == 1 {
            t1 = t;
        }
        println!("threads={threads}: {t:.2}s (speedup {:.2}x, sum {s:.3})", t1 / t);
    }
}

#[test]
#[ignore]
fn probe_10k_by_10k() {
    let dim = 256;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let pool = Pool::build((0..10_000).map(|i| {
        let v: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        (format!("img{i:05}"), format!("pat{:04}", i % 500), v)
    }))
    .unwrap();
    let queries: Vec<Query> = (0..10_000)
        .map(|i| {
            let v: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
            Query::new(format!("q{i:05}"), v)
        })
        .collect();

    let single = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    let start = Instant::now();
    let a = single
        .install(|| batch_score_chunked(&queries, &pool, 64))
        .unwrap();
    let t1 = start.elapsed();

    for workers in [2usize, 4, 16] {
        let tp = rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build()
            .unwrap();
        let start = Instant::now();
        let b = tp
            .install(|| batch_score_chunked(&queries, &pool, 64))
            .unwrap();
        let t = start.elapsed();
        assert_eq!(a, b);
        println!(
            "workers={workers}: {:.2}s (speedup {:.2}x over {:.2}s)",
            t.as_secs_f64(),
            t1.as_secs_f64() / t.as_secs_f64(),
            t1.as_secs_f64()
        );
    }
}
