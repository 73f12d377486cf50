//! Same workloads on a one-thread pool and on the default pool.
//!
//! Build with `--no-default-features` to time the sequential code path
//! instead of a single-thread rayon pool.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::ThreadPoolBuilder;
use ridgeforge_core::appearance::{appearance_distance, AppearanceFilterConfig, ImageGrid};
use ridgeforge_core::autograd::{Conv2dSpec, Graph};
use ridgeforge_core::eval::{verification_scores, VerificationProtocol};
use ridgeforge_core::recognition::EmbeddingRecord;
use ridgeforge_core::tensor::Tensor;

fn conv_step(x: &Tensor, w: &Tensor) -> f64 {
    let g = Graph::new();
    let (xv, wv) = (g.leaf(x.clone()), g.leaf(w.clone()));
    let y = g.conv2d(xv, wv, Conv2dSpec::same(3));
    let loss = g.sum(g.square(y));
    let grads = g.backward(loss);
    grads.get(wv).map_or(0.0, |t| t.data()[0])
}

fn embeddings(n: usize, ids: usize, rng: &mut ChaCha8Rng) -> Vec<EmbeddingRecord> {
    (0..n)
        .map(|i| EmbeddingRecord {
            identity_label: format!("id{}", i % ids),
            impression_index: i / ids + 1,
            vector: (0..64).map(|_| rng.gen::<f64>() - 0.5).collect(),
        })
        .collect()
}

fn bench(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let x = Tensor::from_fn(&[8, 8, 32, 32], |_| rng.gen::<f64>());
    let w = Tensor::from_fn(&[8, 8, 3, 3], |_| rng.gen::<f64>() - 0.5);
    let records = embeddings(400, 80, &mut rng);
    let protocol = VerificationProtocol::default();
    let fcfg = AppearanceFilterConfig::for_resolution(32);
    let pairs: Vec<(ImageGrid, ImageGrid)> = (0..64)
        .map(|_| {
            let a = ImageGrid::from_fn(32, 32, |_, _| rng.gen());
            let b = ImageGrid::from_fn(32, 32, |_, _| rng.gen());
            (a, b)
        })
        .collect();

    let pools = [
        ("one_thread", ThreadPoolBuilder::new().num_threads(1).build().unwrap()),
        ("default", ThreadPoolBuilder::new().build().unwrap()),
    ];
    let mut group = c.benchmark_group("parallel");
    group.sample_size(20);
    for (name, pool) in &pools {
        group.bench_with_input(BenchmarkId::new("conv2d_fwd_bwd_b8_c8_32px", name), pool, |b, pool| {
            b.iter(|| pool.install(|| conv_step(&x, &w)))
        });
        group.bench_with_input(BenchmarkId::new("verification_scores_400", name), pool, |b, pool| {
            b.iter(|| pool.install(|| verification_scores(&records, &protocol).unwrap()))
        });
        group.bench_with_input(BenchmarkId::new("appearance_distance_64_pairs", name), pool, |b, pool| {
            b.iter(|| {
                pool.install(|| {
                    ridgeforge_core::par::map_slice(&pairs, |(a, b)| appearance_distance(a, b, &fcfg).unwrap())
                })
            })
        });
    }
    group.finish();
}

criterion_group!(benches, bench);
criterion_main!(benches);
