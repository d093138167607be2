use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::ThreadPoolBuilder;

use spike_sparse::matrix::Matrix;
use spike_sparse::network::{Network, NetworkSpec, Variant};
use spike_sparse::selftest::{random_tensor, random_weights};
use spike_sparse::sparse_conv::{ssc_backward, ssc_forward};
use spike_sparse::sparse_core::{build_rulebook, ConvMode};
use spike_sparse::trainer::{batch_gradients, make_toy_dataset, prepare_samples, Sample};
use spike_sparse::voxelizer::VoxelConfig;

fn pools() -> Vec<(&'static str, rayon::ThreadPool)> {
    let cores = std::thread::available_parallelism().map_or(1, |n| n.get());
    vec![
        ("sequential", ThreadPoolBuilder::new().num_threads(1).build().unwrap()),
        ("rayon", ThreadPoolBuilder::new().num_threads(cores).build().unwrap()),
    ]
}

fn conv(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let t = random_tensor(&mut rng, 32, 32, 0.1, Some(4));
    let w = random_weights(&mut rng, [3, 3, 3], 32, 32);
    let rb = build_rulebook(&t, [3, 3, 3], [1, 1, 1], ConvMode::Submanifold).unwrap();
    let g = Matrix::filled(rb.num_outputs(), 32, 0.01);

    let mut group = c.benchmark_group("ssc_3x3x3_32ch");
    group.sample_size(20);
    for (name, pool) in pools() {
        group.bench_function(BenchmarkId::new("forward", name), |b| {
            pool.install(|| b.iter(|| ssc_forward(&t, &w, &rb).unwrap()))
        });
        group.bench_function(BenchmarkId::new("backward", name), |b| {
            pool.install(|| b.iter(|| ssc_backward(&g, &t, &w, &rb).unwrap()))
        });
    }
    group.finish();
}

fn batch(c: &mut Criterion) {
    let net = Network::new(NetworkSpec::variant(Variant::T, 3, 4), 0).unwrap();
    let data = make_toy_dataset(0, 4);
    let samples = prepare_samples(&net, &data, &VoxelConfig::modelnet()).unwrap();
    let refs: Vec<&Sample> = samples.iter().collect();

    let mut group = c.benchmark_group("train_batch_16");
    group.sample_size(10);
    for (name, pool) in pools() {
        group.bench_function(name, |b| pool.install(|| b.iter(|| batch_gradients(&net, &refs).unwrap())));
    }
    group.finish();
}

criterion_group!(benches, conv, batch);
criterion_main!(benches);
