use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use herdid::cluster::{embed_all, kmeans};
use herdid::head::ProjectionHead;
use herdid::objective::{build_mask_with, similarity};
use herdid::simulate::{generate_with, SimConfig};
use herdid::{seed, Exec};
use ndarray::Array2;
use rand::Rng;

const POLICIES: [(&str, Exec); 2] = [("sequential", Exec::Sequential), ("parallel", Exec::Parallel)];

fn sim_config() -> SimConfig {
    SimConfig { n_frames: 200, seed: 1, ..SimConfig::default() }
}

fn bench_simulate(c: &mut Criterion) {
    let mut group = c.benchmark_group("simulate");
    group.sample_size(10);
    let config = sim_config();
    for (name, exec) in POLICIES {
        group.bench_function(BenchmarkId::from_parameter(name), |b| b.iter(|| generate_with(&config, exec).unwrap()));
    }
    group.finish();
}

fn bench_embed(c: &mut Criterion) {
    let mut group = c.benchmark_group("embed_all");
    group.sample_size(10);
    let data = generate_with(&sim_config(), Exec::default()).unwrap();
    let head = ProjectionHead::<f32>::init(data.dim(), 2).unwrap();
    for (name, exec) in POLICIES {
        group.bench_function(BenchmarkId::from_parameter(name), |b| b.iter(|| embed_all(&data, &head, exec).unwrap()));
    }
    group.finish();
}

fn bench_mask(c: &mut Criterion) {
    let mut group = c.benchmark_group("build_mask");
    let frames = vec![10usize; 8];
    let n = 2 * frames.iter().sum::<usize>();
    let mut rng = seed::rng(3);
    let features = Array2::from_shape_simple_fn((n, 64), || rng.random_range(-1.0f64..1.0));
    let sim = similarity(features.view()).unwrap();
    for (name, exec) in POLICIES {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| build_mask_with(sim.values.view(), &frames, exec).unwrap())
        });
    }
    group.finish();
}

fn bench_kmeans(c: &mut Criterion) {
    let mut group = c.benchmark_group("kmeans");
    group.sample_size(10);
    let mut rng = seed::rng(4);
    let points = Array2::from_shape_simple_fn((2000, 64), || rng.random_range(-1.0f64..1.0));
    for (name, exec) in POLICIES {
        group.bench_function(BenchmarkId::from_parameter(name), |b| b.iter(|| kmeans(points.view(), 10, 5, 10, exec).unwrap()));
    }
    group.finish();
}

criterion_group!(benches, bench_simulate, bench_embed, bench_mask, bench_kmeans);
criterion_main!(benches);
