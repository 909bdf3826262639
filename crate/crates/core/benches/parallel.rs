//! Data-parallel kernels on the default rayon pool versus a one-thread pool.
//!
//! Build with `--no-default-features` to time the plain sequential loops instead.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use toothmatch::encoder::{
    attentive_aggregate, build_knn, encode, EncoderWeights, KnnBasis, DEFAULT_K,
};
use toothmatch::fhm::{fhm_match, MatchConfig};
use toothmatch::mesh::{compute_geometry, scene_frame};
use toothmatch::projection::{bilinear_sample, project_occlusal, rescale_coords, DEFAULT_MARGIN};
use toothmatch::synthgen::{
    generate_arch, perfect_prediction, synth_embedding_grid, ArchSpec, EmbeddingMode,
};
use toothmatch::{Jaw, Matrix};

fn pools() -> Vec<(&'static str, rayon::ThreadPool)> {
    vec![
        ("pool", rayon::ThreadPoolBuilder::new().build().unwrap()),
        (
            "one_thread",
            rayon::ThreadPoolBuilder::new()
                .num_threads(1)
                .build()
                .unwrap(),
        ),
    ]
}

fn kernels(c: &mut Criterion) {
    let spec = ArchSpec {
        gingiva_faces: 3720,
        ..ArchSpec::full(Jaw::Upper, 1)
    };
    let (mesh, gt) = generate_arch(&spec).unwrap();
    let geom = compute_geometry(&mesh).unwrap();
    let scene = scene_frame(&mesh).unwrap();
    let cmap = project_occlusal(&geom, (1024, 1024), DEFAULT_MARGIN).unwrap();
    let grid = synth_embedding_grid(
        &mesh,
        &cmap,
        (64, 64),
        64,
        EmbeddingMode::LabelOnehotSmoothed { sigma: 1.5 },
    )
    .unwrap();
    let grid_coords = rescale_coords(&cmap, (64, 64)).unwrap();
    let weights = EncoderWeights::seeded(3, 64);
    let graph = build_knn(&geom, DEFAULT_K, KnnBasis::Coordinates).unwrap();
    let features =
        Matrix::random_uniform(12, mesh.num_faces(), 1.0, &mut ChaCha8Rng::seed_from_u64(4));
    let pred = perfect_prediction(&gt, &geom, &cmap).unwrap();
    let cfg = MatchConfig::default();

    let m = mesh.num_faces();
    let mut group = c.benchmark_group("kernels");
    group.sample_size(10);
    for (name, pool) in pools() {
        group.bench_function(BenchmarkId::new("knn", format!("{name}/{m}")), |b| {
            b.iter(|| pool.install(|| build_knn(&geom, DEFAULT_K, KnnBasis::Coordinates).unwrap()))
        });
        group.bench_function(BenchmarkId::new("aggregate", format!("{name}/{m}")), |b| {
            b.iter(|| {
                pool.install(|| {
                    attentive_aggregate(&features, &graph, &weights.coord.stages[0]).unwrap()
                })
            })
        });
        group.bench_function(BenchmarkId::new("bilinear", format!("{name}/{m}")), |b| {
            b.iter(|| pool.install(|| bilinear_sample(&grid, &grid_coords).unwrap()))
        });
        group.bench_function(BenchmarkId::new("encode", format!("{name}/{m}")), |b| {
            b.iter(|| pool.install(|| encode(&mesh, &geom, &weights, DEFAULT_K).unwrap()))
        });
        group.bench_function(BenchmarkId::new("match", format!("{name}/{m}")), |b| {
            b.iter(|| pool.install(|| fhm_match(&pred, &gt, &scene, &cfg).unwrap()))
        });
    }
    group.finish();
}

criterion_group!(benches, kernels);
criterion_main!(benches);
