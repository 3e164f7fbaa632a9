use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;

use cluseg_bench::{blob_coords, scene_cloud};
use cluseg_core::backbone::{backbone_forward, ensure_params, BackboneConfig, Binder};
use cluseg_core::cluster::dbscan;
use cluseg_core::pointcloud::voxel_downsample;
use cluseg_core::spatial::KdTree3;
use cluseg_core::tensor::{ParamStore, Tape, Tensor};

fn bench_dbscan(c: &mut Criterion) {
    let mut group = c.benchmark_group("dbscan");
    for &n in &[1000usize, 4000] {
        let coords = blob_coords(n / 250, 250, 7);
        group.bench_with_input(BenchmarkId::from_parameter(n), &coords, |b, coords| {
            b.iter(|| dbscan(black_box(coords), 0.7, 10).unwrap())
        });
    }
    group.finish();
}

fn bench_voxel_downsample(c: &mut Criterion) {
    let cloud = scene_cloud(20_000, 3);
    c.bench_function("voxel_downsample_20k", |b| {
        b.iter(|| voxel_downsample(black_box(&cloud), 0.1).unwrap())
    });
}

fn bench_knn(c: &mut Criterion) {
    let cloud = scene_cloud(8_000, 5);
    let coords: Vec<[f64; 3]> = cloud.points.iter().map(|p| p.coords()).collect();
    c.bench_function("kdtree_build_query_8k", |b| {
        b.iter(|| {
            let tree = KdTree3::build(black_box(&coords));
            let mut acc = 0usize;
            for p in coords.iter().step_by(8) {
                acc += tree.knn(*p, 8).len();
            }
            acc
        })
    });
}

fn bench_conv2d(c: &mut Criterion) {
    let tape = Tape::new();
    let grid = tape.leaf(Tensor::new(vec![48, 48, 32], vec![0.3; 48 * 48 * 32]).unwrap());
    let kernel = tape.leaf(Tensor::new(vec![3, 3, 32, 32], vec![0.01; 9 * 32 * 32]).unwrap());
    let bias = tape.leaf(Tensor::zeros(vec![32]));
    c.bench_function("conv2d_48x48x32", |b| {
        b.iter(|| {
            grid.conv2d(black_box(&kernel), black_box(&bias))
                .unwrap()
                .value()
        })
    });
}

fn bench_backbone(c: &mut Criterion) {
    let cfg = BackboneConfig {
        d: 32,
        layers: 6,
        knn_k: 8,
        rho: 1.0,
        max_grid: 64,
    };
    let mut store = ParamStore::new(1);
    ensure_params(&mut store, &cfg).unwrap();
    let cloud = scene_cloud(3000, 11);
    c.bench_function("backbone_forward_3k", |b| {
        b.iter(|| {
            let tape = Tape::new();
            let binder = Binder::new(&tape, &store);
            backbone_forward(&binder, black_box(&cloud), &cfg)
                .unwrap()
                .value()
        })
    });
}

criterion_group!(
    benches,
    bench_dbscan,
    bench_voxel_downsample,
    bench_knn,
    bench_conv2d,
    bench_backbone
);
criterion_main!(benches);
