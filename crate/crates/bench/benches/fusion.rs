use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;

use semfuse_bench::{random_dictionary, random_map, random_scores, random_unit_vectors, scene_fixture};
use semfuse_core::query::{rank_regions, QuerySource, QueryVector};
use semfuse_core::semantic::assignment::solve_max_score;
use semfuse_core::semantic::{assign_scores, fuse_frame_semantics, soft_iou, EmbeddingDictionary, SemanticConfig};
use semfuse_core::tsdf::{extract_mesh, SparseVolume, VolumeConfig};

fn geometry(c: &mut Criterion) {
    let fx = scene_fixture(320, 240, 30);
    let mut vol = SparseVolume::new(VolumeConfig::with_voxel_size(0.02)).unwrap();
    for f in &fx.frames {
        vol.integrate_frame(f, &fx.intrinsics).unwrap();
    }
    let mut i = 0;
    c.bench_function("integrate_frame_320x240", |b| {
        b.iter(|| {
            i = (i + 1) % fx.frames.len();
            black_box(vol.integrate_frame(&fx.frames[i], &fx.intrinsics).unwrap())
        })
    });
    c.bench_function("extract_mesh", |b| b.iter(|| black_box(extract_mesh(&vol))));
}

fn semantics(c: &mut Criterion) {
    let fx = scene_fixture(320, 240, 30);
    let sem = SemanticConfig::default();
    let mut vol = SparseVolume::new(VolumeConfig::with_voxel_size(0.02)).unwrap();
    let mut dict = EmbeddingDictionary::new();
    let mut active = Vec::new();
    for (f, r) in fx.frames.iter().zip(&fx.features) {
        active.push(vol.integrate_frame(f, &fx.intrinsics).unwrap());
        fuse_frame_semantics(&mut vol, &mut dict, f, r, &fx.intrinsics, active.last().unwrap(), &sem).unwrap();
    }
    let mut i = 0;
    c.bench_function("fuse_frame_semantics_320x240", |b| {
        b.iter(|| {
            i = (i + 1) % fx.frames.len();
            let (f, r) = (&fx.frames[i], &fx.features[i]);
            black_box(fuse_frame_semantics(&mut vol, &mut dict, f, r, &fx.intrinsics, &active[i], &sem).unwrap())
        })
    });
}

fn matching(c: &mut Criterion) {
    let mut group = c.benchmark_group("assignment");
    for n in [8, 32, 128] {
        let scores = random_scores(n, n, n as u64);
        group.bench_with_input(BenchmarkId::new("solve_max_score", n), &scores, |b, s| {
            b.iter(|| black_box(solve_max_score(s).unwrap()))
        });
        group.bench_with_input(BenchmarkId::new("assign_scores", n), &scores, |b, s| {
            b.iter(|| black_box(assign_scores(s, 0.1).unwrap()))
        });
    }
    group.finish();
    let (a, m) = (random_map(80 * 60, 1), random_map(80 * 60, 2));
    c.bench_function("soft_iou_80x60", |b| b.iter(|| black_box(soft_iou(&a, &m).unwrap())));
}

fn query(c: &mut Criterion) {
    let mut group = c.benchmark_group("rank_regions");
    for size in [100, 10_000] {
        let dict = random_dictionary(size, 512, 7);
        let q = QueryVector::new(random_unit_vectors(1, 512, 8).remove(0), QuerySource::Raw).unwrap();
        group.bench_with_input(BenchmarkId::from_parameter(size), &dict, |b, d| {
            b.iter(|| black_box(rank_regions(d, &q, 5).unwrap()))
        });
    }
    group.finish();
}

criterion_group!(benches, geometry, semantics, matching, query);
criterion_main!(benches);
