mod common;

use semfuse_core::ingest::load_sequence;
use semfuse_core::ingest::synthetic::{default_scene_spec, write_sequence, SceneSpec};
use semfuse_core::io::{load_snapshot, save_snapshot};
use semfuse_core::pipeline::{
    run_frames, run_reconstruction, FeatureDir, FeatureMap, NoFeatures, PipelineConfig, Reconstruction, WorkerMode,
};
use semfuse_core::query::{rank_regions, QuerySource, QueryVector};
use semfuse_core::tsdf::{SparseVolume, VolumeConfig};
use semfuse_core::Error;

fn small_spec(frames: usize) -> SceneSpec {
    let mut spec = default_scene_spec(96, 72, 8);
    spec.orbit.frames = frames;
    spec
}

fn config(semantic_every: usize, mode: WorkerMode) -> PipelineConfig {
    PipelineConfig {
        volume: VolumeConfig::with_voxel_size(0.04),
        semantic_every,
        worker_mode: mode,
        ..Default::default()
    }
}

fn run(spec: &SceneSpec, cfg: &PipelineConfig) -> Reconstruction {
    let (frames, mut features) = common::render_all(spec, 0.25);
    run_frames(cfg, &spec.intrinsics, frames.into_iter().map(Ok), &mut features).unwrap()
}

fn geometry_equal(a: &SparseVolume, b: &SparseVolume) -> bool {
    a.sorted_indices() == b.sorted_indices()
        && a.sorted_indices().iter().all(|i| {
            a.block(i).unwrap().voxels().iter().zip(b.block(i).unwrap().voxels()).all(|(x, y)| {
                x.tsdf.to_bits() == y.tsdf.to_bits()
                    && x.weight.to_bits() == y.weight.to_bits()
                    && x.rgb.map(f32::to_bits) == y.rgb.map(f32::to_bits)
            })
        })
}

fn volumes_identical(a: &SparseVolume, b: &SparseVolume) -> bool {
    a.sorted_indices() == b.sorted_indices()
        && a.sorted_indices().iter().all(|i| a.block(i).unwrap().voxels() == b.block(i).unwrap().voxels())
}

#[test]
fn single_worker_runs_are_bit_identical() {
    let spec = small_spec(18);
    let cfg = config(3, WorkerMode::Single);
    let a = run(&spec, &cfg);
    let b = run(&spec, &cfg);
    assert!(volumes_identical(&a.volume, &b.volume));
    assert_eq!(a.dictionary, b.dictionary);
    assert_eq!(a.report.without_timing(), b.report.without_timing());
}

#[test]
fn two_lane_matches_single_worker() {
    let spec = small_spec(18);
    let single = run(&spec, &config(2, WorkerMode::Single));
    let two = run(&spec, &config(2, WorkerMode::TwoLane));
    assert!(volumes_identical(&single.volume, &two.volume));
    assert_eq!(single.dictionary, two.dictionary);
    assert_eq!(single.report.semantic_frames, two.report.semantic_frames);
    assert_eq!(single.report.new_regions, two.report.new_regions);
    assert_eq!(single.report.matched_regions, two.report.matched_regions);
    assert!(!single.dictionary.is_empty());
}

#[test]
fn semantics_never_change_geometry() {
    let spec = small_spec(12);
    let off = run(&spec, &config(0, WorkerMode::Single));
    let on = run(&spec, &config(1, WorkerMode::Single));
    assert!(off.dictionary.is_empty());
    assert_eq!(off.report.semantic_frames, 0);
    assert!(geometry_equal(&off.volume, &on.volume));
    let two = run(&spec, &config(1, WorkerMode::TwoLane));
    assert!(geometry_equal(&off.volume, &two.volume));
}

#[test]
fn decimated_semantics_find_every_object() {
    let spec = small_spec(24);
    let every1 = run(&spec, &config(1, WorkerMode::Single));
    let every2 = run(&spec, &config(2, WorkerMode::Single));
    assert_eq!(every1.dictionary.len(), every2.dictionary.len());
    assert_eq!(every1.dictionary.len(), 3);
}

#[test]
fn single_frame_sequence() {
    let spec = small_spec(1);
    let r = run(&spec, &config(3, WorkerMode::Single));
    assert!(!r.volume.is_empty());
    assert_eq!(r.report.frames, 1);
    assert!(r.report.geometric_fps > 0.0);
}

#[test]
fn missing_features_skip_or_fail() {
    let spec = small_spec(6);
    let (frames, _) = common::render_all(&spec, 0.25);
    let cfg = config(1, WorkerMode::Single);
    let r = run_frames(&cfg, &spec.intrinsics, frames.clone().into_iter().map(Ok), &mut NoFeatures).unwrap();
    assert_eq!(r.report.skipped_semantic_frames, 6);
    assert!(r.dictionary.is_empty());
    let strict = PipelineConfig {
        fail_on_missing_features: true,
        ..cfg.clone()
    };
    for mode in [WorkerMode::Single, WorkerMode::TwoLane] {
        let strict = PipelineConfig {
            worker_mode: mode,
            ..strict.clone()
        };
        let err = run_frames(&strict, &spec.intrinsics, frames.clone().into_iter().map(Ok), &mut FeatureMap::default());
        assert!(matches!(err, Err(Error::NotFound(_))), "{mode:?}");
    }
}

#[test]
fn synthetic_directory_round_trip_and_self_query() {
    let dir = tempfile::tempdir().unwrap();
    let spec = small_spec(9);
    let cfg = config(3, WorkerMode::Single);
    let paths = write_sequence(dir.path(), &spec, &cfg.volume, 0.25).unwrap();
    let manifest = load_sequence(&paths.manifest).unwrap();
    assert_eq!(manifest.len(), 9);
    let from_disk = run_reconstruction(&cfg, &manifest, &mut FeatureDir(paths.features.clone())).unwrap();
    let in_memory = run(&spec, &cfg);
    // Color is quantized to 8 bits on disk, so compare distances and weights.
    for i in in_memory.volume.sorted_indices() {
        let a = in_memory.volume.block(&i).unwrap().voxels();
        let b = from_disk.volume.block(&i).unwrap().voxels();
        assert!(a.iter().zip(b).all(|(x, y)| x.tsdf == y.tsdf && x.weight == y.weight));
    }
    assert_eq!(in_memory.dictionary, from_disk.dictionary);

    let state = dir.path().join("state");
    save_snapshot(&state, &from_disk.volume, &from_disk.dictionary).unwrap();
    let (volume, dict) = load_snapshot(&state).unwrap();
    assert!(volumes_identical(&volume, &from_disk.volume));
    for e in dict.iter() {
        let q = QueryVector::new(e.embedding.to_vec(), QuerySource::Raw).unwrap();
        assert_eq!(rank_regions(&dict, &q, 1).unwrap()[0].key, e.key);
    }
}
