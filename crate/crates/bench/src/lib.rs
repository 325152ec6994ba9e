//! Fixtures for the fusion benchmarks.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use semfuse_core::geometry::CameraIntrinsics;
use semfuse_core::ingest::synthetic::default_scene_spec;
use semfuse_core::ingest::FrameObservation;
use semfuse_core::semantic::{EmbeddingDictionary, RegionFeatureSet};

/// Rendered frames of the default synthetic scene, with their features.
pub struct SceneFixture {
    pub intrinsics: CameraIntrinsics,
    pub frames: Vec<FrameObservation>,
    pub features: Vec<RegionFeatureSet>,
}

pub fn scene_fixture(width: usize, height: usize, frames: usize) -> SceneFixture {
    let mut spec = default_scene_spec(width, height, 16);
    spec.orbit.frames = frames;
    let scene = spec.build().expect("default scene is valid");
    let (frames, features) = (0..frames)
        .map(|i| scene.render_frame(&spec.intrinsics, i, 0.25).expect("frame renders"))
        .unzip();
    SceneFixture {
        intrinsics: spec.intrinsics,
        frames,
        features,
    }
}

/// Uniform scores in [0, 1).
pub fn random_scores(rows: usize, cols: usize, seed: u64) -> DMatrix<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    DMatrix::from_fn(rows, cols, |_, _| rng.random::<f64>())
}

/// Unit vectors with components drawn from [-1, 1).
pub fn random_unit_vectors(count: usize, dim: usize, seed: u64) -> Vec<Vec<f32>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let v: Vec<f32> = (0..dim).map(|_| rng.random_range(-1.0f32..1.0)).collect();
            let n = v.iter().map(|x| x * x).sum::<f32>().sqrt().max(f32::MIN_POSITIVE);
            v.into_iter().map(|x| x / n).collect()
        })
        .collect()
}

pub fn random_dictionary(size: usize, dim: usize, seed: u64) -> EmbeddingDictionary {
    let mut dict = EmbeddingDictionary::with_dim(dim);
    for e in random_unit_vectors(size, dim, seed) {
        dict.insert(&e, 0).expect("dimension matches");
    }
    dict
}

/// Confidence map with values in [0, 1).
pub fn random_map(len: usize, seed: u64) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..len).map(|_| rng.random::<f32>()).collect()
}
