mod common;

use semfuse_core::geometry::{scale_intrinsics, Point3};
use semfuse_core::ingest::synthetic::{surface_distance, Shape};
use semfuse_core::semantic::{render_confidence_maps, soft_iou, EmbeddingDictionary, SemanticConfig};
use semfuse_core::tsdf::{extract_mesh, SparseVolume, VolumeConfig};

#[test]
fn fused_sphere_mesh_lies_on_the_surface() {
    let spec = common::sphere_plane_spec(160, 120, 24);
    let (frames, _) = common::render_all(&spec, 0.25);
    let mut vol = SparseVolume::new(VolumeConfig::with_voxel_size(0.02)).unwrap();
    for f in &frames {
        vol.integrate_frame(f, &spec.intrinsics).unwrap();
    }
    let mesh = extract_mesh(&vol);
    assert!(!mesh.is_empty());
    let shapes: Vec<&Shape> = spec.primitives.iter().map(|p| &p.shape).collect();
    let sq: f64 = mesh
        .vertices
        .iter()
        .map(|p| shapes.iter().map(|s| surface_distance(s, p)).fold(f64::INFINITY, f64::min).powi(2))
        .sum();
    let rms = (sq / mesh.vertices.len() as f64).sqrt();
    assert!(rms <= 0.01, "rms {rms}");
}

#[test]
fn rendered_regions_reproduce_the_input_masks() {
    // Fuse semantics for one view, then render the volume back from that view.
    let spec = common::sphere_plane_spec(160, 120, 8);
    let (frames, features) = common::render_all(&spec, 0.25);
    let k = spec.intrinsics;
    let sem = SemanticConfig::default();
    let mut vol = SparseVolume::new(VolumeConfig::with_voxel_size(0.02)).unwrap();
    let mut dict = EmbeddingDictionary::new();
    let mut last = Vec::new();
    for f in &frames {
        last = vol.integrate_frame(f, &k).unwrap();
        semantic_fuse(&mut vol, &mut dict, f, common::features_of(&features, f.frame_id), &k, &last, &sem);
    }
    let f = frames.last().unwrap();
    let k_map = scale_intrinsics(&k, 0.25).unwrap();
    let depth = f.depth.downsample(4);
    let rendered = render_confidence_maps(&vol, &depth, &k_map, &f.pose, &last, sem.occlusion_tolerance(vol.config())).unwrap();
    let input = common::features_of(&features, f.frame_id);
    assert_eq!(rendered.len(), 1);
    let binarize = |m: &[f32]| m.iter().map(|&c| if c > 0.5 { 1.0 } else { 0.0 }).collect::<Vec<f32>>();
    let iou = soft_iou(&binarize(rendered.map(0)), &binarize(input.map(0))).unwrap();
    assert!(iou >= 0.95, "iou {iou}");
}

fn semantic_fuse(
    vol: &mut SparseVolume,
    dict: &mut EmbeddingDictionary,
    f: &semfuse_core::FrameObservation,
    r: &semfuse_core::RegionFeatureSet,
    k: &semfuse_core::CameraIntrinsics,
    active: &[semfuse_core::BlockIndex],
    sem: &SemanticConfig,
) {
    semfuse_core::semantic::fuse_frame_semantics(vol, dict, f, r, k, active, sem).unwrap();
}

#[test]
fn background_plane_never_receives_semantics() {
    let spec = common::sphere_plane_spec(160, 120, 6);
    let (frames, features) = common::render_all(&spec, 0.25);
    let k = spec.intrinsics;
    let sem = SemanticConfig::default();
    let mut vol = SparseVolume::new(VolumeConfig::with_voxel_size(0.04)).unwrap();
    let mut dict = EmbeddingDictionary::new();
    for f in &frames {
        let active = vol.integrate_frame(f, &k).unwrap();
        semantic_fuse(&mut vol, &mut dict, f, common::features_of(&features, f.frame_id), &k, &active, &sem);
    }
    let Shape::Sphere { center, radius } = spec.primitives[1].shape else {
        unreachable!()
    };
    let sphere = Shape::Sphere { center, radius };
    let band = vol.config().semantic_band;
    for blk in vol.blocks() {
        for (i, v) in blk.voxels().iter().enumerate() {
            if v.has_semantics() {
                let p: Point3 = vol.voxel_position(blk.global_coord(i));
                // Labeled voxels sit near the sphere, within band plus one voxel of slack.
                assert!(surface_distance(&sphere, &p) <= band + 2.0 * vol.config().voxel_size, "{p}");
            }
        }
    }
    assert_eq!(dict.len(), 1);
}
