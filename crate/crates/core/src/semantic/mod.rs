//! Region-level semantic fusion.
//!
//! For a semantic frame: render the volume's existing regions into the
//! current view at map resolution, match them to the frame's regions by
//! soft-IoU assignment, then write the frame's confidences back into the
//! near-surface voxels and grow the embedding dictionary with any regions
//! that found no partner.

pub mod assignment;
mod dictionary;
mod features;
mod matching;
mod render;
mod update;

use serde::{Deserialize, Serialize};

pub use dictionary::{DictionaryEntry, EmbeddingDictionary, RegionKey};
pub use features::{feature_path, RegionFeatureSet, FEATURE_MAGIC, FEATURE_VERSION};
pub use matching::{assign_scores, match_regions, score_matrix, soft_iou, Assignment, MatchResult};
pub use render::{render_confidence_maps, RenderedRegions};
pub use update::{update_semantics, UpdateSummary};

use crate::error::{Error, Result};
use crate::geometry::{scale_intrinsics, CameraIntrinsics};
use crate::ingest::FrameObservation;
use crate::tsdf::{BlockIndex, SparseVolume, VolumeConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum EmbeddingMode {
    /// The first embedding seen for a region is kept.
    #[default]
    Frozen,
    /// Matched embeddings are folded into a renormalized running mean.
    RunningMean,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SemanticConfig {
    /// Matches with soft-IoU below this are discarded.
    pub match_threshold: f64,
    /// Feature-map resolution relative to the camera image.
    pub resolution_factor: f64,
    /// Confidence above which a map pixel belongs to a region.
    pub support_threshold: f32,
    /// Depth-test tolerance in meters; `None` means two voxels.
    #[serde(default)]
    pub occlusion_tolerance: Option<f64>,
    #[serde(default)]
    pub embedding_mode: EmbeddingMode,
}

impl Default for SemanticConfig {
    fn default() -> Self {
        Self {
            match_threshold: 0.10,
            resolution_factor: 0.25,
            support_threshold: 0.5,
            occlusion_tolerance: None,
            embedding_mode: EmbeddingMode::Frozen,
        }
    }
}

impl SemanticConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.match_threshold) {
            return Err(Error::invalid("match_threshold must lie in [0, 1]"));
        }
        if !(self.resolution_factor > 0.0 && self.resolution_factor <= 1.0) {
            return Err(Error::invalid("resolution_factor must lie in (0, 1]"));
        }
        let step = 1.0 / self.resolution_factor;
        if (step - step.round()).abs() > 1e-9 {
            return Err(Error::invalid("resolution_factor must be the reciprocal of an integer"));
        }
        Ok(())
    }

    pub fn occlusion_tolerance(&self, volume: &VolumeConfig) -> f64 {
        self.occlusion_tolerance.unwrap_or(2.0 * volume.voxel_size)
    }

    /// Integer pixel step between camera and map resolution.
    pub fn downsample_step(&self) -> usize {
        (1.0 / self.resolution_factor).round() as usize
    }
}

/// Outcome of the semantic lane for one frame.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct FrameSemantics {
    pub rendered_regions: usize,
    pub matched: usize,
    pub new_regions: usize,
    pub voxels_updated: usize,
}

/// Render, match and update for one frame whose geometry has already been
/// integrated into `volume` over the `active` blocks.
pub fn fuse_frame_semantics(
    volume: &mut SparseVolume,
    dict: &mut EmbeddingDictionary,
    frame: &FrameObservation,
    features: &RegionFeatureSet,
    k: &CameraIntrinsics,
    active: &[BlockIndex],
    config: &SemanticConfig,
) -> Result<FrameSemantics> {
    let k_map = scale_intrinsics(k, config.resolution_factor)?;
    if features.width() != k_map.width || features.height() != k_map.height {
        return Err(Error::invalid(format!(
            "features for frame {} are {}x{}, expected {}x{}",
            features.frame_id,
            features.width(),
            features.height(),
            k_map.width,
            k_map.height
        )));
    }
    if !dict.is_empty() && !features.is_empty() && features.dim() != dict.dim() {
        return Err(Error::invalid(format!(
            "feature dimension {} differs from dictionary dimension {}",
            features.dim(),
            dict.dim()
        )));
    }
    let depth_map = frame.depth.downsample(config.downsample_step());
    let tolerance = config.occlusion_tolerance(volume.config());
    let rendered = render_confidence_maps(volume, &depth_map, &k_map, &frame.pose, active, tolerance)?;
    let matches = match_regions(features, &rendered, config.match_threshold)?;
    let summary = update_semantics(
        volume, dict, features, &matches, &depth_map, &k_map, &frame.pose, active, config,
    )?;
    Ok(FrameSemantics {
        rendered_regions: rendered.len(),
        matched: matches.assignments.len(),
        new_regions: summary.new_keys.len(),
        voxels_updated: summary.voxels_updated,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{DepthImage, Point3, Pose};
    use crate::tsdf::VolumeConfig;

    fn k_map() -> CameraIntrinsics {
        CameraIntrinsics::new(40.0, 40.0, 8.0, 6.0, 16, 12).unwrap()
    }

    fn volume() -> SparseVolume {
        SparseVolume::new(VolumeConfig::with_voxel_size(0.05)).unwrap()
    }

    fn put(vol: &mut SparseVolume, p: Point3, key: u32, conf: f32, tsdf: f32) -> BlockIndex {
        let c = vol.nearest_voxel(&p);
        let (b, _) = vol.split_coord(c);
        vol.ensure_block(b);
        let v = vol.voxel_mut(c).unwrap();
        v.weight = 1.0;
        v.tsdf = tsdf;
        v.semantic_key = Some(RegionKey(key));
        v.confidence = conf;
        v.semantic_weight = 1.0;
        b
    }

    #[test]
    fn no_semantic_voxels_renders_nothing() {
        let mut vol = volume();
        let b = BlockIndex::new(0, 0, 2);
        vol.ensure_block(b);
        let depth = DepthImage::new(16, 12, vec![1.0; 192]).unwrap();
        let r = render_confidence_maps(&vol, &depth, &k_map(), &Pose::identity(), &[b], 0.1).unwrap();
        assert!(r.is_empty());
    }

    #[test]
    fn principal_ray_voxel_renders_one_pixel() {
        let mut vol = volume();
        let b = put(&mut vol, Point3::new(0.0, 0.0, 1.0), 4, 0.75, 0.0);
        let depth = DepthImage::new(16, 12, vec![1.0; 192]).unwrap();
        let r = render_confidence_maps(&vol, &depth, &k_map(), &Pose::identity(), &[b], 0.1).unwrap();
        assert_eq!(r.keys(), &[RegionKey(4)]);
        let map = r.map(0);
        for (p, &c) in map.iter().enumerate() {
            if p == 6 * 16 + 8 {
                assert_eq!(c, 0.75);
            } else {
                assert_eq!(c, 0.0);
            }
        }
    }

    #[test]
    fn nearest_surface_voxel_wins() {
        let mut vol = volume();
        // Along the principal ray: z = 1.0 and z = 1.05 project to one pixel.
        let b = put(&mut vol, Point3::new(0.0, 0.0, 1.0), 1, 0.9, 0.04);
        put(&mut vol, Point3::new(0.0, 0.0, 1.05), 1, 0.3, 0.01);
        let depth = DepthImage::new(16, 12, vec![1.02; 192]).unwrap();
        let r = render_confidence_maps(&vol, &depth, &k_map(), &Pose::identity(), &[b], 0.1).unwrap();
        assert_eq!(r.map(0)[6 * 16 + 8], 0.3);
    }

    #[test]
    fn occluded_voxel_is_not_rendered() {
        let mut vol = volume();
        let b = put(&mut vol, Point3::new(0.0, 0.0, 1.0), 1, 0.9, 0.0);
        let depth = DepthImage::new(16, 12, vec![0.7; 192]).unwrap();
        let r = render_confidence_maps(&vol, &depth, &k_map(), &Pose::identity(), &[b], 0.1).unwrap();
        assert!(r.is_empty());
    }

    #[test]
    fn render_rejects_resolution_mismatch() {
        let vol = volume();
        let depth = DepthImage::zeros(32, 24);
        assert!(matches!(
            render_confidence_maps(&vol, &depth, &k_map(), &Pose::identity(), &[], 0.1),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn config_validation() {
        SemanticConfig::default().validate().unwrap();
        assert_eq!(SemanticConfig::default().downsample_step(), 4);
        let bad = SemanticConfig {
            resolution_factor: 0.3,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = SemanticConfig {
            match_threshold: 1.5,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }
}
