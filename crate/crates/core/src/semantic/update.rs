use super::{EmbeddingDictionary, EmbeddingMode, MatchResult, RegionFeatureSet, RegionKey, SemanticConfig};
use crate::error::{Error, Result};
use crate::geometry::{CameraIntrinsics, DepthImage, Point3, Pose};
use crate::tsdf::{project_cam, BlockIndex, SparseVolume, Voxel};

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct UpdateSummary {
    /// Keys created for unmatched frame regions, in frame-region order.
    pub new_keys: Vec<RegionKey>,
    /// Key written for each frame region.
    pub region_keys: Vec<RegionKey>,
    /// Voxels whose semantic fields changed.
    pub voxels_updated: usize,
}

/// Writes this frame's regions into the dictionary and the near-surface
/// voxels of the active blocks.
///
/// Unmatched regions get fresh keys; matched regions reuse the rendered
/// region's key and only bump its observation count. Every near-surface
/// voxel whose projection falls in a region's support (confidence above
/// `support_threshold`, picking the most confident region) has its
/// confidence averaged in. A voxel already holding a different key switches
/// only when the incoming confidence beats the stored one.
#[allow(clippy::too_many_arguments)]
pub fn update_semantics(
    volume: &mut SparseVolume,
    dict: &mut EmbeddingDictionary,
    current: &RegionFeatureSet,
    matches: &MatchResult,
    depth_map: &DepthImage,
    k_map: &CameraIntrinsics,
    pose: &Pose,
    active: &[BlockIndex],
    config: &SemanticConfig,
) -> Result<UpdateSummary> {
    let n = current.len();
    for a in &matches.assignments {
        if a.frame_region >= n || a.rendered_region >= matches.rendered_keys.len() {
            return Err(Error::invalid(format!(
                "assignment ({}, {}) out of range for {} frame and {} rendered regions",
                a.frame_region,
                a.rendered_region,
                n,
                matches.rendered_keys.len()
            )));
        }
        if !dict.contains(matches.key_of(a)) {
            return Err(Error::NotFound(format!("rendered key {}", matches.key_of(a))));
        }
    }
    if let Some(&i) = matches.unmatched_frame_regions.iter().find(|&&i| i >= n) {
        return Err(Error::invalid(format!("unmatched region {i} out of range ({n} regions)")));
    }
    if current.width() != k_map.width || current.height() != k_map.height || !depth_map.matches(k_map) {
        return Err(Error::invalid("feature maps, depth and map intrinsics differ in resolution"));
    }

    let mut summary = UpdateSummary::default();
    let mut region_keys: Vec<Option<RegionKey>> = vec![None; n];
    for a in &matches.assignments {
        let key = matches.key_of(a);
        if config.embedding_mode == EmbeddingMode::RunningMean {
            dict.blend(key, current.embedding(a.frame_region))?;
        }
        dict.record_observation(key)?;
        region_keys[a.frame_region] = Some(key);
    }
    for &i in &matches.unmatched_frame_regions {
        let key = dict.insert(current.embedding(i), current.frame_id)?;
        summary.new_keys.push(key);
        region_keys[i] = Some(key);
    }
    // Regions in neither list (should not happen for solver output) are skipped.

    let band = volume.config().semantic_band;
    let tolerance = config.occlusion_tolerance(volume.config());
    let kmat = k_map.matrix();
    let width = k_map.width;
    let c_min = config.support_threshold;

    let voxel_size = volume.config().voxel_size;
    for index in active {
        let Some(block) = volume.block_mut(index) else {
            continue;
        };
        for linear in 0..block.voxels().len() {
            let vx = &block.voxels()[linear];
            if !vx.is_observed() || (vx.tsdf as f64).abs() > band {
                continue;
            }
            let g = block.global_coord(linear);
            let world = Point3::new(g[0] as f64 * voxel_size, g[1] as f64 * voxel_size, g[2] as f64 * voxel_size);
            let Some((u, v, z)) = project_cam(&kmat, k_map, &pose.world_to_camera(&world)) else {
                continue;
            };
            let observed = depth_map.get(u, v) as f64;
            if observed <= 0.0 || (z - observed).abs() > tolerance {
                continue;
            }
            let p = v * width + u;
            let mut best: Option<(usize, f32)> = None;
            for i in 0..n {
                let c = current.map(i)[p];
                if c > c_min && best.is_none_or(|(_, bc)| c > bc) {
                    best = Some((i, c));
                }
            }
            let Some((key, conf)) = best.and_then(|(i, c)| region_keys[i].map(|k| (k, c))) else {
                continue;
            };
            if apply_observation(&mut block.voxels_mut()[linear], key, conf) {
                summary.voxels_updated += 1;
            }
        }
    }
    summary.region_keys = region_keys.into_iter().flatten().collect();
    Ok(summary)
}

/// Returns whether the voxel changed.
#[inline]
pub(crate) fn apply_observation(voxel: &mut Voxel, key: RegionKey, confidence: f32) -> bool {
    match voxel.semantic_key {
        Some(existing) if existing == key && voxel.semantic_weight > 0.0 => {
            let sw = voxel.semantic_weight as f64;
            voxel.confidence = ((sw * voxel.confidence as f64 + confidence as f64) / (sw + 1.0)) as f32;
            voxel.semantic_weight += 1.0;
            true
        }
        Some(_) if voxel.semantic_weight > 0.0 => {
            if confidence > voxel.confidence {
                voxel.semantic_key = Some(key);
                voxel.confidence = confidence;
                voxel.semantic_weight = 1.0;
                true
            } else {
                false
            }
        }
        _ => {
            voxel.semantic_key = Some(key);
            voxel.confidence = confidence;
            voxel.semantic_weight = 1.0;
            true
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn averages_confidence_for_same_key() {
        let mut v = Voxel::empty(0.2);
        assert!(apply_observation(&mut v, RegionKey(3), 0.8));
        assert_eq!((v.semantic_key, v.confidence, v.semantic_weight), (Some(RegionKey(3)), 0.8, 1.0));
        assert!(apply_observation(&mut v, RegionKey(3), 0.6));
        assert!((v.confidence - 0.7).abs() < 1e-6);
        assert_eq!(v.semantic_weight, 2.0);
    }

    #[test]
    fn conflicting_key_needs_higher_confidence() {
        let mut v = Voxel::empty(0.2);
        apply_observation(&mut v, RegionKey(1), 0.7);
        assert!(!apply_observation(&mut v, RegionKey(2), 0.6));
        assert_eq!(v.semantic_key, Some(RegionKey(1)));
        assert!(apply_observation(&mut v, RegionKey(2), 0.9));
        assert_eq!((v.semantic_key, v.confidence, v.semantic_weight), (Some(RegionKey(2)), 0.9, 1.0));
    }
}
