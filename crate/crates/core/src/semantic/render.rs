use std::collections::BTreeMap;

use super::RegionKey;
use crate::error::{Error, Result};
use crate::geometry::{CameraIntrinsics, DepthImage, Pose};
use crate::tsdf::{project_cam, BlockIndex, SparseVolume};

/// Confidence maps re-synthesized from the volume for the current view, one
/// per dictionary key visible in the view (ascending key order).
#[derive(Debug, Clone, PartialEq)]
pub struct RenderedRegions {
    width: usize,
    height: usize,
    keys: Vec<RegionKey>,
    maps: Vec<f32>,
}

impl RenderedRegions {
    pub fn empty(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            keys: Vec::new(),
            maps: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn keys(&self) -> &[RegionKey] {
        &self.keys
    }

    pub fn map(&self, j: usize) -> &[f32] {
        let px = self.width * self.height;
        &self.maps[j * px..(j + 1) * px]
    }

    pub fn map_for(&self, key: RegionKey) -> Option<&[f32]> {
        self.keys.iter().position(|&k| k == key).map(|j| self.map(j))
    }
}

/// Projects every semantic voxel of the active blocks into the map-resolution
/// view. A voxel contributes only when its projected depth is within
/// `occlusion_tolerance` of the observed depth at that pixel; per pixel and
/// key, the voxel closest to the surface (smallest `|tsdf|`) wins.
pub fn render_confidence_maps(
    volume: &SparseVolume,
    depth: &DepthImage,
    k_map: &CameraIntrinsics,
    pose: &Pose,
    active: &[BlockIndex],
    occlusion_tolerance: f64,
) -> Result<RenderedRegions> {
    if !depth.matches(k_map) {
        return Err(Error::invalid(format!(
            "depth is {}x{} but map intrinsics are {}x{}",
            depth.width(),
            depth.height(),
            k_map.width,
            k_map.height
        )));
    }
    let px = k_map.width * k_map.height;
    let kmat = k_map.matrix();
    // key -> (confidence map, |tsdf| of the voxel that wrote each pixel)
    let mut layers: BTreeMap<RegionKey, (Vec<f32>, Vec<f32>)> = BTreeMap::new();
    for index in active {
        let Some(block) = volume.block(index) else {
            continue;
        };
        for (i, vx) in block.voxels().iter().enumerate() {
            if !vx.has_semantics() {
                continue;
            }
            let key = vx.semantic_key.expect("semantic voxel without key");
            let world = volume.voxel_position(block.global_coord(i));
            let cam = pose.world_to_camera(&world);
            let Some((u, v, z)) = project_cam(&kmat, k_map, &cam) else {
                continue;
            };
            let observed = depth.get(u, v) as f64;
            if observed <= 0.0 || (z - observed).abs() > occlusion_tolerance {
                continue;
            }
            let (conf, best) = layers
                .entry(key)
                .or_insert_with(|| (vec![0.0; px], vec![f32::INFINITY; px]));
            let p = v * k_map.width + u;
            let dist = vx.tsdf.abs();
            if dist < best[p] {
                best[p] = dist;
                conf[p] = vx.confidence.clamp(0.0, 1.0);
            }
        }
    }
    let mut keys = Vec::with_capacity(layers.len());
    let mut maps = Vec::with_capacity(layers.len() * px);
    for (key, (conf, _)) in layers {
        keys.push(key);
        maps.extend_from_slice(&conf);
    }
    Ok(RenderedRegions {
        width: k_map.width,
        height: k_map.height,
        keys,
        maps,
    })
}
