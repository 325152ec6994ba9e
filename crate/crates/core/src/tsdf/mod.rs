//! Globally sparse, locally dense TSDF volume.
//!
//! The volume is a hash map from integer block coordinates to dense
//! `r x r x r` voxel grids. Blocks are allocated only around observed surface
//! samples, so memory scales with surface area rather than scene extent.
//! Voxel `(a, b, c)` of block `i` sits at `(i * r + (a, b, c)) * voxel_size`.

mod mesh;
mod tables;

use std::collections::hash_map::DefaultHasher;
use std::collections::{HashMap, HashSet};
use std::hash::BuildHasherDefault;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

pub use mesh::{extract_mesh, TriangleMesh};
pub(crate) use mesh::extract_mesh_where;

use crate::error::{Error, Result};
use crate::geometry::{unproject_depth, CameraIntrinsics, DepthImage, Point3, Pose};
use crate::ingest::FrameObservation;
use crate::semantic::RegionKey;

/// Deterministic hasher so that map iteration order does not vary between runs.
pub(crate) type FixedState = BuildHasherDefault<DefaultHasher>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VolumeConfig {
    pub voxel_size: f64,
    pub block_resolution: usize,
    pub truncation: f64,
    /// Voxels with `|tsdf| <= semantic_band` may carry semantics.
    pub semantic_band: f64,
    pub depth_max: f64,
    /// Optional integration weight cap. `None` keeps the weight unbounded.
    #[serde(default)]
    pub max_weight: Option<f32>,
}

impl VolumeConfig {
    /// Truncation of four voxels, semantic band of two voxels, 8^3 blocks,
    /// 5 m depth cutoff.
    pub fn with_voxel_size(voxel_size: f64) -> Self {
        Self {
            voxel_size,
            block_resolution: 8,
            truncation: 4.0 * voxel_size,
            semantic_band: 2.0 * voxel_size,
            depth_max: 5.0,
            max_weight: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.voxel_size > 0.0 && self.voxel_size.is_finite()) {
            return Err(Error::invalid(format!("voxel_size must be positive, got {}", self.voxel_size)));
        }
        if self.block_resolution < 2 {
            return Err(Error::invalid("block_resolution must be at least 2"));
        }
        if !(self.truncation >= self.voxel_size) {
            return Err(Error::invalid(format!(
                "truncation {} is smaller than the voxel size {}",
                self.truncation, self.voxel_size
            )));
        }
        if !(self.semantic_band > 0.0 && self.semantic_band <= self.truncation) {
            return Err(Error::invalid(format!(
                "semantic_band {} must lie in (0, truncation]",
                self.semantic_band
            )));
        }
        if !(self.depth_max > 0.0) {
            return Err(Error::invalid("depth_max must be positive"));
        }
        if let Some(cap) = self.max_weight {
            if !(cap >= 1.0) {
                return Err(Error::invalid("max_weight must be at least 1"));
            }
        }
        Ok(())
    }

    pub fn block_size(&self) -> f64 {
        self.voxel_size * self.block_resolution as f64
    }

    pub fn voxels_per_block(&self) -> usize {
        self.block_resolution.pow(3)
    }
}

impl Default for VolumeConfig {
    fn default() -> Self {
        Self::with_voxel_size(0.02)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Voxel {
    pub rgb: [f32; 3],
    pub weight: f32,
    pub tsdf: f32,
    pub semantic_key: Option<RegionKey>,
    pub confidence: f32,
    pub semantic_weight: f32,
}

impl Voxel {
    pub fn empty(truncation: f32) -> Self {
        Self {
            rgb: [0.0; 3],
            weight: 0.0,
            tsdf: truncation,
            semantic_key: None,
            confidence: 0.0,
            semantic_weight: 0.0,
        }
    }

    /// Running weighted average of color and truncated distance.
    #[inline]
    pub fn fuse(&mut self, tsdf: f64, rgb: [f32; 3], max_weight: Option<f32>) {
        let w = self.weight as f64;
        let denom = w + 1.0;
        self.tsdf = ((w * self.tsdf as f64 + tsdf) / denom) as f32;
        for (stored, obs) in self.rgb.iter_mut().zip(rgb) {
            *stored = ((w * *stored as f64 + obs as f64) / denom) as f32;
        }
        self.weight += 1.0;
        if let Some(cap) = max_weight {
            self.weight = self.weight.min(cap);
        }
    }

    pub fn is_observed(&self) -> bool {
        self.weight > 0.0
    }

    pub fn has_semantics(&self) -> bool {
        self.semantic_weight > 0.0 && self.semantic_key.is_some()
    }

    pub(crate) fn copy_geometry_from(&mut self, other: &Voxel) {
        self.rgb = other.rgb;
        self.weight = other.weight;
        self.tsdf = other.tsdf;
    }

    pub(crate) fn copy_semantics_from(&mut self, other: &Voxel) {
        self.semantic_key = other.semantic_key;
        self.confidence = other.confidence;
        self.semantic_weight = other.semantic_weight;
    }
}

/// Clamps a signed distance to `[-truncation, truncation]`.
#[inline]
pub fn truncate(sdf: f64, truncation: f64) -> f64 {
    sdf.clamp(-truncation, truncation)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct BlockIndex {
    pub x: i32,
    pub y: i32,
    pub z: i32,
}

impl BlockIndex {
    pub const fn new(x: i32, y: i32, z: i32) -> Self {
        Self { x, y, z }
    }

    pub fn offset(&self, dx: i32, dy: i32, dz: i32) -> Self {
        Self::new(self.x + dx, self.y + dy, self.z + dz)
    }
}

/// Global integer voxel coordinates.
pub type VoxelCoord = [i32; 3];

#[derive(Debug, Clone, PartialEq)]
pub struct VoxelBlock {
    index: BlockIndex,
    resolution: usize,
    voxels: Box<[Voxel]>,
}

impl VoxelBlock {
    pub fn new(index: BlockIndex, resolution: usize, truncation: f32) -> Self {
        Self {
            index,
            resolution,
            voxels: vec![Voxel::empty(truncation); resolution.pow(3)].into_boxed_slice(),
        }
    }

    pub(crate) fn from_voxels(index: BlockIndex, resolution: usize, voxels: Vec<Voxel>) -> Result<Self> {
        if voxels.len() != resolution.pow(3) {
            return Err(Error::invalid(format!(
                "block {:?} has {} voxels, expected {}",
                index,
                voxels.len(),
                resolution.pow(3)
            )));
        }
        Ok(Self {
            index,
            resolution,
            voxels: voxels.into_boxed_slice(),
        })
    }

    pub fn index(&self) -> BlockIndex {
        self.index
    }

    pub fn resolution(&self) -> usize {
        self.resolution
    }

    pub fn voxels(&self) -> &[Voxel] {
        &self.voxels
    }

    pub fn voxels_mut(&mut self) -> &mut [Voxel] {
        &mut self.voxels
    }

    #[inline]
    pub fn linear(&self, a: usize, b: usize, c: usize) -> usize {
        a + self.resolution * (b + self.resolution * c)
    }

    #[inline]
    pub fn get(&self, a: usize, b: usize, c: usize) -> &Voxel {
        &self.voxels[self.linear(a, b, c)]
    }

    #[inline]
    pub fn get_mut(&mut self, a: usize, b: usize, c: usize) -> &mut Voxel {
        let i = self.linear(a, b, c);
        &mut self.voxels[i]
    }

    /// Local `(a, b, c)` of a linear voxel index.
    #[inline]
    pub fn local(&self, linear: usize) -> (usize, usize, usize) {
        let r = self.resolution;
        (linear % r, (linear / r) % r, linear / (r * r))
    }

    #[inline]
    pub fn global_coord(&self, linear: usize) -> VoxelCoord {
        let (a, b, c) = self.local(linear);
        let r = self.resolution as i32;
        [
            self.index.x * r + a as i32,
            self.index.y * r + b as i32,
            self.index.z * r + c as i32,
        ]
    }
}

#[derive(Debug, Clone)]
pub struct SparseVolume {
    config: VolumeConfig,
    blocks: HashMap<BlockIndex, VoxelBlock, FixedState>,
    frame_count: u64,
}

impl SparseVolume {
    pub fn new(config: VolumeConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            blocks: HashMap::default(),
            frame_count: 0,
        })
    }

    pub fn config(&self) -> &VolumeConfig {
        &self.config
    }

    pub fn frame_count(&self) -> u64 {
        self.frame_count
    }

    pub(crate) fn set_frame_count(&mut self, n: u64) {
        self.frame_count = n;
    }

    pub fn block_count(&self) -> usize {
        self.blocks.len()
    }

    pub fn voxel_count(&self) -> usize {
        self.blocks.len() * self.config.voxels_per_block()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    pub fn block(&self, index: &BlockIndex) -> Option<&VoxelBlock> {
        self.blocks.get(index)
    }

    pub fn block_mut(&mut self, index: &BlockIndex) -> Option<&mut VoxelBlock> {
        self.blocks.get_mut(index)
    }

    pub fn blocks(&self) -> impl Iterator<Item = &VoxelBlock> {
        self.blocks.values()
    }

    /// Block indices in ascending order.
    pub fn sorted_indices(&self) -> Vec<BlockIndex> {
        let mut keys: Vec<BlockIndex> = self.blocks.keys().copied().collect();
        keys.sort_unstable();
        keys
    }

    /// Returns the block, creating a zero-initialized one if absent.
    pub fn ensure_block(&mut self, index: BlockIndex) -> &mut VoxelBlock {
        let r = self.config.block_resolution;
        let tau = self.config.truncation as f32;
        self.blocks
            .entry(index)
            .or_insert_with(|| VoxelBlock::new(index, r, tau))
    }

    pub(crate) fn insert_block(&mut self, block: VoxelBlock) {
        self.blocks.insert(block.index, block);
    }

    /// Voxel at global coordinates, or `None` if its block is not allocated.
    pub fn voxel(&self, coord: VoxelCoord) -> Option<&Voxel> {
        let (block, (a, b, c)) = self.split_coord(coord);
        self.blocks.get(&block).map(|blk| blk.get(a, b, c))
    }

    pub fn voxel_mut(&mut self, coord: VoxelCoord) -> Option<&mut Voxel> {
        let (block, (a, b, c)) = self.split_coord(coord);
        self.blocks.get_mut(&block).map(|blk| blk.get_mut(a, b, c))
    }

    pub fn split_coord(&self, coord: VoxelCoord) -> (BlockIndex, (usize, usize, usize)) {
        let r = self.config.block_resolution as i32;
        let bx = coord[0].div_euclid(r);
        let by = coord[1].div_euclid(r);
        let bz = coord[2].div_euclid(r);
        (
            BlockIndex::new(bx, by, bz),
            (
                coord[0].rem_euclid(r) as usize,
                coord[1].rem_euclid(r) as usize,
                coord[2].rem_euclid(r) as usize,
            ),
        )
    }

    #[inline]
    pub fn voxel_position(&self, coord: VoxelCoord) -> Point3 {
        let s = self.config.voxel_size;
        Point3::new(coord[0] as f64 * s, coord[1] as f64 * s, coord[2] as f64 * s)
    }

    /// Nearest global voxel coordinate of a world point.
    pub fn nearest_voxel(&self, p: &Point3) -> VoxelCoord {
        let s = self.config.voxel_size;
        [
            (p.x / s).round() as i32,
            (p.y / s).round() as i32,
            (p.z / s).round() as i32,
        ]
    }

    pub fn block_of_point(&self, p: &Point3) -> BlockIndex {
        let b = self.config.block_size();
        BlockIndex::new(
            (p.x / b).floor() as i32,
            (p.y / b).floor() as i32,
            (p.z / b).floor() as i32,
        )
    }

    /// Blocks touched by the truncation band around each valid depth
    /// sample: for every pixel with `0 < depth <= depth_max`, the segment of
    /// its viewing ray from `depth - tau` to `depth + tau` (metric distance
    /// along the ray). Missing blocks are created. Returns the sorted set.
    pub fn allocate_active_blocks(
        &mut self,
        depth: &DepthImage,
        k: &CameraIntrinsics,
        pose: &Pose,
    ) -> Result<Vec<BlockIndex>> {
        let samples = unproject_depth(depth, k, pose)?;
        let center = pose.camera_center();
        let tau = self.config.truncation;
        let block_size = self.config.block_size();
        let mut active: HashSet<BlockIndex, FixedState> = HashSet::default();
        for s in samples.iter().filter(|s| s.depth <= self.config.depth_max) {
            let ray = s.world - center;
            let len = ray.norm();
            if len <= 0.0 {
                continue;
            }
            let dir = ray / len;
            let start = s.world - dir * tau;
            let end = s.world + dir * tau;
            walk_blocks(&start, &end, block_size, |b| {
                active.insert(b);
            });
        }
        let mut active: Vec<BlockIndex> = active.into_iter().collect();
        active.sort_unstable();
        for &b in &active {
            self.ensure_block(b);
        }
        Ok(active)
    }

    /// Fuses one frame into the given (already allocated) blocks.
    ///
    /// Each voxel is projected with the full-resolution intrinsics; voxels
    /// that land on a valid depth pixel with `depth - z >= -tau` receive a
    /// weighted-average update of color and truncated distance. Everything
    /// else is left untouched.
    pub fn integrate_geometry(
        &mut self,
        frame: &FrameObservation,
        k: &CameraIntrinsics,
        active: &[BlockIndex],
    ) -> Result<()> {
        frame.check_intrinsics(k)?;
        let cfg = self.config;
        let tau = cfg.truncation;
        let r = cfg.block_resolution;
        let pose = &frame.pose;
        let kmat = k.matrix();
        // Camera-frame position of voxel (g · s) is rot·g + t, stepping linearly in g.
        let step = pose.rotation * cfg.voxel_size;
        for index in active {
            let Some(block) = self.blocks.get_mut(index) else {
                continue;
            };
            let base = Vector3::new(
                (index.x * r as i32) as f64,
                (index.y * r as i32) as f64,
                (index.z * r as i32) as f64,
            );
            for c in 0..r {
                for b in 0..r {
                    for a in 0..r {
                        let g = base + Vector3::new(a as f64, b as f64, c as f64);
                        let cam = step * g + pose.translation;
                        let Some((u, v, z)) = project_cam(&kmat, k, &cam) else {
                            continue;
                        };
                        let observed = frame.depth.get(u, v) as f64;
                        if observed <= 0.0 || observed > cfg.depth_max {
                            continue;
                        }
                        let sdf = observed - z;
                        if sdf < -tau {
                            continue;
                        }
                        let rgb = frame.rgb.get(u, v);
                        block.get_mut(a, b, c).fuse(truncate(sdf, tau), rgb, cfg.max_weight);
                    }
                }
            }
        }
        self.frame_count += 1;
        Ok(())
    }

    /// Allocation followed by geometric integration.
    pub fn integrate_frame(&mut self, frame: &FrameObservation, k: &CameraIntrinsics) -> Result<Vec<BlockIndex>> {
        frame.check_intrinsics(k)?;
        let active = self.allocate_active_blocks(&frame.depth, k, &frame.pose)?;
        self.integrate_geometry(frame, k, &active)?;
        Ok(active)
    }

    /// Observed voxels with `|tsdf| <= band`, in ascending block order.
    pub fn extract_point_cloud(&self, band: f64) -> Vec<SurfacePoint> {
        let mut out = Vec::new();
        for index in self.sorted_indices() {
            let block = &self.blocks[&index];
            for (i, vx) in block.voxels.iter().enumerate() {
                if vx.is_observed() && (vx.tsdf as f64).abs() <= band {
                    let coord = block.global_coord(i);
                    out.push(SurfacePoint {
                        coord,
                        position: self.voxel_position(coord),
                        rgb: vx.rgb,
                        semantic_key: vx.has_semantics().then_some(vx.semantic_key).flatten(),
                        confidence: vx.confidence,
                    });
                }
            }
        }
        out
    }

    /// Approximate heap footprint of the voxel storage.
    pub fn memory_bytes(&self) -> usize {
        self.blocks.len()
            * (self.config.voxels_per_block() * std::mem::size_of::<Voxel>()
                + std::mem::size_of::<VoxelBlock>()
                + std::mem::size_of::<BlockIndex>())
    }
}

/// Projects a camera-frame point and returns its pixel and depth under the
/// image-bounds validity predicate plus nearest-pixel rounding.
#[inline]
pub(crate) fn project_cam(
    kmat: &nalgebra::Matrix3<f64>,
    k: &CameraIntrinsics,
    cam: &Vector3<f64>,
) -> Option<(usize, usize, f64)> {
    if !(cam.z > 0.0) {
        return None;
    }
    let h = kmat * cam;
    let proj = crate::geometry::Projection {
        u: h.x / h.z,
        v: h.y / h.z,
        depth: h.z,
    };
    if !k.contains(proj.u, proj.v) {
        return None;
    }
    proj.pixel(k).map(|(u, v)| (u, v, proj.depth))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SurfacePoint {
    pub coord: VoxelCoord,
    pub position: Point3,
    pub rgb: [f32; 3],
    pub semantic_key: Option<RegionKey>,
    pub confidence: f32,
}

/// Visits every block cell pierced by the segment `start..end`
/// (3D DDA over a grid of cube size `cell`).
pub(crate) fn walk_blocks(start: &Point3, end: &Point3, cell: f64, mut visit: impl FnMut(BlockIndex)) {
    let p0 = start.coords / cell;
    let p1 = end.coords / cell;
    let d = p1 - p0;
    let mut idx = [p0.x.floor() as i32, p0.y.floor() as i32, p0.z.floor() as i32];
    let last = [p1.x.floor() as i32, p1.y.floor() as i32, p1.z.floor() as i32];
    let mut step = [0i32; 3];
    let mut t_max = [f64::INFINITY; 3];
    let mut t_delta = [f64::INFINITY; 3];
    for axis in 0..3 {
        let (o, dir) = (p0[axis], d[axis]);
        if dir > 0.0 {
            step[axis] = 1;
            t_max[axis] = ((idx[axis] as f64 + 1.0) - o) / dir;
            t_delta[axis] = 1.0 / dir;
        } else if dir < 0.0 {
            step[axis] = -1;
            t_max[axis] = (idx[axis] as f64 - o) / dir;
            t_delta[axis] = -1.0 / dir;
        }
    }
    let steps: i32 = (0..3).map(|a| (last[a] - idx[a]).abs()).sum();
    visit(BlockIndex::new(idx[0], idx[1], idx[2]));
    for _ in 0..steps {
        let axis = if t_max[0] <= t_max[1] && t_max[0] <= t_max[2] {
            0
        } else if t_max[1] <= t_max[2] {
            1
        } else {
            2
        };
        idx[axis] += step[axis];
        t_max[axis] += t_delta[axis];
        visit(BlockIndex::new(idx[0], idx[1], idx[2]));
    }
}
