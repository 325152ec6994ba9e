//! Fixtures shared by the integration and acceptance tests.
#![allow(dead_code)]

use nalgebra::{Matrix3x4, Vector4};
use semfuse_core::geometry::{CameraIntrinsics, Point3};
use semfuse_core::ingest::synthetic::{default_scene_spec, Orbit, Primitive, SceneSpec, Shape};
use semfuse_core::ingest::FrameObservation;
use semfuse_core::pipeline::FeatureMap;
use semfuse_core::semantic::RegionFeatureSet;
use semfuse_core::tsdf::{BlockIndex, SparseVolume, VolumeConfig};

/// Sphere resting on a floor patch, orbited from 1.5 m. The principal
/// point is deliberately off the half-pixel grid so that no voxel of the
/// symmetric orbit projects exactly onto a pixel rounding boundary.
pub fn sphere_plane_spec(width: usize, height: usize, frames: usize) -> SceneSpec {
    let mut base = default_scene_spec(width, height, 4);
    base.intrinsics.fx *= 1.0137;
    base.intrinsics.fy *= 0.9921;
    base.intrinsics.cx += 0.2113;
    base.intrinsics.cy -= 0.1377;
    SceneSpec {
        primitives: vec![
            Primitive {
                id: 0,
                shape: Shape::Plane {
                    point: [0.0, 0.0, 0.0],
                    normal: [0.0, 0.0, 1.0],
                    half_extent: Some(1.2),
                },
                color: [0.5, 0.5, 0.5],
                embedding: None,
            },
            Primitive {
                id: 1,
                shape: Shape::Sphere {
                    center: [0.1, -0.05, 0.3],
                    radius: 0.3,
                },
                color: [0.9, 0.3, 0.1],
                embedding: Some(vec![1.0, 0.0, 0.0, 0.0]),
            },
        ],
        orbit: Orbit {
            center: [0.0, 0.0, 0.2],
            radius: 1.5,
            height: 1.0,
            frames,
            revolutions: 1.0,
        },
        ..base
    }
}

/// Renders every frame of `spec` with its features.
pub fn render_all(spec: &SceneSpec, resolution_factor: f64) -> (Vec<FrameObservation>, FeatureMap) {
    let scene = spec.build().unwrap();
    let mut frames = Vec::new();
    let mut features = FeatureMap::default();
    for i in 0..scene.trajectory.len() {
        let (f, r) = scene.render_frame(&spec.intrinsics, i, resolution_factor).unwrap();
        features.0.insert(f.frame_id, r);
        frames.push(f);
    }
    (frames, features)
}

pub fn features_of(map: &FeatureMap, id: u64) -> &RegionFeatureSet {
    &map.0[&id]
}

/// Brute-force dense integrator over a cube of `n^3` voxels starting at
/// voxel coordinate `lo` on every axis.
///
/// It allocates nothing: for every valid pixel it intersects the
/// truncation segment with each candidate block's box directly, then
/// updates every voxel of those blocks through a 3x4 projection matrix.
pub struct DenseOracle {
    pub config: VolumeConfig,
    pub lo: i32,
    pub n: usize,
    pub tsdf: Vec<f64>,
    pub weight: Vec<f64>,
}

impl DenseOracle {
    pub fn new(config: VolumeConfig, lo: i32, n: usize) -> Self {
        Self {
            config,
            lo,
            n,
            tsdf: vec![config.truncation; n * n * n],
            weight: vec![0.0; n * n * n],
        }
    }

    pub fn index(&self, c: [i32; 3]) -> Option<usize> {
        let n = self.n as i32;
        let l: Vec<i32> = c.iter().map(|&x| x - self.lo).collect();
        if l.iter().any(|&x| x < 0 || x >= n) {
            return None;
        }
        Some((l[0] + n * (l[1] + n * l[2])) as usize)
    }

    fn segment_hits_box(a: &Point3, b: &Point3, lo: [f64; 3], hi: [f64; 3]) -> bool {
        let (mut t0, mut t1) = (0.0f64, 1.0f64);
        for i in 0..3 {
            let d = b[i] - a[i];
            if d == 0.0 {
                if a[i] < lo[i] || a[i] >= hi[i] {
                    return false;
                }
                continue;
            }
            let (mut s0, mut s1) = ((lo[i] - a[i]) / d, (hi[i] - a[i]) / d);
            if s0 > s1 {
                std::mem::swap(&mut s0, &mut s1);
            }
            t0 = t0.max(s0);
            t1 = t1.min(s1);
            if t0 > t1 {
                return false;
            }
        }
        true
    }

    /// Blocks whose box meets some pixel's truncation segment.
    pub fn active_blocks(&self, frame: &FrameObservation, k: &CameraIntrinsics) -> Vec<BlockIndex> {
        let cfg = &self.config;
        let bs = cfg.block_size();
        let tau = cfg.truncation;
        let center = frame.pose.camera_center();
        let mut set = std::collections::BTreeSet::new();
        for v in 0..k.height {
            for u in 0..k.width {
                let d = frame.depth.get(u, v) as f64;
                if d <= 0.0 || d > cfg.depth_max {
                    continue;
                }
                let x = frame.pose.camera_to_world(&k.backproject(u as f64, v as f64, d));
                let dir = (x - center).normalize();
                let (a, b) = (x - dir * tau, x + dir * tau);
                let lo: Vec<i32> = (0..3).map(|i| (a[i].min(b[i]) / bs).floor() as i32).collect();
                let hi: Vec<i32> = (0..3).map(|i| (a[i].max(b[i]) / bs).floor() as i32).collect();
                for z in lo[2]..=hi[2] {
                    for y in lo[1]..=hi[1] {
                        for xx in lo[0]..=hi[0] {
                            let bl = [xx as f64 * bs, y as f64 * bs, z as f64 * bs];
                            let bh = [bl[0] + bs, bl[1] + bs, bl[2] + bs];
                            if Self::segment_hits_box(&a, &b, bl, bh) {
                                set.insert(BlockIndex::new(xx, y, z));
                            }
                        }
                    }
                }
            }
        }
        set.into_iter().collect()
    }

    pub fn integrate(&mut self, frame: &FrameObservation, k: &CameraIntrinsics) {
        let cfg = self.config;
        let r = cfg.block_resolution as i32;
        let tau = cfg.truncation;
        let rt = frame.pose.rotation;
        let t = frame.pose.translation;
        let ext = Matrix3x4::new(
            rt[(0, 0)], rt[(0, 1)], rt[(0, 2)], t.x,
            rt[(1, 0)], rt[(1, 1)], rt[(1, 2)], t.y,
            rt[(2, 0)], rt[(2, 1)], rt[(2, 2)], t.z,
        );
        let p = k.matrix() * ext;
        for b in self.active_blocks(frame, k) {
            for c in 0..r {
                for bb in 0..r {
                    for a in 0..r {
                        let g = [b.x * r + a, b.y * r + bb, b.z * r + c];
                        let idx = self.index(g).expect("active block outside the dense grid");
                        let h = p * Vector4::new(
                            g[0] as f64 * cfg.voxel_size,
                            g[1] as f64 * cfg.voxel_size,
                            g[2] as f64 * cfg.voxel_size,
                            1.0,
                        );
                        if h.z <= 0.0 {
                            continue;
                        }
                        let (u, v) = (h.x / h.z, h.y / h.z);
                        if u < 0.0 || v < 0.0 || u >= k.width as f64 || v >= k.height as f64 {
                            continue;
                        }
                        let (pu, pv) = ((u + 0.5).floor() as usize, (v + 0.5).floor() as usize);
                        if pu >= k.width || pv >= k.height {
                            continue;
                        }
                        let d = frame.depth.get(pu, pv) as f64;
                        if d <= 0.0 || d > cfg.depth_max {
                            continue;
                        }
                        let sdf = d - h.z;
                        if sdf < -tau {
                            continue;
                        }
                        let phi = sdf.min(tau);
                        let w = self.weight[idx];
                        self.tsdf[idx] = (self.tsdf[idx] * w + phi) / (w + 1.0);
                        self.weight[idx] = w + 1.0;
                    }
                }
            }
        }
    }
}

/// Largest `|tsdf|` difference and weight mismatch count between the
/// sparse volume and the oracle. Fails if a sparse block lies outside the
/// dense grid.
pub fn compare_with_oracle(volume: &SparseVolume, oracle: &DenseOracle) -> Result<(f64, usize, usize), String> {
    let n = oracle.n as i32;
    for blk in volume.blocks() {
        for i in 0..blk.voxels().len() {
            let g = blk.global_coord(i);
            if oracle.index(g).is_none() {
                return Err(format!("sparse block {:?} lies outside the dense grid", blk.index()));
            }
        }
    }
    let (mut max_dphi, mut weight_mismatch, mut observed) = (0.0f64, 0usize, 0usize);
    for z in 0..n {
        for y in 0..n {
            for x in 0..n {
                let g = [x + oracle.lo, y + oracle.lo, z + oracle.lo];
                let idx = oracle.index(g).unwrap();
                let (sw, sphi) = volume
                    .voxel(g)
                    .map_or((0.0, volume.config().truncation), |v| (v.weight as f64, v.tsdf as f64));
                if sw != oracle.weight[idx] {
                    weight_mismatch += 1;
                    continue;
                }
                if sw > 0.0 {
                    observed += 1;
                    max_dphi = max_dphi.max((sphi - oracle.tsdf[idx]).abs());
                }
            }
        }
    }
    Ok((max_dphi, weight_mismatch, observed))
}
