//! Analytic scenes of spheres, boxes and planes, ray cast exactly.
//!
//! Each frame yields depth (camera z of the first hit), flat-shaded color,
//! and one binary confidence map per visible primitive that carries an
//! embedding. Ground truth assigns each voxel within the semantic band of
//! an embedded primitive the index of that primitive among the embedded
//! ones, which is also its query index in the generated query file.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use byteorder::{ReadBytesExt, WriteBytesExt, LE};
use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use super::manifest::{write_color_png, write_depth_f32, FrameEntry, SequenceManifest};
use super::FrameObservation;
use crate::error::{Error, Result};
use crate::geometry::{scale_intrinsics, CameraIntrinsics, ColorImage, DepthImage, Point3, Pose};
use crate::query::{write_query_file, QuerySource, QueryVector, VoxelLabel};
use crate::semantic::{feature_path, RegionFeatureSet};
use crate::tsdf::VolumeConfig;

pub const GT_MAGIC: &[u8; 4] = b"OFGT";
pub const GT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shape {
    Sphere {
        center: [f64; 3],
        radius: f64,
    },
    /// Axis-aligned box.
    Cuboid { min: [f64; 3], max: [f64; 3] },
    /// Infinite plane, or a square patch of side `2 * half_extent` when set.
    Plane {
        point: [f64; 3],
        normal: [f64; 3],
        #[serde(default)]
        half_extent: Option<f64>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Primitive {
    pub id: u32,
    pub shape: Shape,
    pub color: [f32; 3],
    /// Region embedding; `None` marks background that yields no region.
    #[serde(default)]
    pub embedding: Option<Vec<f32>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Orbit {
    pub center: [f64; 3],
    pub radius: f64,
    pub height: f64,
    pub frames: usize,
    #[serde(default = "one")]
    pub revolutions: f64,
}

fn one() -> f64 {
    1.0
}

impl Orbit {
    /// Poses circling `center` at `radius`, `height` above it, looking at
    /// the center with world +z up. Timestamps advance at 30 Hz.
    pub fn poses(&self) -> Result<Vec<Pose>> {
        let c = Point3::from(self.center);
        (0..self.frames)
            .map(|i| {
                let a = std::f64::consts::TAU * self.revolutions * i as f64 / self.frames.max(1) as f64;
                let eye = Point3::new(c.x + self.radius * a.cos(), c.y + self.radius * a.sin(), c.z + self.height);
                Pose::look_at(eye, c, Vector3::z(), i as f64 / 30.0)
            })
            .collect()
    }
}

/// JSON description accepted by the `synth` command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub primitives: Vec<Primitive>,
    pub orbit: Orbit,
    pub intrinsics: CameraIntrinsics,
    /// Peak value of the binary confidence maps.
    #[serde(default = "default_mask_confidence")]
    pub mask_confidence: f32,
}

fn default_mask_confidence() -> f32 {
    1.0
}

impl SceneSpec {
    pub fn build(&self) -> Result<SyntheticScene> {
        let scene = SyntheticScene {
            primitives: self.primitives.clone(),
            trajectory: self.orbit.poses()?,
            mask_confidence: self.mask_confidence,
        };
        scene.validate()?;
        Ok(scene)
    }
}

/// Three objects with one-hot embeddings of dimension `dim` resting on a
/// 2.4 m floor patch without an embedding, seen from a 60-frame orbit.
pub fn default_scene_spec(width: usize, height: usize, dim: usize) -> SceneSpec {
    let onehot = |i: usize| {
        let mut e = vec![0.0f32; dim];
        e[i] = 1.0;
        Some(e)
    };
    let f = width as f64 * 0.875;
    SceneSpec {
        primitives: vec![
            Primitive {
                id: 0,
                shape: Shape::Plane {
                    point: [0.0, 0.0, 0.0],
                    normal: [0.0, 0.0, 1.0],
                    half_extent: Some(1.2),
                },
                color: [0.6, 0.6, 0.6],
                embedding: None,
            },
            Primitive {
                id: 1,
                shape: Shape::Sphere {
                    center: [0.35, 0.1, 0.25],
                    radius: 0.25,
                },
                color: [0.9, 0.2, 0.2],
                embedding: onehot(0),
            },
            Primitive {
                id: 2,
                shape: Shape::Cuboid {
                    min: [-0.55, -0.2, 0.0],
                    max: [-0.25, 0.2, 0.4],
                },
                color: [0.2, 0.8, 0.3],
                embedding: onehot(1),
            },
            Primitive {
                id: 3,
                shape: Shape::Cuboid {
                    min: [-0.05, -0.65, 0.0],
                    max: [0.25, -0.35, 0.3],
                },
                color: [0.2, 0.3, 0.9],
                embedding: onehot(2),
            },
        ],
        orbit: Orbit {
            center: [0.0, 0.0, 0.15],
            radius: 1.6,
            height: 1.0,
            frames: 60,
            revolutions: 1.0,
        },
        intrinsics: CameraIntrinsics {
            fx: f,
            fy: f,
            cx: (width as f64 - 1.0) / 2.0,
            cy: (height as f64 - 1.0) / 2.0,
            width,
            height,
        },
        mask_confidence: 1.0,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticScene {
    pub primitives: Vec<Primitive>,
    pub trajectory: Vec<Pose>,
    pub mask_confidence: f32,
}

/// First intersection along a pixel ray.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hit {
    pub primitive: usize,
    /// Camera-frame z of the hit point.
    pub depth: f64,
}

impl SyntheticScene {
    pub fn validate(&self) -> Result<()> {
        let embedded: Vec<&Vec<f32>> = self.primitives.iter().filter_map(|p| p.embedding.as_ref()).collect();
        if let Some(first) = embedded.first() {
            if embedded.iter().any(|e| e.len() != first.len() || e.is_empty()) {
                return Err(Error::invalid("primitive embeddings must share one non-zero dimension"));
            }
        }
        for (i, a) in embedded.iter().enumerate() {
            if embedded[..i].iter().any(|b| b == a) {
                return Err(Error::invalid("primitive embeddings must be distinct"));
            }
        }
        for p in &self.primitives {
            let ok = match &p.shape {
                Shape::Sphere { radius, .. } => *radius > 0.0,
                Shape::Cuboid { min, max } => (0..3).all(|i| min[i] < max[i]),
                Shape::Plane { normal, half_extent, .. } => {
                    Vector3::from(*normal).norm() > 0.0 && half_extent.is_none_or(|h| h > 0.0)
                }
            };
            if !ok {
                return Err(Error::invalid(format!("primitive {} has degenerate shape", p.id)));
            }
        }
        for pose in &self.trajectory {
            pose.validate()?;
        }
        Ok(())
    }

    pub fn embedding_dim(&self) -> usize {
        self.primitives.iter().find_map(|p| p.embedding.as_ref()).map_or(0, Vec::len)
    }

    /// Indices of primitives that carry an embedding, in class order.
    pub fn classes(&self) -> Vec<usize> {
        (0..self.primitives.len()).filter(|&i| self.primitives[i].embedding.is_some()).collect()
    }

    pub fn queries(&self) -> Result<Vec<QueryVector>> {
        self.classes()
            .into_iter()
            .map(|i| QueryVector::new(self.primitives[i].embedding.clone().unwrap(), QuerySource::Raw))
            .collect()
    }

    /// Casts the ray through pixel `(u, v)`.
    pub fn ray_cast(&self, k: &CameraIntrinsics, pose: &Pose, u: f64, v: f64) -> Option<Hit> {
        let origin = pose.camera_center();
        // Camera-frame direction with unit z, so the ray parameter is depth.
        let dir = pose.rotation.transpose() * k.backproject(u, v, 1.0);
        let mut best: Option<Hit> = None;
        for (i, p) in self.primitives.iter().enumerate() {
            if let Some(t) = intersect(&p.shape, &origin, &dir) {
                if best.is_none_or(|b| t < b.depth) {
                    best = Some(Hit { primitive: i, depth: t });
                }
            }
        }
        best
    }

    /// Depth, color and per-primitive hit index for one pose.
    pub fn render_view(&self, k: &CameraIntrinsics, pose: &Pose) -> (DepthImage, ColorImage, Vec<Option<usize>>) {
        let mut depth = DepthImage::zeros(k.width, k.height);
        let mut rgb = ColorImage::filled(k.width, k.height, [0.0; 3]);
        let mut ids = vec![None; k.width * k.height];
        for v in 0..k.height {
            for u in 0..k.width {
                if let Some(hit) = self.ray_cast(k, pose, u as f64, v as f64) {
                    depth.set(u, v, hit.depth as f32);
                    rgb.set(u, v, self.primitives[hit.primitive].color);
                    ids[v * k.width + u] = Some(hit.primitive);
                }
            }
        }
        (depth, rgb, ids)
    }

    /// Frame `index` of the trajectory with its region features at
    /// `resolution_factor`. Masks point-sample the full-resolution hit map.
    pub fn render_frame(
        &self,
        k: &CameraIntrinsics,
        index: usize,
        resolution_factor: f64,
    ) -> Result<(FrameObservation, RegionFeatureSet)> {
        let pose = *self
            .trajectory
            .get(index)
            .ok_or_else(|| Error::NotFound(format!("trajectory pose {index}")))?;
        let (depth, rgb, ids) = self.render_view(k, &pose);
        let k_map = scale_intrinsics(k, resolution_factor)?;
        let step = (1.0 / resolution_factor).round() as usize;
        let (w, h) = (k_map.width, k_map.height);
        let mut embeddings = Vec::new();
        let mut maps = Vec::new();
        for class in self.classes() {
            let mut map = vec![0f32; w * h];
            let mut any = false;
            for v in 0..h {
                for u in 0..w {
                    if ids[v * step * k.width + u * step] == Some(class) {
                        map[v * w + u] = self.mask_confidence;
                        any = true;
                    }
                }
            }
            if any {
                embeddings.extend_from_slice(self.primitives[class].embedding.as_ref().unwrap());
                maps.extend(map);
            }
        }
        let frame_id = index as u64;
        let features = RegionFeatureSet::new(frame_id, self.embedding_dim(), w, h, embeddings, maps)?;
        let frame = FrameObservation::new(frame_id, pose.timestamp, rgb, depth, pose)?;
        Ok((frame, features))
    }

    /// Ground-truth labels on the voxel grid of `config`.
    pub fn ground_truth(&self, config: &VolumeConfig) -> GroundTruth {
        let vs = config.voxel_size;
        let band = config.semantic_band;
        let classes = self.classes();
        let mut labels: BTreeMap<[i32; 3], u32> = BTreeMap::new();
        for (label, &pi) in classes.iter().enumerate() {
            let Some((lo, hi)) = bounds(&self.primitives[pi].shape) else {
                continue;
            };
            let lo: Vec<i32> = (0..3).map(|a| ((lo[a] - band) / vs).floor() as i32 - 1).collect();
            let hi: Vec<i32> = (0..3).map(|a| ((hi[a] + band) / vs).ceil() as i32 + 1).collect();
            for z in lo[2]..=hi[2] {
                for y in lo[1]..=hi[1] {
                    for x in lo[0]..=hi[0] {
                        let p = Point3::new(x as f64 * vs, y as f64 * vs, z as f64 * vs);
                        let nearest = self
                            .primitives
                            .iter()
                            .enumerate()
                            .map(|(i, q)| (i, surface_distance(&q.shape, &p)))
                            .fold((usize::MAX, f64::INFINITY), |b, c| if c.1 < b.1 { c } else { b });
                        if nearest.0 == pi && nearest.1 <= band {
                            labels.insert([x, y, z], label as u32);
                        }
                    }
                }
            }
        }
        GroundTruth {
            voxel_size: vs,
            class_count: classes.len() as u32,
            labels: labels.into_iter().map(|(coord, label)| VoxelLabel { coord, label }).collect(),
        }
    }
}

fn plane_basis(normal: &Vector3<f64>) -> (Vector3<f64>, Vector3<f64>, Vector3<f64>) {
    let n = normal.normalize();
    let seed = if n.x.abs() < 0.9 { Vector3::x() } else { Vector3::y() };
    let u = (seed - n * n.dot(&seed)).normalize();
    let v = n.cross(&u);
    (n, u, v)
}

fn intersect(shape: &Shape, o: &Point3, d: &Vector3<f64>) -> Option<f64> {
    const EPS: f64 = 1e-9;
    match shape {
        Shape::Sphere { center, radius } => {
            let oc = o - Point3::from(*center);
            let a = d.dot(d);
            let b = oc.dot(d);
            let c = oc.dot(&oc) - radius * radius;
            let disc = b * b - a * c;
            if disc < 0.0 {
                return None;
            }
            let sq = disc.sqrt();
            [(-b - sq) / a, (-b + sq) / a].into_iter().find(|&t| t > EPS)
        }
        Shape::Cuboid { min, max } => {
            let (mut t0, mut t1) = (f64::NEG_INFINITY, f64::INFINITY);
            for a in 0..3 {
                if d[a].abs() < 1e-15 {
                    if o[a] < min[a] || o[a] > max[a] {
                        return None;
                    }
                    continue;
                }
                let (mut ta, mut tb) = ((min[a] - o[a]) / d[a], (max[a] - o[a]) / d[a]);
                if ta > tb {
                    std::mem::swap(&mut ta, &mut tb);
                }
                t0 = t0.max(ta);
                t1 = t1.min(tb);
            }
            (t0 <= t1 && t0 > EPS).then_some(t0)
        }
        Shape::Plane {
            point,
            normal,
            half_extent,
        } => {
            let (n, u, v) = plane_basis(&Vector3::from(*normal));
            let denom = n.dot(d);
            if denom.abs() < 1e-15 {
                return None;
            }
            let p0 = Point3::from(*point);
            let t = n.dot(&(p0 - o)) / denom;
            if t <= EPS {
                return None;
            }
            if let Some(h) = half_extent {
                let rel = o + d * t - p0;
                if rel.dot(&u).abs() > *h || rel.dot(&v).abs() > *h {
                    return None;
                }
            }
            Some(t)
        }
    }
}

/// Unsigned distance from `p` to the primitive's surface.
pub fn surface_distance(shape: &Shape, p: &Point3) -> f64 {
    match shape {
        Shape::Sphere { center, radius } => ((p - Point3::from(*center)).norm() - radius).abs(),
        Shape::Cuboid { min, max } => {
            let c = (Vector3::from(*min) + Vector3::from(*max)) / 2.0;
            let half = (Vector3::from(*max) - Vector3::from(*min)) / 2.0;
            let q = (p.coords - c).abs() - half;
            let outside = q.map(|x| x.max(0.0)).norm();
            let inside = q.max().min(0.0);
            (outside + inside).abs()
        }
        Shape::Plane {
            point,
            normal,
            half_extent,
        } => {
            let (n, u, v) = plane_basis(&Vector3::from(*normal));
            let rel = p - Point3::from(*point);
            let h = rel.dot(&n);
            match half_extent {
                None => h.abs(),
                Some(e) => {
                    let da = (rel.dot(&u).abs() - e).max(0.0);
                    let db = (rel.dot(&v).abs() - e).max(0.0);
                    (da * da + db * db + h * h).sqrt()
                }
            }
        }
    }
}

fn bounds(shape: &Shape) -> Option<([f64; 3], [f64; 3])> {
    match shape {
        Shape::Sphere { center, radius } => Some((center.map(|c| c - radius), center.map(|c| c + radius))),
        Shape::Cuboid { min, max } => Some((*min, *max)),
        Shape::Plane {
            point,
            normal,
            half_extent: Some(e),
        } => {
            let (_, u, v) = plane_basis(&Vector3::from(*normal));
            let reach: Vec<f64> = (0..3).map(|a| e * (u[a].abs() + v[a].abs())).collect();
            Some((
                std::array::from_fn(|a| point[a] - reach[a]),
                std::array::from_fn(|a| point[a] + reach[a]),
            ))
        }
        Shape::Plane { half_extent: None, .. } => None,
    }
}

/// Voxel labels on a grid of spacing `voxel_size`. Stored as `.ofgt`:
/// magic `OFGT`, `u32` version, `f64` voxel size, `u32` class count,
/// `u32` entry count, then per entry three `i32` coordinates and a `u32`
/// label, all little-endian.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub voxel_size: f64,
    pub class_count: u32,
    pub labels: Vec<VoxelLabel>,
}

impl GroundTruth {
    pub fn encode(&self, out: &mut impl Write) -> Result<()> {
        out.write_all(GT_MAGIC)?;
        out.write_u32::<LE>(GT_VERSION)?;
        out.write_f64::<LE>(self.voxel_size)?;
        out.write_u32::<LE>(self.class_count)?;
        out.write_u32::<LE>(self.labels.len() as u32)?;
        for l in &self.labels {
            for c in l.coord {
                out.write_i32::<LE>(c)?;
            }
            out.write_u32::<LE>(l.label)?;
        }
        Ok(())
    }

    pub fn decode(input: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 4];
        input.read_exact(&mut magic)?;
        if &magic != GT_MAGIC {
            return Err(Error::format("ofgt", format!("bad magic {magic:?}")));
        }
        let version = input.read_u32::<LE>()?;
        if version != GT_VERSION {
            return Err(Error::format("ofgt", format!("unsupported version {version}")));
        }
        let voxel_size = input.read_f64::<LE>()?;
        let class_count = input.read_u32::<LE>()?;
        let n = input.read_u32::<LE>()? as usize;
        let mut labels = Vec::with_capacity(n);
        for _ in 0..n {
            let coord = [input.read_i32::<LE>()?, input.read_i32::<LE>()?, input.read_i32::<LE>()?];
            let label = input.read_u32::<LE>()?;
            if label >= class_count {
                return Err(Error::format("ofgt", format!("label {label} exceeds class count {class_count}")));
            }
            labels.push(VoxelLabel { coord, label });
        }
        Ok(Self {
            voxel_size,
            class_count,
            labels,
        })
    }

    pub fn read_file(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::load(path, e.to_string()))?;
        Self::decode(&mut bytes.as_slice()).map_err(|e| Error::load(path, e.to_string()))
    }

    pub fn write_file(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.encode(&mut buf)?;
        std::fs::write(path, buf)?;
        Ok(())
    }
}

/// Paths produced by [`write_sequence`].
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticPaths {
    pub manifest: PathBuf,
    pub features: PathBuf,
    pub queries: PathBuf,
    pub ground_truth: PathBuf,
}

/// Writes a complete sequence directory: `manifest.txt`, `rgb/*.png`,
/// `depth/*.f32`, `features/<id>.ofrf`, `queries.ofqv`, `gt.ofgt` and
/// `scene.json`.
pub fn write_sequence(dir: &Path, spec: &SceneSpec, config: &VolumeConfig, resolution_factor: f64) -> Result<SyntheticPaths> {
    let scene = spec.build()?;
    let k = spec.intrinsics;
    k.validate()?;
    for sub in ["rgb", "depth", "features"] {
        std::fs::create_dir_all(dir.join(sub))?;
    }
    let features_dir = dir.join("features");
    let mut frames = Vec::with_capacity(scene.trajectory.len());
    for i in 0..scene.trajectory.len() {
        let (frame, features) = scene.render_frame(&k, i, resolution_factor)?;
        let rgb = dir.join("rgb").join(format!("{i:06}.png"));
        let depth = dir.join("depth").join(format!("{i:06}.f32"));
        write_color_png(&rgb, &frame.rgb)?;
        write_depth_f32(&depth, &frame.depth)?;
        features.write_file(&feature_path(&features_dir, frame.frame_id))?;
        frames.push(FrameEntry {
            frame_id: frame.frame_id,
            timestamp: frame.timestamp,
            rgb,
            depth,
            pose: frame.pose,
        });
    }
    let manifest = SequenceManifest {
        intrinsics: k,
        depth_scale: 0.001,
        frames,
        feature_dir: Some(features_dir.clone()),
        dropped_images: 0,
    };
    let paths = SyntheticPaths {
        manifest: dir.join("manifest.txt"),
        features: features_dir,
        queries: dir.join("queries.ofqv"),
        ground_truth: dir.join("gt.ofgt"),
    };
    std::fs::write(&paths.manifest, manifest.to_text(dir))?;
    write_query_file(&paths.queries, &scene.queries()?)?;
    scene.ground_truth(config).write_file(&paths.ground_truth)?;
    std::fs::write(dir.join("scene.json"), serde_json::to_string_pretty(spec)?)?;
    Ok(paths)
}
