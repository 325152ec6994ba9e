use std::collections::HashMap;

use super::tables::{EDGE_TABLE, TRI_TABLE};
use super::{BlockIndex, FixedState, SparseVolume, Voxel, VoxelCoord};
use crate::geometry::Point3;

/// Indexed triangle mesh with per-vertex color.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TriangleMesh {
    pub vertices: Vec<Point3>,
    pub colors: Vec<[f32; 3]>,
    pub triangles: Vec<[u32; 3]>,
}

impl TriangleMesh {
    pub fn is_empty(&self) -> bool {
        self.triangles.is_empty()
    }

    /// Number of distinct undirected edges.
    pub fn edge_count(&self) -> usize {
        let mut edges = std::collections::HashSet::new();
        for t in &self.triangles {
            for (a, b) in [(t[0], t[1]), (t[1], t[2]), (t[2], t[0])] {
                edges.insert((a.min(b), a.max(b)));
            }
        }
        edges.len()
    }

    /// `V - E + F`.
    pub fn euler_characteristic(&self) -> i64 {
        self.vertices.len() as i64 - self.edge_count() as i64 + self.triangles.len() as i64
    }
}

const CORNERS: [[i32; 3]; 8] = [
    [0, 0, 0],
    [1, 0, 0],
    [1, 1, 0],
    [0, 1, 0],
    [0, 0, 1],
    [1, 0, 1],
    [1, 1, 1],
    [0, 1, 1],
];

const EDGES: [(usize, usize); 12] = [
    (0, 1),
    (1, 2),
    (2, 3),
    (3, 0),
    (4, 5),
    (5, 6),
    (6, 7),
    (7, 4),
    (0, 4),
    (1, 5),
    (2, 6),
    (3, 7),
];

/// Marching cubes over the zero level set of every observed voxel.
pub fn extract_mesh(volume: &SparseVolume) -> TriangleMesh {
    extract_mesh_where(volume, &volume.sorted_indices(), |_, _| true)
}

/// Marching cubes over the cubes anchored in `blocks`, keeping only the
/// triangles accepted by `keep(volume, centroid)`.
pub(crate) fn extract_mesh_where(
    volume: &SparseVolume,
    blocks: &[BlockIndex],
    mut keep: impl FnMut(&SparseVolume, &Point3) -> bool,
) -> TriangleMesh {
    let mut mesh = TriangleMesh::default();
    let mut edge_vertices: HashMap<(VoxelCoord, u8), u32, FixedState> = HashMap::default();
    let r = volume.config().block_resolution;
    let ri = r as i32;

    for index in blocks {
        if volume.block(index).is_none() {
            continue;
        }
        // Neighbor blocks in +x/+y/+z, indexed by bit pattern.
        let neighbors: [Option<&super::VoxelBlock>; 8] = std::array::from_fn(|bits| {
            let off = [(bits & 1) as i32, ((bits >> 1) & 1) as i32, ((bits >> 2) & 1) as i32];
            volume.block(&index.offset(off[0], off[1], off[2]))
        });
        let fetch = |a: usize, b: usize, c: usize| -> Option<&Voxel> {
            let bits = (a / r) | ((b / r) << 1) | ((c / r) << 2);
            neighbors[bits].map(|blk| blk.get(a % r, b % r, c % r))
        };

        for c in 0..r {
            for b in 0..r {
                for a in 0..r {
                    let mut corners = [Voxel::empty(0.0); 8];
                    let mut complete = true;
                    for (slot, off) in corners.iter_mut().zip(CORNERS.iter()) {
                        match fetch(a + off[0] as usize, b + off[1] as usize, c + off[2] as usize) {
                            Some(v) if v.is_observed() => *slot = *v,
                            _ => {
                                complete = false;
                                break;
                            }
                        }
                    }
                    if !complete {
                        continue;
                    }
                    let mut case = 0usize;
                    for (i, v) in corners.iter().enumerate() {
                        if v.tsdf < 0.0 {
                            case |= 1 << i;
                        }
                    }
                    let edge_mask = EDGE_TABLE[case];
                    if edge_mask == 0 {
                        continue;
                    }
                    let origin = [index.x * ri + a as i32, index.y * ri + b as i32, index.z * ri + c as i32];
                    let mut cube_vertices = [u32::MAX; 12];
                    for (e, &(ca, cb)) in EDGES.iter().enumerate() {
                        if edge_mask & (1 << e) == 0 {
                            continue;
                        }
                        let pa = add(origin, CORNERS[ca]);
                        let pb = add(origin, CORNERS[cb]);
                        let (lo, axis) = edge_key(pa, pb);
                        let id = *edge_vertices.entry((lo, axis)).or_insert_with(|| {
                            let (va, vb) = (&corners[ca], &corners[cb]);
                            let t = interpolation_weight(va.tsdf, vb.tsdf);
                            let xa = volume.voxel_position(pa);
                            let xb = volume.voxel_position(pb);
                            mesh.vertices.push(xa + (xb - xa) * t);
                            let tf = t as f32;
                            mesh.colors.push(std::array::from_fn(|ch| va.rgb[ch] + (vb.rgb[ch] - va.rgb[ch]) * tf));
                            (mesh.vertices.len() - 1) as u32
                        });
                        cube_vertices[e] = id;
                    }
                    for tri in TRI_TABLE[case].chunks(3) {
                        if tri[0] < 0 {
                            break;
                        }
                        let t = [
                            cube_vertices[tri[0] as usize],
                            cube_vertices[tri[1] as usize],
                            cube_vertices[tri[2] as usize],
                        ];
                        if t[0] == t[1] || t[1] == t[2] || t[0] == t[2] {
                            continue;
                        }
                        let centroid = Point3::from(
                            (mesh.vertices[t[0] as usize].coords
                                + mesh.vertices[t[1] as usize].coords
                                + mesh.vertices[t[2] as usize].coords)
                                / 3.0,
                        );
                        if keep(volume, &centroid) {
                            mesh.triangles.push(t);
                        }
                    }
                }
            }
        }
    }
    compact(&mut mesh);
    mesh
}

fn add(a: VoxelCoord, b: [i32; 3]) -> VoxelCoord {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

fn edge_key(a: VoxelCoord, b: VoxelCoord) -> (VoxelCoord, u8) {
    let axis = (0..3).find(|&i| a[i] != b[i]).unwrap_or(0) as u8;
    (if a < b { a } else { b }, axis)
}

fn interpolation_weight(fa: f32, fb: f32) -> f64 {
    let (fa, fb) = (fa as f64, fb as f64);
    let denom = fa - fb;
    if denom.abs() < 1e-12 {
        0.5
    } else {
        (fa / denom).clamp(0.0, 1.0)
    }
}

/// Drops vertices no longer referenced after triangle filtering.
fn compact(mesh: &mut TriangleMesh) {
    let mut used = vec![false; mesh.vertices.len()];
    for t in &mesh.triangles {
        for &i in t {
            used[i as usize] = true;
        }
    }
    if used.iter().all(|&u| u) {
        return;
    }
    let mut remap = vec![u32::MAX; mesh.vertices.len()];
    let mut vertices = Vec::new();
    let mut colors = Vec::new();
    for (i, keep) in used.iter().enumerate() {
        if *keep {
            remap[i] = vertices.len() as u32;
            vertices.push(mesh.vertices[i]);
            colors.push(mesh.colors[i]);
        }
    }
    for t in mesh.triangles.iter_mut() {
        for i in t.iter_mut() {
            *i = remap[*i as usize];
        }
    }
    mesh.vertices = vertices;
    mesh.colors = colors;
}
