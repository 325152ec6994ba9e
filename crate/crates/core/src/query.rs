//! Open-vocabulary queries against the embedding dictionary.
//!
//! Ranking touches only the dictionary, so its cost is `O(entries * d)`
//! regardless of how many voxels the volume holds. Geometry for a chosen
//! region is pulled from the volume afterwards.

use std::collections::{BTreeSet, HashMap};
use std::io::{Read, Write};
use std::path::Path;

use byteorder::{ReadBytesExt, WriteBytesExt, LE};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Point3;
use crate::semantic::{EmbeddingDictionary, RegionKey};
use crate::tsdf::{extract_mesh_where, SparseVolume, TriangleMesh, VoxelCoord};

pub const QUERY_MAGIC: &[u8; 4] = b"OFQV";
pub const QUERY_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuerySource {
    Text,
    Image,
    Raw,
}

/// Unit-norm query embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryVector {
    values: Vec<f32>,
    pub source: QuerySource,
}

impl QueryVector {
    pub fn new(values: Vec<f32>, source: QuerySource) -> Result<Self> {
        let norm = values.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>().sqrt();
        if values.is_empty() || !(norm.is_finite() && norm > 0.0) {
            return Err(Error::invalid("query vector must be non-empty with positive finite norm"));
        }
        let values = values.into_iter().map(|x| (x as f64 / norm) as f32).collect();
        Ok(Self { values, source })
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RankedRegion {
    pub key: RegionKey,
    pub score: f64,
}

#[inline]
fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum()
}

fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let na = dot(a, a).sqrt();
    let nb = dot(b, b).sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        (dot(a, b) / (na * nb)).clamp(-1.0, 1.0)
    }
}

/// Top `top_k` dictionary regions by cosine similarity, descending, ties
/// broken by the smaller key. An empty dictionary yields an empty ranking.
pub fn rank_regions(dict: &EmbeddingDictionary, query: &QueryVector, top_k: usize) -> Result<Vec<RankedRegion>> {
    if dict.is_empty() {
        return Ok(Vec::new());
    }
    if dict.dim() != query.dim() {
        return Err(Error::invalid(format!(
            "query has dimension {}, dictionary holds {}",
            query.dim(),
            dict.dim()
        )));
    }
    let mut ranked: Vec<RankedRegion> = dict
        .iter()
        .map(|e| RankedRegion {
            key: e.key,
            score: cosine(e.embedding, query.values()),
        })
        .collect();
    let order = |a: &RankedRegion, b: &RankedRegion| b.score.total_cmp(&a.score).then(a.key.cmp(&b.key));
    let k = top_k.min(ranked.len());
    if k == 0 {
        return Ok(Vec::new());
    }
    if k < ranked.len() {
        ranked.select_nth_unstable_by(k - 1, order);
        ranked.truncate(k);
    }
    ranked.sort_unstable_by(order);
    Ok(ranked)
}

/// Like [`rank_regions`] but drops results scoring below `min_score`.
pub fn rank_regions_above(
    dict: &EmbeddingDictionary,
    query: &QueryVector,
    top_k: usize,
    min_score: f64,
) -> Result<Vec<RankedRegion>> {
    let mut ranked = rank_regions(dict, query, top_k)?;
    ranked.retain(|r| r.score >= min_score);
    Ok(ranked)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExtractMode {
    Mesh,
    Voxels,
}

#[derive(Debug, Clone, PartialEq)]
pub enum RegionGeometry {
    Mesh(TriangleMesh),
    Voxels(Vec<Point3>),
}

impl RegionGeometry {
    pub fn is_empty(&self) -> bool {
        match self {
            RegionGeometry::Mesh(m) => m.is_empty(),
            RegionGeometry::Voxels(v) => v.is_empty(),
        }
    }
}

/// Geometry of one region: the voxel centers carrying `key`, or the
/// marching-cubes surface of the blocks holding them restricted to
/// triangles whose nearest voxel carries `key`.
pub fn extract_region(
    volume: &SparseVolume,
    dict: &EmbeddingDictionary,
    key: RegionKey,
    mode: ExtractMode,
) -> Result<RegionGeometry> {
    if !dict.contains(key) {
        return Err(Error::NotFound(format!("region key {key}")));
    }
    match mode {
        ExtractMode::Voxels => {
            let mut points = Vec::new();
            for index in volume.sorted_indices() {
                let block = volume.block(&index).unwrap();
                for (i, v) in block.voxels().iter().enumerate() {
                    if v.has_semantics() && v.semantic_key == Some(key) {
                        points.push(volume.voxel_position(block.global_coord(i)));
                    }
                }
            }
            Ok(RegionGeometry::Voxels(points))
        }
        ExtractMode::Mesh => {
            let blocks: Vec<_> = volume
                .sorted_indices()
                .into_iter()
                .filter(|b| {
                    volume
                        .block(b)
                        .unwrap()
                        .voxels()
                        .iter()
                        .any(|v| v.has_semantics() && v.semantic_key == Some(key))
                })
                .collect();
            let mesh = extract_mesh_where(volume, &blocks, |vol, centroid| {
                let c = vol.nearest_voxel(centroid);
                vol.voxel(c)
                    .is_some_and(|v| v.has_semantics() && v.semantic_key == Some(key))
            });
            Ok(RegionGeometry::Mesh(mesh))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VoxelLabel {
    pub coord: VoxelCoord,
    pub label: u32,
}

/// Labels every semantic voxel with the index of the query most similar to
/// its region's embedding (ties go to the lower query index). Output is in
/// ascending block order.
pub fn segment_all(
    volume: &SparseVolume,
    dict: &EmbeddingDictionary,
    queries: &[QueryVector],
) -> Result<Vec<VoxelLabel>> {
    if queries.is_empty() {
        return Err(Error::invalid("segment_all needs at least one query"));
    }
    if !dict.is_empty() {
        if let Some(q) = queries.iter().find(|q| q.dim() != dict.dim()) {
            return Err(Error::invalid(format!(
                "query has dimension {}, dictionary holds {}",
                q.dim(),
                dict.dim()
            )));
        }
    }
    let labels = region_labels(dict, queries);
    let mut out = Vec::new();
    for index in volume.sorted_indices() {
        let block = volume.block(&index).unwrap();
        for (i, v) in block.voxels().iter().enumerate() {
            if !v.has_semantics() {
                continue;
            }
            let key = v.semantic_key.unwrap();
            let label = *labels
                .get(&key)
                .ok_or_else(|| Error::NotFound(format!("voxel key {key} missing from dictionary")))?;
            out.push(VoxelLabel {
                coord: block.global_coord(i),
                label,
            });
        }
    }
    Ok(out)
}

/// Query index assigned to each dictionary key.
pub fn region_labels(dict: &EmbeddingDictionary, queries: &[QueryVector]) -> HashMap<RegionKey, u32> {
    dict.iter()
        .map(|e| {
            let mut best = (0u32, f64::NEG_INFINITY);
            for (qi, q) in queries.iter().enumerate() {
                let s = cosine(e.embedding, q.values());
                if s > best.1 {
                    best = (qi as u32, s);
                }
            }
            (e.key, best.0)
        })
        .collect()
}

/// Distinct keys present in the volume.
pub fn keys_in_volume(volume: &SparseVolume) -> BTreeSet<RegionKey> {
    volume
        .blocks()
        .flat_map(|b| b.voxels().iter())
        .filter(|v| v.has_semantics())
        .filter_map(|v| v.semantic_key)
        .collect()
}

/// `.ofqv`: magic `OFQV`, `u32` version, `u32` count, `u32` d, then
/// `count*d` `f32` little-endian.
pub fn write_queries(out: &mut impl Write, queries: &[QueryVector]) -> Result<()> {
    let dim = queries.first().map_or(0, |q| q.dim());
    if queries.iter().any(|q| q.dim() != dim) {
        return Err(Error::invalid("all queries in a file must share one dimension"));
    }
    out.write_all(QUERY_MAGIC)?;
    out.write_u32::<LE>(QUERY_VERSION)?;
    out.write_u32::<LE>(queries.len() as u32)?;
    out.write_u32::<LE>(dim as u32)?;
    for q in queries {
        for &x in q.values() {
            out.write_f32::<LE>(x)?;
        }
    }
    Ok(())
}

pub fn read_queries(input: &mut impl Read, source: QuerySource) -> Result<Vec<QueryVector>> {
    let mut magic = [0u8; 4];
    input.read_exact(&mut magic)?;
    if &magic != QUERY_MAGIC {
        return Err(Error::format("ofqv", format!("bad magic {magic:?}")));
    }
    let version = input.read_u32::<LE>()?;
    if version != QUERY_VERSION {
        return Err(Error::format("ofqv", format!("unsupported version {version}")));
    }
    let count = input.read_u32::<LE>()? as usize;
    let dim = input.read_u32::<LE>()? as usize;
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let mut v = vec![0f32; dim];
        input.read_f32_into::<LE>(&mut v)?;
        out.push(QueryVector::new(v, source).map_err(|e| Error::format("ofqv", format!("query {i}: {e}")))?);
    }
    Ok(out)
}

pub fn read_query_file(path: &Path) -> Result<Vec<QueryVector>> {
    let bytes = std::fs::read(path).map_err(|e| Error::load(path, e.to_string()))?;
    read_queries(&mut bytes.as_slice(), QuerySource::Raw).map_err(|e| Error::load(path, e.to_string()))
}

pub fn write_query_file(path: &Path, queries: &[QueryVector]) -> Result<()> {
    let mut buf = Vec::new();
    write_queries(&mut buf, queries)?;
    std::fs::write(path, buf)?;
    Ok(())
}
