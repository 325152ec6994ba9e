//! Snapshot and mesh files.
//!
//! A snapshot directory holds `volume.bin`, `dict.bin`, `report.json` and
//! `mesh.ply`. All binary data is little-endian.
//!
//! `volume.bin`: magic `OFVB`, `u32` version, then the volume config
//! (`f64` voxel size, `u32` block resolution, `f64` truncation, `f64`
//! semantic band, `f64` depth max, `f32` max weight with NaN for none),
//! `u64` frame count, `u32` block count, and per block in ascending index
//! order three `i32` block coordinates followed by `r^3` voxels of
//! `rgb: 3 x f32, weight: f32, tsdf: f32, key: u32 (u32::MAX = none),
//! confidence: f32, semantic_weight: f32`.
//!
//! `dict.bin`: magic `OFDT`, `u32` version, `u32` count, `u32` d, and per
//! entry in key order `u32` observation count, `u64` created frame and
//! `d x f32` embedding.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{ReadBytesExt, WriteBytesExt, LE};

use crate::error::{Error, Result};
use crate::semantic::{EmbeddingDictionary, RegionKey};
use crate::tsdf::{BlockIndex, SparseVolume, SurfacePoint, TriangleMesh, Voxel, VoxelBlock, VolumeConfig};

pub const VOLUME_MAGIC: &[u8; 4] = b"OFVB";
pub const DICT_MAGIC: &[u8; 4] = b"OFDT";
pub const SNAPSHOT_VERSION: u32 = 1;

pub const VOLUME_FILE: &str = "volume.bin";
pub const DICT_FILE: &str = "dict.bin";
pub const REPORT_FILE: &str = "report.json";
pub const MESH_FILE: &str = "mesh.ply";

fn check_header(input: &mut impl Read, magic: &[u8; 4], format: &'static str) -> Result<()> {
    let mut m = [0u8; 4];
    input.read_exact(&mut m)?;
    if &m != magic {
        return Err(Error::format(format, format!("bad magic {m:?}")));
    }
    let version = input.read_u32::<LE>()?;
    if version != SNAPSHOT_VERSION {
        return Err(Error::format(format, format!("unsupported version {version}")));
    }
    Ok(())
}

pub fn write_volume(out: &mut impl Write, volume: &SparseVolume) -> Result<()> {
    let cfg = volume.config();
    out.write_all(VOLUME_MAGIC)?;
    out.write_u32::<LE>(SNAPSHOT_VERSION)?;
    out.write_f64::<LE>(cfg.voxel_size)?;
    out.write_u32::<LE>(cfg.block_resolution as u32)?;
    out.write_f64::<LE>(cfg.truncation)?;
    out.write_f64::<LE>(cfg.semantic_band)?;
    out.write_f64::<LE>(cfg.depth_max)?;
    out.write_f32::<LE>(cfg.max_weight.unwrap_or(f32::NAN))?;
    out.write_u64::<LE>(volume.frame_count())?;
    let indices = volume.sorted_indices();
    out.write_u32::<LE>(indices.len() as u32)?;
    for index in indices {
        out.write_i32::<LE>(index.x)?;
        out.write_i32::<LE>(index.y)?;
        out.write_i32::<LE>(index.z)?;
        for v in volume.block(&index).unwrap().voxels() {
            for c in v.rgb {
                out.write_f32::<LE>(c)?;
            }
            out.write_f32::<LE>(v.weight)?;
            out.write_f32::<LE>(v.tsdf)?;
            out.write_u32::<LE>(v.semantic_key.map_or(u32::MAX, |k| k.0))?;
            out.write_f32::<LE>(v.confidence)?;
            out.write_f32::<LE>(v.semantic_weight)?;
        }
    }
    Ok(())
}

pub fn read_volume(input: &mut impl Read) -> Result<SparseVolume> {
    check_header(input, VOLUME_MAGIC, "volume")?;
    let voxel_size = input.read_f64::<LE>()?;
    let block_resolution = input.read_u32::<LE>()? as usize;
    let truncation = input.read_f64::<LE>()?;
    let semantic_band = input.read_f64::<LE>()?;
    let depth_max = input.read_f64::<LE>()?;
    let max_weight = input.read_f32::<LE>()?;
    let config = VolumeConfig {
        voxel_size,
        block_resolution,
        truncation,
        semantic_band,
        depth_max,
        max_weight: (!max_weight.is_nan()).then_some(max_weight),
    };
    let mut volume = SparseVolume::new(config).map_err(|e| Error::format("volume", e.to_string()))?;
    volume.set_frame_count(input.read_u64::<LE>()?);
    let blocks = input.read_u32::<LE>()?;
    let n = block_resolution.pow(3);
    for _ in 0..blocks {
        let index = BlockIndex::new(input.read_i32::<LE>()?, input.read_i32::<LE>()?, input.read_i32::<LE>()?);
        let mut voxels = Vec::with_capacity(n);
        for _ in 0..n {
            let rgb = [input.read_f32::<LE>()?, input.read_f32::<LE>()?, input.read_f32::<LE>()?];
            let weight = input.read_f32::<LE>()?;
            let tsdf = input.read_f32::<LE>()?;
            let key = input.read_u32::<LE>()?;
            voxels.push(Voxel {
                rgb,
                weight,
                tsdf,
                semantic_key: (key != u32::MAX).then_some(RegionKey(key)),
                confidence: input.read_f32::<LE>()?,
                semantic_weight: input.read_f32::<LE>()?,
            });
        }
        if volume.block(&index).is_some() {
            return Err(Error::format("volume", format!("duplicate block {index:?}")));
        }
        volume.insert_block(VoxelBlock::from_voxels(index, block_resolution, voxels)?);
    }
    Ok(volume)
}

pub fn write_dictionary(out: &mut impl Write, dict: &EmbeddingDictionary) -> Result<()> {
    out.write_all(DICT_MAGIC)?;
    out.write_u32::<LE>(SNAPSHOT_VERSION)?;
    out.write_u32::<LE>(dict.len() as u32)?;
    out.write_u32::<LE>(dict.dim() as u32)?;
    for e in dict.iter() {
        out.write_u32::<LE>(e.observation_count)?;
        out.write_u64::<LE>(e.created_frame)?;
        for &x in e.embedding {
            out.write_f32::<LE>(x)?;
        }
    }
    Ok(())
}

pub fn read_dictionary(input: &mut impl Read) -> Result<EmbeddingDictionary> {
    check_header(input, DICT_MAGIC, "dictionary")?;
    let count = input.read_u32::<LE>()?;
    let dim = input.read_u32::<LE>()? as usize;
    let mut dict = EmbeddingDictionary::with_dim(dim);
    let mut embedding = vec![0f32; dim];
    for _ in 0..count {
        let observations = input.read_u32::<LE>()?;
        let frame = input.read_u64::<LE>()?;
        input.read_f32_into::<LE>(&mut embedding)?;
        dict.insert_with_count(&embedding, frame, observations)?;
    }
    Ok(dict)
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).map_err(|e| Error::load(path, e.to_string()))?))
}

fn open(path: &Path) -> Result<BufReader<File>> {
    Ok(BufReader::new(File::open(path).map_err(|e| Error::load(path, e.to_string()))?))
}

/// Writes `volume.bin`, `dict.bin` and `mesh.ply` into `dir`, creating it.
pub fn save_snapshot(dir: &Path, volume: &SparseVolume, dict: &EmbeddingDictionary) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut out = create(&dir.join(VOLUME_FILE))?;
    write_volume(&mut out, volume)?;
    out.flush()?;
    let mut out = create(&dir.join(DICT_FILE))?;
    write_dictionary(&mut out, dict)?;
    out.flush()?;
    write_mesh_ply(&dir.join(MESH_FILE), &crate::tsdf::extract_mesh(volume))?;
    Ok(())
}

pub fn load_snapshot(dir: &Path) -> Result<(SparseVolume, EmbeddingDictionary)> {
    let path = dir.join(VOLUME_FILE);
    let volume = read_volume(&mut open(&path)?).map_err(|e| Error::load(&path, e.to_string()))?;
    let path = dir.join(DICT_FILE);
    let dict = read_dictionary(&mut open(&path)?).map_err(|e| Error::load(&path, e.to_string()))?;
    Ok((volume, dict))
}

fn to_u8(c: f32) -> u8 {
    (c.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Binary little-endian PLY with float positions, uchar colors and
/// triangle faces.
pub fn write_mesh_ply(path: &Path, mesh: &TriangleMesh) -> Result<()> {
    let mut out = create(path)?;
    write!(
        out,
        "ply\nformat binary_little_endian 1.0\nelement vertex {}\n\
         property float x\nproperty float y\nproperty float z\n\
         property uchar red\nproperty uchar green\nproperty uchar blue\n\
         element face {}\nproperty list uchar uint vertex_indices\nend_header\n",
        mesh.vertices.len(),
        mesh.triangles.len()
    )?;
    for (p, c) in mesh.vertices.iter().zip(&mesh.colors) {
        for x in [p.x, p.y, p.z] {
            out.write_f32::<LE>(x as f32)?;
        }
        for ch in c {
            out.write_u8(to_u8(*ch))?;
        }
    }
    for t in &mesh.triangles {
        out.write_u8(3)?;
        for &i in t {
            out.write_u32::<LE>(i)?;
        }
    }
    out.flush()?;
    Ok(())
}

/// Binary PLY point cloud; `region` is `u32::MAX` for voxels without a key.
pub fn write_point_cloud_ply(path: &Path, points: &[SurfacePoint]) -> Result<()> {
    let mut out = create(path)?;
    write!(
        out,
        "ply\nformat binary_little_endian 1.0\nelement vertex {}\n\
         property float x\nproperty float y\nproperty float z\n\
         property uchar red\nproperty uchar green\nproperty uchar blue\n\
         property uint region\nproperty float confidence\nend_header\n",
        points.len()
    )?;
    for p in points {
        for x in [p.position.x, p.position.y, p.position.z] {
            out.write_f32::<LE>(x as f32)?;
        }
        for ch in p.rgb {
            out.write_u8(to_u8(ch))?;
        }
        out.write_u32::<LE>(p.semantic_key.map_or(u32::MAX, |k| k.0))?;
        out.write_f32::<LE>(p.confidence)?;
    }
    out.flush()?;
    Ok(())
}

/// Binary PLY of bare positions, used for voxel-mode region extraction.
pub fn write_points_ply(path: &Path, points: &[crate::geometry::Point3]) -> Result<()> {
    let mut out = create(path)?;
    write!(
        out,
        "ply\nformat binary_little_endian 1.0\nelement vertex {}\n\
         property float x\nproperty float y\nproperty float z\nend_header\n",
        points.len()
    )?;
    for p in points {
        for x in [p.x, p.y, p.z] {
            out.write_f32::<LE>(x as f32)?;
        }
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_volume() -> SparseVolume {
        let mut cfg = VolumeConfig::with_voxel_size(0.05);
        cfg.max_weight = Some(50.0);
        let mut vol = SparseVolume::new(cfg).unwrap();
        for (i, b) in [BlockIndex::new(0, 0, 0), BlockIndex::new(-1, 2, 3)].into_iter().enumerate() {
            let blk = vol.ensure_block(b);
            for (j, v) in blk.voxels_mut().iter_mut().enumerate() {
                v.weight = (j % 3) as f32;
                v.tsdf = 0.001 * j as f32 - 0.1;
                v.rgb = [0.1, 0.2, i as f32];
                if j % 5 == 0 {
                    v.semantic_key = Some(RegionKey(j as u32 % 7));
                    v.confidence = 0.6;
                    v.semantic_weight = 2.0;
                }
            }
        }
        vol.set_frame_count(9);
        vol
    }

    fn volumes_equal(a: &SparseVolume, b: &SparseVolume) -> bool {
        a.config() == b.config()
            && a.frame_count() == b.frame_count()
            && a.sorted_indices() == b.sorted_indices()
            && a.sorted_indices().iter().all(|i| a.block(i).unwrap().voxels() == b.block(i).unwrap().voxels())
    }

    #[test]
    fn volume_round_trip() {
        let vol = sample_volume();
        let mut buf = Vec::new();
        write_volume(&mut buf, &vol).unwrap();
        let back = read_volume(&mut buf.as_slice()).unwrap();
        assert!(volumes_equal(&vol, &back));
        let mut again = Vec::new();
        write_volume(&mut again, &back).unwrap();
        assert_eq!(buf, again);
    }

    #[test]
    fn dictionary_round_trip() {
        let mut dict = EmbeddingDictionary::new();
        dict.insert(&[0.6, 0.8], 3).unwrap();
        dict.insert(&[1.0, 0.0], 5).unwrap();
        dict.record_observation(RegionKey(1)).unwrap();
        let mut buf = Vec::new();
        write_dictionary(&mut buf, &dict).unwrap();
        let back = read_dictionary(&mut buf.as_slice()).unwrap();
        assert_eq!(back.embeddings(), dict.embeddings());
        assert_eq!(back.get(RegionKey(1)).unwrap().observation_count, 2);
        assert_eq!(back.get(RegionKey(0)).unwrap().created_frame, 3);
    }

    #[test]
    fn truncated_or_foreign_files_are_rejected() {
        let mut buf = Vec::new();
        write_volume(&mut buf, &sample_volume()).unwrap();
        assert!(read_volume(&mut &buf[..buf.len() - 3]).is_err());
        assert!(read_dictionary(&mut buf.as_slice()).is_err());
    }

    #[test]
    fn snapshot_directory_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let vol = sample_volume();
        let dict = EmbeddingDictionary::new();
        save_snapshot(dir.path(), &vol, &dict).unwrap();
        let (v2, d2) = load_snapshot(dir.path()).unwrap();
        assert!(volumes_equal(&vol, &v2));
        assert!(d2.is_empty());
        let ply = std::fs::read(dir.path().join(MESH_FILE)).unwrap();
        assert!(ply.starts_with(b"ply\nformat binary_little_endian 1.0\n"));
    }

    #[test]
    fn ply_sizes_match_header() {
        let dir = tempfile::tempdir().unwrap();
        let mesh = TriangleMesh {
            vertices: vec![crate::geometry::Point3::origin(); 3],
            colors: vec![[1.0, 0.0, 0.0]; 3],
            triangles: vec![[0, 1, 2]],
        };
        let path = dir.path().join("m.ply");
        write_mesh_ply(&path, &mesh).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let header_end = bytes.windows(11).position(|w| w == b"end_header\n").unwrap() + 11;
        assert_eq!(bytes.len() - header_end, 3 * 15 + 13);
    }
}
