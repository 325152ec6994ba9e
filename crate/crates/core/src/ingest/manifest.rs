//! Sequence manifest: a line-oriented key/value file describing the camera
//! and the frames of an RGB-D sequence.
//!
//! ```text
//! semfuse-manifest 1
//! intrinsics <fx> <fy> <cx> <cy> <width> <height>
//! depth_scale 0.001                # meters per stored unit for 16-bit PNG depth
//! features features                # optional directory of <frame_id>.ofrf files
//! frame <t> <rgb> <depth> <r00 r01 r02 t0 r10 r11 r12 t1 r20 r21 r22 t2>
//! ```
//!
//! Poses are row-major `[R | t]` mapping world to camera. Instead of `frame`
//! lines, a manifest may list unposed `image <t> <rgb> <depth>` lines plus a
//! separate `pose <t> <12 values>` stream; the two are paired by
//! timestamp within `sync_window` seconds (default 0.010). Paths are
//! relative to the manifest's directory. Frame ids count `frame` (or
//! `image`) lines from 0. Depth files ending in `.png` are 16-bit scaled by
//! `depth_scale`; `.f32` files hold raw little-endian meters.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use byteorder::{ByteOrder, LE};

use super::{synchronize, FrameObservation};
use crate::error::{Error, Result};
use crate::geometry::{CameraIntrinsics, ColorImage, DepthImage, Pose};

pub const MANIFEST_HEADER: &str = "semfuse-manifest 1";
const DEFAULT_SYNC_WINDOW: f64 = 0.010;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DepthFormat {
    Png16,
    RawF32,
}

impl DepthFormat {
    pub fn from_path(path: &Path) -> Result<Self> {
        match path.extension().and_then(|e| e.to_str()).map(|e| e.to_ascii_lowercase()) {
            Some(e) if e == "png" => Ok(DepthFormat::Png16),
            Some(e) if e == "f32" || e == "raw" => Ok(DepthFormat::RawF32),
            _ => Err(Error::load(path, "unrecognized depth format (expected .png or .f32)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameEntry {
    pub frame_id: u64,
    pub timestamp: f64,
    pub rgb: PathBuf,
    pub depth: PathBuf,
    pub pose: Pose,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SequenceManifest {
    pub intrinsics: CameraIntrinsics,
    pub depth_scale: f64,
    pub frames: Vec<FrameEntry>,
    pub feature_dir: Option<PathBuf>,
    /// Images dropped by timestamp pairing.
    pub dropped_images: usize,
}

impl SequenceManifest {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn read_frame(&self, index: usize) -> Result<FrameObservation> {
        let entry = self
            .frames
            .get(index)
            .ok_or_else(|| Error::NotFound(format!("frame index {index}")))?;
        let k = &self.intrinsics;
        let rgb = read_color(&entry.rgb)?;
        let depth = read_depth(&entry.depth, k.width, k.height, self.depth_scale)?;
        let frame = FrameObservation::new(entry.frame_id, entry.timestamp, rgb, depth, entry.pose)
            .map_err(|e| Error::load(&entry.rgb, e.to_string()))?;
        frame.check_intrinsics(k).map_err(|e| Error::load(&entry.rgb, e.to_string()))?;
        Ok(frame)
    }

    /// Frames in timestamp order, read lazily.
    pub fn frames(&self) -> impl Iterator<Item = Result<FrameObservation>> + '_ {
        (0..self.frames.len()).map(move |i| self.read_frame(i))
    }

    /// Renders the manifest text for `frames` with paths relative to `root`.
    pub fn to_text(&self, root: &Path) -> String {
        let k = &self.intrinsics;
        let mut s = String::new();
        let _ = writeln!(s, "{MANIFEST_HEADER}");
        let _ = writeln!(s, "intrinsics {} {} {} {} {} {}", k.fx, k.fy, k.cx, k.cy, k.width, k.height);
        let _ = writeln!(s, "depth_scale {}", self.depth_scale);
        if let Some(dir) = &self.feature_dir {
            let _ = writeln!(s, "features {}", relative(dir, root).display());
        }
        for f in &self.frames {
            let pose: Vec<String> = f.pose.to_row_major().iter().map(|x| format!("{x:?}")).collect();
            let _ = writeln!(
                s,
                "frame {:?} {} {} {}",
                f.timestamp,
                relative(&f.rgb, root).display(),
                relative(&f.depth, root).display(),
                pose.join(" ")
            );
        }
        s
    }
}

fn relative(path: &Path, root: &Path) -> PathBuf {
    path.strip_prefix(root).map(Path::to_path_buf).unwrap_or_else(|_| path.to_path_buf())
}

fn parse_f64(tok: &str, what: &str, path: &Path, line: usize) -> Result<f64> {
    tok.parse::<f64>()
        .map_err(|_| Error::load(path, format!("line {line}: cannot parse {what} from {tok:?}")))
}

fn parse_pose(tokens: &[&str], t: f64, path: &Path, line: usize, what: &str) -> Result<Pose> {
    if tokens.len() != 12 {
        return Err(Error::load(
            path,
            format!("line {line}: {what}: missing pose (expected 12 values, found {})", tokens.len()),
        ));
    }
    let mut v = [0.0; 12];
    for (slot, tok) in v.iter_mut().zip(tokens) {
        *slot = parse_f64(tok, "pose value", path, line)?;
    }
    Pose::from_row_major(&v, t).map_err(|e| Error::load(path, format!("line {line}: {what}: {e}")))
}

/// Parses and validates a manifest. Every referenced file must exist.
pub fn load_sequence(path: &Path) -> Result<SequenceManifest> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::load(path, e.to_string()))?;
    let root = path.parent().unwrap_or(Path::new("."));
    let resolve = |p: &str| root.join(p);

    let mut intrinsics = None;
    let mut depth_scale = 0.001;
    let mut feature_dir = None;
    let mut sync_window = DEFAULT_SYNC_WINDOW;
    let mut frames: Vec<FrameEntry> = Vec::new();
    let mut images: Vec<(f64, (u64, PathBuf, PathBuf))> = Vec::new();
    let mut poses: Vec<Pose> = Vec::new();
    let mut saw_header = false;

    for (n, raw) in text.lines().enumerate() {
        let line_no = n + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        if !saw_header {
            if line != MANIFEST_HEADER {
                return Err(Error::load(path, format!("expected header {MANIFEST_HEADER:?}")));
            }
            saw_header = true;
            continue;
        }
        let tokens: Vec<&str> = line.split_whitespace().collect();
        match tokens[0] {
            "intrinsics" => {
                if tokens.len() != 7 {
                    return Err(Error::load(path, format!("line {line_no}: intrinsics needs 6 values")));
                }
                let f = |i: usize, what: &str| parse_f64(tokens[i], what, path, line_no);
                let size = |i: usize| {
                    tokens[i]
                        .parse::<usize>()
                        .map_err(|_| Error::load(path, format!("line {line_no}: bad image size {:?}", tokens[i])))
                };
                let k = CameraIntrinsics::new(f(1, "fx")?, f(2, "fy")?, f(3, "cx")?, f(4, "cy")?, size(5)?, size(6)?)
                    .map_err(|e| Error::load(path, format!("line {line_no}: {e}")))?;
                intrinsics = Some(k);
            }
            "depth_scale" => {
                let s = parse_f64(tokens.get(1).copied().unwrap_or(""), "depth_scale", path, line_no)?;
                if !(s > 0.0) {
                    return Err(Error::load(path, format!("line {line_no}: depth_scale must be positive")));
                }
                depth_scale = s;
            }
            "features" => {
                let dir = tokens
                    .get(1)
                    .ok_or_else(|| Error::load(path, format!("line {line_no}: features needs a directory")))?;
                feature_dir = Some(resolve(dir));
            }
            "sync_window" => {
                sync_window = parse_f64(tokens.get(1).copied().unwrap_or(""), "sync_window", path, line_no)?;
            }
            "frame" => {
                let id = frames.len() as u64;
                let what = format!("frame {id}");
                if tokens.len() < 4 {
                    return Err(Error::load(path, format!("line {line_no}: {what}: expected <t> <rgb> <depth> <pose>")));
                }
                let t = parse_f64(tokens[1], "timestamp", path, line_no)?;
                let pose = parse_pose(&tokens[4..], t, path, line_no, &what)?;
                frames.push(FrameEntry {
                    frame_id: id,
                    timestamp: t,
                    rgb: resolve(tokens[2]),
                    depth: resolve(tokens[3]),
                    pose,
                });
            }
            "image" => {
                if tokens.len() != 4 {
                    return Err(Error::load(path, format!("line {line_no}: image needs <t> <rgb> <depth>")));
                }
                let t = parse_f64(tokens[1], "timestamp", path, line_no)?;
                images.push((t, (images.len() as u64, resolve(tokens[2]), resolve(tokens[3]))));
            }
            "pose" => {
                let t = parse_f64(tokens.get(1).copied().unwrap_or(""), "timestamp", path, line_no)?;
                poses.push(parse_pose(&tokens[2..], t, path, line_no, "pose")?);
            }
            other => {
                return Err(Error::load(path, format!("line {line_no}: unknown key {other:?}")));
            }
        }
    }
    if !saw_header {
        return Err(Error::load(path, "empty manifest"));
    }
    let intrinsics = intrinsics.ok_or_else(|| Error::load(path, "missing intrinsics"))?;
    if !frames.is_empty() && !images.is_empty() {
        return Err(Error::load(path, "manifest mixes posed frame lines with image lines"));
    }

    let mut dropped_images = 0;
    if !images.is_empty() {
        check_ordered(images.iter().map(|i| i.0), path, "image")?;
        check_ordered(poses.iter().map(|p| p.timestamp), path, "pose")?;
        let pairs = synchronize(&images, &poses, sync_window);
        dropped_images = images.len() - pairs.len();
        frames = pairs
            .into_iter()
            .map(|p| {
                let (id, rgb, depth) = p.image;
                FrameEntry {
                    frame_id: id,
                    timestamp: p.image_time,
                    rgb,
                    depth,
                    pose: p.pose,
                }
            })
            .collect();
    }
    check_ordered(frames.iter().map(|f| f.timestamp), path, "frame")?;
    for f in &frames {
        for file in [&f.rgb, &f.depth] {
            if !file.is_file() {
                return Err(Error::load(path, format!("frame {}: missing file {}", f.frame_id, file.display())));
            }
        }
        DepthFormat::from_path(&f.depth)?;
    }
    if let Some(dir) = &feature_dir {
        if !dir.is_dir() {
            return Err(Error::load(path, format!("feature directory {} does not exist", dir.display())));
        }
    }
    Ok(SequenceManifest {
        intrinsics,
        depth_scale,
        frames,
        feature_dir,
        dropped_images,
    })
}

fn check_ordered(ts: impl Iterator<Item = f64>, path: &Path, what: &str) -> Result<()> {
    let mut prev = f64::NEG_INFINITY;
    for (i, t) in ts.enumerate() {
        if !(t >= prev) {
            return Err(Error::load(path, format!("{what} {i}: timestamp {t} is out of order")));
        }
        prev = t;
    }
    Ok(())
}

/// PNG or PPM color, converted to RGB in `[0, 1]`.
pub fn read_color(path: &Path) -> Result<ColorImage> {
    let img = image::open(path).map_err(|e| Error::load(path, e.to_string()))?.to_rgb8();
    let (w, h) = img.dimensions();
    let pixels = img
        .pixels()
        .map(|p| [p[0] as f32 / 255.0, p[1] as f32 / 255.0, p[2] as f32 / 255.0])
        .collect();
    ColorImage::new(w as usize, h as usize, pixels)
}

pub fn write_color_png(path: &Path, img: &ColorImage) -> Result<()> {
    let mut buf = image::RgbImage::new(img.width() as u32, img.height() as u32);
    for (dst, src) in buf.pixels_mut().zip(img.pixels()) {
        *dst = image::Rgb(src.map(|c| (c.clamp(0.0, 1.0) * 255.0).round() as u8));
    }
    buf.save(path)?;
    Ok(())
}

/// Reads depth in meters. 16-bit PNG values are multiplied by `scale`.
pub fn read_depth(path: &Path, width: usize, height: usize, scale: f64) -> Result<DepthImage> {
    let values = match DepthFormat::from_path(path)? {
        DepthFormat::Png16 => {
            let img = image::open(path).map_err(|e| Error::load(path, e.to_string()))?.to_luma16();
            if img.width() as usize != width || img.height() as usize != height {
                return Err(Error::load(
                    path,
                    format!("depth is {}x{}, expected {width}x{height}", img.width(), img.height()),
                ));
            }
            img.as_raw().iter().map(|&d| (d as f64 * scale) as f32).collect()
        }
        DepthFormat::RawF32 => {
            let bytes = std::fs::read(path).map_err(|e| Error::load(path, e.to_string()))?;
            if bytes.len() != width * height * 4 {
                return Err(Error::load(
                    path,
                    format!("raw depth has {} bytes, expected {}", bytes.len(), width * height * 4),
                ));
            }
            let mut v = vec![0f32; width * height];
            LE::read_f32_into(&bytes, &mut v);
            v
        }
    };
    DepthImage::new(width, height, values).map_err(|e| Error::load(path, e.to_string()))
}

pub fn write_depth_f32(path: &Path, depth: &DepthImage) -> Result<()> {
    let mut bytes = vec![0u8; depth.values().len() * 4];
    LE::write_f32_into(depth.values(), &mut bytes);
    std::fs::write(path, bytes)?;
    Ok(())
}

/// Writes 16-bit PNG depth in units of `scale` meters.
pub fn write_depth_png16(path: &Path, depth: &DepthImage, scale: f64) -> Result<()> {
    let raw: Vec<u16> = depth
        .values()
        .iter()
        .map(|&d| ((d as f64 / scale).round()).clamp(0.0, u16::MAX as f64) as u16)
        .collect();
    let img = image::ImageBuffer::<image::Luma<u16>, Vec<u16>>::from_raw(depth.width() as u32, depth.height() as u32, raw)
        .ok_or_else(|| Error::invalid("depth buffer size mismatch"))?;
    img.save(path)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_assets(dir: &Path, names: &[&str]) {
        let rgb = ColorImage::filled(4, 2, [0.5, 0.0, 1.0]);
        let mut depth = DepthImage::zeros(4, 2);
        depth.set(1, 1, 1.5);
        for n in names {
            write_color_png(&dir.join(format!("{n}.png")), &rgb).unwrap();
            write_depth_png16(&dir.join(format!("{n}_d.png")), &depth, 0.001).unwrap();
        }
    }

    const POSE: &str = "1 0 0 0 0 1 0 0 0 0 1 0";

    #[test]
    fn loads_three_frames_in_order() {
        let dir = tempfile::tempdir().unwrap();
        write_assets(dir.path(), &["a", "b", "c"]);
        let text = format!(
            "{MANIFEST_HEADER}\nintrinsics 4 4 2 1 4 2\ndepth_scale 0.001\n\
             frame 0.0 a.png a_d.png {POSE}\nframe 0.1 b.png b_d.png {POSE}\nframe 0.2 c.png c_d.png {POSE}\n"
        );
        let path = dir.path().join("seq.txt");
        std::fs::write(&path, text).unwrap();
        let m = load_sequence(&path).unwrap();
        let frames: Vec<_> = m.frames().collect::<Result<_>>().unwrap();
        assert_eq!(frames.len(), 3);
        assert!(frames.windows(2).all(|w| w[0].timestamp < w[1].timestamp));
        // 1500 mm at depth_scale 0.001
        assert!((frames[0].depth.get(1, 1) - 1.5).abs() < 1e-6);
        assert!((frames[0].rgb.get(0, 0)[0] - 128.0 / 255.0).abs() < 1e-6);
    }

    #[test]
    fn missing_pose_names_the_frame() {
        let dir = tempfile::tempdir().unwrap();
        write_assets(dir.path(), &["a", "b", "c"]);
        let text = format!(
            "{MANIFEST_HEADER}\nintrinsics 4 4 2 1 4 2\n\
             frame 0.0 a.png a_d.png {POSE}\nframe 0.1 b.png b_d.png {POSE}\nframe 0.2 c.png c_d.png\n"
        );
        let path = dir.path().join("seq.txt");
        std::fs::write(&path, text).unwrap();
        let err = load_sequence(&path).unwrap_err().to_string();
        assert!(err.contains("frame 2"), "{err}");
        assert!(err.contains("missing pose"), "{err}");
    }

    #[test]
    fn validation_errors() {
        let dir = tempfile::tempdir().unwrap();
        write_assets(dir.path(), &["a", "b"]);
        let path = dir.path().join("seq.txt");
        let cases = [
            (format!("{MANIFEST_HEADER}\nframe 0.0 a.png a_d.png {POSE}\n"), "missing intrinsics"),
            (
                format!("{MANIFEST_HEADER}\nintrinsics 4 4 2 1 4 2\nframe 0.2 a.png a_d.png {POSE}\nframe 0.1 b.png b_d.png {POSE}\n"),
                "out of order",
            ),
            (
                format!("{MANIFEST_HEADER}\nintrinsics 4 4 2 1 4 2\nframe 0.0 zz.png a_d.png {POSE}\n"),
                "missing file",
            ),
            ("not a manifest\n".to_string(), "header"),
        ];
        for (text, needle) in cases {
            std::fs::write(&path, text).unwrap();
            let err = load_sequence(&path).unwrap_err().to_string();
            assert!(err.contains(needle), "{err} lacks {needle}");
        }
    }

    #[test]
    fn image_and_pose_streams_are_synchronized() {
        let dir = tempfile::tempdir().unwrap();
        write_assets(dir.path(), &["a", "b"]);
        let text = format!(
            "{MANIFEST_HEADER}\nintrinsics 4 4 2 1 4 2\n\
             image 1.000 a.png a_d.png\nimage 2.000 b.png b_d.png\n\
             pose 0.995 {POSE}\npose 1.020 {POSE}\npose 2.015 {POSE}\n"
        );
        let path = dir.path().join("seq.txt");
        std::fs::write(&path, text).unwrap();
        let m = load_sequence(&path).unwrap();
        assert_eq!(m.len(), 1);
        assert_eq!(m.dropped_images, 1);
        assert_eq!(m.frames[0].frame_id, 0);
        assert_eq!(m.frames[0].pose.timestamp, 0.995);
    }

    #[test]
    fn raw_depth_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut d = DepthImage::zeros(3, 2);
        d.set(2, 1, 1.2345678);
        let p = dir.path().join("d.f32");
        write_depth_f32(&p, &d).unwrap();
        assert_eq!(read_depth(&p, 3, 2, 0.001).unwrap(), d);
        assert!(read_depth(&p, 2, 2, 0.001).is_err());
    }

    #[test]
    fn text_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        write_assets(dir.path(), &["a"]);
        let path = dir.path().join("seq.txt");
        std::fs::write(&path, format!("{MANIFEST_HEADER}\nintrinsics 4 4 2 1 4 2\nframe 0.5 a.png a_d.png {POSE}\n")).unwrap();
        let m = load_sequence(&path).unwrap();
        std::fs::write(&path, m.to_text(dir.path())).unwrap();
        assert_eq!(load_sequence(&path).unwrap(), m);
    }
}
