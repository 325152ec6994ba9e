//! Pinhole camera model, rigid camera poses, and the depth unprojection /
//! point projection pair shared by integration, rendering and ray casting.
//!
//! Conventions: a [`Pose`] maps world to camera coordinates,
//! `x_cam = R * x_world + t`. Pixels are addressed as `(u, v)` =
//! (column, row) with pixel centers at integer coordinates.

use nalgebra::{Matrix3, Vector3};

use crate::error::{Error, Result};

pub type Point3 = nalgebra::Point3<f64>;

const ROTATION_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Result<Self> {
        let k = Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0 && self.fx.is_finite() && self.fy.is_finite()) {
            return Err(Error::invalid(format!(
                "focal lengths must be positive, got fx={} fy={}",
                self.fx, self.fy
            )));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::invalid("image size must be at least 1x1"));
        }
        if !(self.cx > 0.0 && self.cx < self.width as f64) {
            return Err(Error::invalid(format!(
                "principal point cx={} outside (0, {})",
                self.cx, self.width
            )));
        }
        if !(self.cy > 0.0 && self.cy < self.height as f64) {
            return Err(Error::invalid(format!(
                "principal point cy={} outside (0, {})",
                self.cy, self.height
            )));
        }
        Ok(())
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        Matrix3::new(self.fx, 0.0, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0)
    }

    /// Camera-frame point on the ray through pixel `(u, v)` at depth `z`.
    #[inline]
    pub fn backproject(&self, u: f64, v: f64, z: f64) -> Vector3<f64> {
        Vector3::new((u - self.cx) * z / self.fx, (v - self.cy) * z / self.fy, z)
    }

    /// Homogeneous image coordinates `[u*d, v*d, d]` of a camera-frame point.
    #[inline]
    pub fn apply(&self, p_cam: &Vector3<f64>) -> Vector3<f64> {
        Vector3::new(
            self.fx * p_cam.x + self.cx * p_cam.z,
            self.fy * p_cam.y + self.cy * p_cam.z,
            p_cam.z,
        )
    }

    #[inline]
    pub fn contains(&self, u: f64, v: f64) -> bool {
        u >= 0.0 && u < self.width as f64 && v >= 0.0 && v < self.height as f64
    }
}

/// Scales focal lengths and principal point by `factor`; image size is
/// scaled and rounded down.
pub fn scale_intrinsics(k: &CameraIntrinsics, factor: f64) -> Result<CameraIntrinsics> {
    if !(factor > 0.0 && factor.is_finite()) {
        return Err(Error::invalid(format!("scale factor must be positive, got {factor}")));
    }
    let width = (k.width as f64 * factor).floor() as usize;
    let height = (k.height as f64 * factor).floor() as usize;
    if width == 0 || height == 0 {
        return Err(Error::invalid(format!(
            "scaling {}x{} by {factor} leaves an empty image",
            k.width, k.height
        )));
    }
    Ok(CameraIntrinsics {
        fx: k.fx * factor,
        fy: k.fy * factor,
        cx: k.cx * factor,
        cy: k.cy * factor,
        width,
        height,
    })
}

/// Rigid world-to-camera transform with a capture timestamp (seconds).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
    pub timestamp: f64,
}

impl Pose {
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>, timestamp: f64) -> Result<Self> {
        let pose = Self {
            rotation,
            translation,
            timestamp,
        };
        pose.validate()?;
        Ok(pose)
    }

    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
            timestamp: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let finite = self.rotation.iter().all(|x| x.is_finite())
            && self.translation.iter().all(|x| x.is_finite());
        if !finite {
            return Err(Error::invalid("pose has non-finite entries"));
        }
        let gram = self.rotation.transpose() * self.rotation;
        let ortho_err = (gram - Matrix3::identity()).abs().max();
        let det = self.rotation.determinant();
        if ortho_err > ROTATION_TOLERANCE || (det - 1.0).abs() > ROTATION_TOLERANCE {
            return Err(Error::invalid(format!(
                "rotation is not a proper rotation (orthogonality error {ortho_err:.3e}, det {det})"
            )));
        }
        Ok(())
    }

    /// Builds a pose from 12 row-major values of `[R | t]`.
    pub fn from_row_major(values: &[f64; 12], timestamp: f64) -> Result<Self> {
        let r = Matrix3::new(
            values[0], values[1], values[2], values[4], values[5], values[6], values[8], values[9],
            values[10],
        );
        let t = Vector3::new(values[3], values[7], values[11]);
        Self::new(r, t, timestamp)
    }

    pub fn to_row_major(&self) -> [f64; 12] {
        let r = &self.rotation;
        let t = &self.translation;
        [
            r[(0, 0)],
            r[(0, 1)],
            r[(0, 2)],
            t.x,
            r[(1, 0)],
            r[(1, 1)],
            r[(1, 2)],
            t.y,
            r[(2, 0)],
            r[(2, 1)],
            r[(2, 2)],
            t.z,
        ]
    }

    /// World-to-camera pose of a camera at `eye` looking at `target`.
    /// The camera's +y axis points along `-up` (image rows grow downward).
    pub fn look_at(eye: Point3, target: Point3, up: Vector3<f64>, timestamp: f64) -> Result<Self> {
        let forward = (target - eye).normalize();
        let right = forward.cross(&up);
        if right.norm() < 1e-9 {
            return Err(Error::invalid("look_at: up vector parallel to viewing direction"));
        }
        let right = right.normalize();
        let down = forward.cross(&right);
        // Rows of R are the camera axes expressed in world coordinates.
        let rotation = Matrix3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
        let translation = -(rotation * eye.coords);
        Self::new(rotation, translation, timestamp)
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        Self {
            rotation: rt,
            translation: -(rt * self.translation),
            timestamp: self.timestamp,
        }
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &Pose) -> Self {
        Self {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
            timestamp: self.timestamp,
        }
    }

    #[inline]
    pub fn world_to_camera(&self, p: &Point3) -> Vector3<f64> {
        self.rotation * p.coords + self.translation
    }

    #[inline]
    pub fn camera_to_world(&self, p_cam: &Vector3<f64>) -> Point3 {
        Point3::from(self.rotation.transpose() * (p_cam - self.translation))
    }

    pub fn camera_center(&self) -> Point3 {
        Point3::from(-(self.rotation.transpose() * self.translation))
    }
}

/// Depth in meters, row-major. Zero marks an invalid pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthImage {
    width: usize,
    height: usize,
    values: Vec<f32>,
}

impl DepthImage {
    /// Non-finite and negative inputs are stored as 0 (invalid).
    pub fn new(width: usize, height: usize, mut values: Vec<f32>) -> Result<Self> {
        if values.len() != width * height {
            return Err(Error::invalid(format!(
                "depth buffer has {} values, expected {}x{}",
                values.len(),
                width,
                height
            )));
        }
        for v in values.iter_mut() {
            if !v.is_finite() || *v < 0.0 {
                *v = 0.0;
            }
        }
        Ok(Self {
            width,
            height,
            values,
        })
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            values: vec![0.0; width * height],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    #[inline]
    pub fn get(&self, u: usize, v: usize) -> f32 {
        self.values[v * self.width + u]
    }

    pub fn set(&mut self, u: usize, v: usize, depth: f32) {
        self.values[v * self.width + u] = if depth.is_finite() && depth > 0.0 { depth } else { 0.0 };
    }

    pub fn valid_count(&self) -> usize {
        self.values.iter().filter(|&&d| d > 0.0).count()
    }

    /// Point-samples every `step`-th pixel. Pixel `(u, v)` of the result is
    /// pixel `(step*u, step*v)` of the input, which is consistent with
    /// [`scale_intrinsics`] by `1/step`.
    pub fn downsample(&self, step: usize) -> DepthImage {
        let step = step.max(1);
        let width = self.width / step;
        let height = self.height / step;
        let mut values = Vec::with_capacity(width * height);
        for v in 0..height {
            for u in 0..width {
                values.push(self.get(u * step, v * step));
            }
        }
        DepthImage {
            width,
            height,
            values,
        }
    }

    pub fn matches(&self, k: &CameraIntrinsics) -> bool {
        self.width == k.width && self.height == k.height
    }
}

/// RGB color image with channels in `[0, 1]`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ColorImage {
    width: usize,
    height: usize,
    pixels: Vec<[f32; 3]>,
}

impl ColorImage {
    pub fn new(width: usize, height: usize, pixels: Vec<[f32; 3]>) -> Result<Self> {
        if pixels.len() != width * height {
            return Err(Error::invalid(format!(
                "color buffer has {} pixels, expected {}x{}",
                pixels.len(),
                width,
                height
            )));
        }
        Ok(Self {
            width,
            height,
            pixels,
        })
    }

    pub fn filled(width: usize, height: usize, rgb: [f32; 3]) -> Self {
        Self {
            width,
            height,
            pixels: vec![rgb; width * height],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[[f32; 3]] {
        &self.pixels
    }

    #[inline]
    pub fn get(&self, u: usize, v: usize) -> [f32; 3] {
        self.pixels[v * self.width + u]
    }

    pub fn set(&mut self, u: usize, v: usize, rgb: [f32; 3]) {
        self.pixels[v * self.width + u] = rgb;
    }
}

/// A world point projected into an image: `(u, v)` in pixels and the
/// camera-frame depth.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projection {
    pub u: f64,
    pub v: f64,
    pub depth: f64,
}

impl Projection {
    /// Nearest pixel center, or `None` if rounding leaves the image.
    #[inline]
    pub fn pixel(&self, k: &CameraIntrinsics) -> Option<(usize, usize)> {
        let u = (self.u + 0.5).floor();
        let v = (self.v + 0.5).floor();
        if u < 0.0 || v < 0.0 {
            return None;
        }
        let (u, v) = (u as usize, v as usize);
        (u < k.width && v < k.height).then_some((u, v))
    }
}

/// Projects a world point; `None` unless it lies in front of the camera and
/// inside the image bounds.
#[inline]
pub fn project_point(p: &Point3, k: &CameraIntrinsics, pose: &Pose) -> Option<Projection> {
    let h = k.apply(&pose.world_to_camera(p));
    if !(h.z > 0.0) {
        return None;
    }
    let u = h.x / h.z;
    let v = h.y / h.z;
    k.contains(u, v).then_some(Projection { u, v, depth: h.z })
}

/// A valid depth pixel lifted to world coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SurfaceSample {
    pub u: usize,
    pub v: usize,
    pub depth: f64,
    pub world: Point3,
}

/// Lifts every valid depth pixel to world space. Invalid pixels are omitted.
pub fn unproject_depth(d: &DepthImage, k: &CameraIntrinsics, pose: &Pose) -> Result<Vec<SurfaceSample>> {
    if !d.matches(k) {
        return Err(Error::invalid(format!(
            "depth image is {}x{} but intrinsics are {}x{}",
            d.width, d.height, k.width, k.height
        )));
    }
    let mut out = Vec::with_capacity(d.valid_count());
    for v in 0..d.height {
        for u in 0..d.width {
            let z = d.get(u, v);
            if z <= 0.0 {
                continue;
            }
            let depth = z as f64;
            let cam = k.backproject(u as f64, v as f64, depth);
            out.push(SurfaceSample {
                u,
                v,
                depth,
                world: pose.camera_to_world(&cam),
            });
        }
    }
    Ok(out)
}
