//! Frame sources: sequence manifests on disk, timestamp pairing of image
//! and pose streams, and an analytic synthetic scene renderer.

mod manifest;
pub mod synthetic;

pub use manifest::{
    load_sequence, read_color, read_depth, write_color_png, write_depth_f32, write_depth_png16, DepthFormat, FrameEntry,
    SequenceManifest, MANIFEST_HEADER,
};

use crate::error::{Error, Result};
use crate::geometry::{CameraIntrinsics, ColorImage, DepthImage, Pose};

/// One RGB-D observation with its world-to-camera pose.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameObservation {
    pub frame_id: u64,
    pub timestamp: f64,
    pub rgb: ColorImage,
    pub depth: DepthImage,
    pub pose: Pose,
}

impl FrameObservation {
    pub fn new(frame_id: u64, timestamp: f64, rgb: ColorImage, depth: DepthImage, pose: Pose) -> Result<Self> {
        if rgb.width() != depth.width() || rgb.height() != depth.height() {
            return Err(Error::invalid(format!(
                "frame {frame_id}: color is {}x{} but depth is {}x{}",
                rgb.width(),
                rgb.height(),
                depth.width(),
                depth.height()
            )));
        }
        pose.validate()?;
        Ok(Self {
            frame_id,
            timestamp,
            rgb,
            depth,
            pose,
        })
    }

    pub fn check_intrinsics(&self, k: &CameraIntrinsics) -> Result<()> {
        if !self.depth.matches(k) || self.rgb.width() != k.width || self.rgb.height() != k.height {
            return Err(Error::invalid(format!(
                "frame {} is {}x{} but intrinsics are {}x{}",
                self.frame_id,
                self.depth.width(),
                self.depth.height(),
                k.width,
                k.height
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyncedPair<T> {
    pub image_time: f64,
    pub image: T,
    pub pose: Pose,
}

/// Pairs each image with the nearest not-yet-used pose within `window`
/// seconds in one forward pass. Images without a pose inside the window are
/// dropped. Both inputs must be sorted by timestamp.
pub fn synchronize<T: Clone>(images: &[(f64, T)], poses: &[Pose], window: f64) -> Vec<SyncedPair<T>> {
    let mut out = Vec::new();
    let mut next = 0usize;
    for (t, image) in images {
        // Advance to the last unused pose at or before t.
        while next + 1 < poses.len() && poses[next + 1].timestamp <= *t {
            next += 1;
        }
        if next >= poses.len() {
            break;
        }
        let mut best = next;
        if next + 1 < poses.len() && (poses[next + 1].timestamp - t).abs() < (poses[next].timestamp - t).abs() {
            best = next + 1;
        }
        if (poses[best].timestamp - t).abs() <= window {
            out.push(SyncedPair {
                image_time: *t,
                image: image.clone(),
                pose: poses[best],
            });
            next = best + 1;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn pose_at(t: f64) -> Pose {
        Pose {
            timestamp: t,
            ..Pose::identity()
        }
    }

    #[test]
    fn pairs_with_nearest_in_window() {
        let poses = [pose_at(0.995), pose_at(1.020)];
        let out = synchronize(&[(1.000, "a")], &poses, 0.010);
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].pose.timestamp, 0.995);
    }

    #[test]
    fn drops_images_outside_window() {
        let poses = [pose_at(0.985), pose_at(1.015)];
        assert!(synchronize(&[(1.000, ())], &poses, 0.010).is_empty());
    }

    #[test]
    fn identical_timestamps_all_pair() {
        let ts = [0.0, 0.1, 0.2, 0.3];
        let poses: Vec<Pose> = ts.iter().map(|&t| pose_at(t)).collect();
        let images: Vec<(f64, usize)> = ts.iter().copied().zip(0..).collect();
        let out = synchronize(&images, &poses, 0.010);
        assert_eq!(out.len(), 4);
        for p in &out {
            assert_eq!(p.image_time, p.pose.timestamp);
        }
    }

    #[test]
    fn each_pose_used_once() {
        let poses = [pose_at(1.0)];
        let out = synchronize(&[(0.999, 0), (1.001, 1)], &poses, 0.010);
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].image, 0);
    }

    #[test]
    fn rejects_size_mismatch() {
        let r = FrameObservation::new(
            0,
            0.0,
            ColorImage::filled(4, 4, [0.0; 3]),
            DepthImage::zeros(4, 3),
            Pose::identity(),
        );
        assert!(r.is_err());
    }

    proptest! {
        #[test]
        fn pairs_are_monotone_and_within_window(
            mut its in proptest::collection::vec(0.0f64..10.0, 0..40),
            mut pts in proptest::collection::vec(0.0f64..10.0, 0..40),
            window in 0.001f64..0.5,
        ) {
            its.sort_by(f64::total_cmp);
            pts.sort_by(f64::total_cmp);
            let images: Vec<(f64, usize)> = its.iter().copied().zip(0..).collect();
            let poses: Vec<Pose> = pts.iter().map(|&t| pose_at(t)).collect();
            let out = synchronize(&images, &poses, window);
            for w in out.windows(2) {
                prop_assert!(w[0].image_time <= w[1].image_time);
                prop_assert!(w[0].pose.timestamp <= w[1].pose.timestamp);
            }
            for p in &out {
                prop_assert!((p.image_time - p.pose.timestamp).abs() <= window);
            }
        }
    }
}
