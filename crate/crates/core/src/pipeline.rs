//! Reconstruction driver and segmentation metrics.
//!
//! Every frame goes through block allocation and geometric integration.
//! Every `semantic_every`-th frame additionally renders, matches and
//! updates semantics. In two-lane mode geometry and semantics run on
//! separate threads joined by a bounded queue: the geometry lane owns
//! distance, weight and color, ships a copy of each semantic frame's
//! active blocks once that frame is integrated, and the semantic lane owns
//! keys, confidences and the dictionary. Semantics are merged back at the
//! end of the stream, which reproduces the single-worker result exactly.

use std::collections::HashMap;
use std::io::Read;
use std::path::PathBuf;
use std::sync::mpsc::{sync_channel, Receiver};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::CameraIntrinsics;
use crate::ingest::synthetic::GroundTruth;
use crate::ingest::{FrameObservation, SequenceManifest};
use crate::query::{segment_all, QueryVector};
use crate::semantic::{feature_path, fuse_frame_semantics, EmbeddingDictionary, RegionFeatureSet, SemanticConfig};
use crate::tsdf::{BlockIndex, SparseVolume, VolumeConfig, VoxelBlock};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum WorkerMode {
    #[default]
    Single,
    TwoLane,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub volume: VolumeConfig,
    pub semantic: SemanticConfig,
    /// Run semantics on every N-th frame; 0 disables them.
    pub semantic_every: usize,
    pub worker_mode: WorkerMode,
    /// Abort instead of skipping when a scheduled frame has no features.
    pub fail_on_missing_features: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            volume: VolumeConfig::default(),
            semantic: SemanticConfig::default(),
            semantic_every: 3,
            worker_mode: WorkerMode::Single,
            fail_on_missing_features: false,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        self.volume.validate()?;
        self.semantic.validate()
    }

    pub fn is_semantic_frame(&self, index: usize) -> bool {
        self.semantic_every > 0 && index % self.semantic_every == 0
    }
}

/// Source of region features for semantic frames.
pub trait FeatureProvider {
    /// Features for `frame`, or `None` when none exist.
    fn features(&mut self, frame: &FrameObservation) -> Result<Option<RegionFeatureSet>>;
}

/// Reads `<frame_id>.ofrf` from a directory.
#[derive(Debug, Clone)]
pub struct FeatureDir(pub PathBuf);

impl FeatureProvider for FeatureDir {
    fn features(&mut self, frame: &FrameObservation) -> Result<Option<RegionFeatureSet>> {
        let path = feature_path(&self.0, frame.frame_id);
        if !path.is_file() {
            return Ok(None);
        }
        RegionFeatureSet::read_file(&path).map(Some)
    }
}

/// Reads consecutive feature messages from a byte stream. Messages for
/// earlier frames are discarded; a message for a later frame is held until
/// that frame arrives.
pub struct FeatureStream<R> {
    reader: R,
    pending: Option<RegionFeatureSet>,
    done: bool,
}

impl<R: Read> FeatureStream<R> {
    pub fn new(reader: R) -> Self {
        Self {
            reader,
            pending: None,
            done: false,
        }
    }

    fn next_message(&mut self) -> Result<Option<RegionFeatureSet>> {
        if let Some(p) = self.pending.take() {
            return Ok(Some(p));
        }
        if self.done {
            return Ok(None);
        }
        match RegionFeatureSet::decode(&mut self.reader) {
            Ok(f) => Ok(Some(f)),
            Err(Error::Io(e)) if e.kind() == std::io::ErrorKind::UnexpectedEof => {
                self.done = true;
                Ok(None)
            }
            Err(e) => Err(e),
        }
    }
}

impl<R: Read> FeatureProvider for FeatureStream<R> {
    fn features(&mut self, frame: &FrameObservation) -> Result<Option<RegionFeatureSet>> {
        while let Some(msg) = self.next_message()? {
            if msg.frame_id == frame.frame_id {
                return Ok(Some(msg));
            }
            if msg.frame_id > frame.frame_id {
                self.pending = Some(msg);
                return Ok(None);
            }
        }
        Ok(None)
    }
}

/// In-memory features keyed by frame id.
#[derive(Debug, Clone, Default)]
pub struct FeatureMap(pub HashMap<u64, RegionFeatureSet>);

impl FeatureProvider for FeatureMap {
    fn features(&mut self, frame: &FrameObservation) -> Result<Option<RegionFeatureSet>> {
        Ok(self.0.get(&frame.frame_id).cloned())
    }
}

/// Provider for geometry-only runs.
pub struct NoFeatures;

impl FeatureProvider for NoFeatures {
    fn features(&mut self, _frame: &FrameObservation) -> Result<Option<RegionFeatureSet>> {
        Ok(None)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct RunReport {
    pub frames: usize,
    pub semantic_frames: usize,
    pub skipped_semantic_frames: usize,
    pub worker_mode: WorkerMode,
    /// Frames over time spent in allocation and integration.
    pub geometric_fps: f64,
    /// Semantic frames over time spent in render, match and update.
    pub semantic_fps: f64,
    pub geometry_seconds: f64,
    pub semantic_seconds: f64,
    pub semantic_ms_per_frame: f64,
    pub wall_seconds: f64,
    pub dictionary_size: usize,
    pub block_count: usize,
    pub peak_memory_bytes: usize,
    pub matched_regions: usize,
    pub new_regions: usize,
}

impl RunReport {
    /// The report with every timing field zeroed.
    pub fn without_timing(&self) -> Self {
        Self {
            geometric_fps: 0.0,
            semantic_fps: 0.0,
            geometry_seconds: 0.0,
            semantic_seconds: 0.0,
            semantic_ms_per_frame: 0.0,
            wall_seconds: 0.0,
            ..self.clone()
        }
    }

    fn finish(&mut self, geometry: Duration, semantic: Duration, wall: Duration) {
        self.geometry_seconds = geometry.as_secs_f64();
        self.semantic_seconds = semantic.as_secs_f64();
        self.wall_seconds = wall.as_secs_f64();
        let rate = |n: usize, t: f64| if n == 0 { 0.0 } else { n as f64 / t.max(1e-9) };
        self.geometric_fps = rate(self.frames, self.geometry_seconds);
        self.semantic_fps = rate(self.semantic_frames, self.semantic_seconds);
        self.semantic_ms_per_frame = if self.semantic_frames == 0 {
            0.0
        } else {
            1e3 * self.semantic_seconds / self.semantic_frames as f64
        };
    }
}

#[derive(Debug, Clone)]
pub struct Reconstruction {
    pub volume: SparseVolume,
    pub dictionary: EmbeddingDictionary,
    pub report: RunReport,
}

/// Runs the pipeline over a manifest, reading frames on a prefetch thread.
pub fn run_reconstruction(
    config: &PipelineConfig,
    sequence: &SequenceManifest,
    features: &mut (dyn FeatureProvider + Send),
) -> Result<Reconstruction> {
    std::thread::scope(|s| {
        let frames = prefetch(s, sequence, 4);
        run_frames(config, &sequence.intrinsics, frames.into_iter(), features)
    })
}

fn prefetch<'scope>(
    s: &'scope std::thread::Scope<'scope, '_>,
    sequence: &'scope SequenceManifest,
    depth: usize,
) -> Receiver<Result<FrameObservation>> {
    let (tx, rx) = sync_channel(depth);
    s.spawn(move || {
        for frame in sequence.frames() {
            if tx.send(frame).is_err() {
                break;
            }
        }
    });
    rx
}

/// Runs the pipeline over any frame stream.
pub fn run_frames(
    config: &PipelineConfig,
    k: &CameraIntrinsics,
    frames: impl Iterator<Item = Result<FrameObservation>>,
    features: &mut (dyn FeatureProvider + Send),
) -> Result<Reconstruction> {
    config.validate()?;
    k.validate()?;
    match config.worker_mode {
        WorkerMode::Single => run_single(config, k, frames, features),
        WorkerMode::TwoLane => run_two_lane(config, k, frames, features),
    }
}

fn missing(config: &PipelineConfig, frame: &FrameObservation, report: &mut RunReport) -> Result<()> {
    if config.fail_on_missing_features {
        return Err(Error::NotFound(format!("features for frame {}", frame.frame_id)));
    }
    log::warn!("no features for frame {}; skipping semantics", frame.frame_id);
    report.skipped_semantic_frames += 1;
    Ok(())
}

fn run_single(
    config: &PipelineConfig,
    k: &CameraIntrinsics,
    frames: impl Iterator<Item = Result<FrameObservation>>,
    features: &mut (dyn FeatureProvider + Send),
) -> Result<Reconstruction> {
    let wall = Instant::now();
    let mut volume = SparseVolume::new(config.volume)?;
    let mut dict = EmbeddingDictionary::new();
    let mut report = RunReport {
        worker_mode: WorkerMode::Single,
        ..Default::default()
    };
    let (mut t_geo, mut t_sem) = (Duration::ZERO, Duration::ZERO);
    for (i, frame) in frames.enumerate() {
        let frame = frame?;
        let t0 = Instant::now();
        let active = volume.integrate_frame(&frame, k)?;
        t_geo += t0.elapsed();
        report.frames += 1;
        if config.is_semantic_frame(i) {
            match features.features(&frame)? {
                None => missing(config, &frame, &mut report)?,
                Some(f) => {
                    let t0 = Instant::now();
                    let out = fuse_frame_semantics(&mut volume, &mut dict, &frame, &f, k, &active, &config.semantic)?;
                    t_sem += t0.elapsed();
                    report.semantic_frames += 1;
                    report.matched_regions += out.matched;
                    report.new_regions += out.new_regions;
                }
            }
        }
        report.peak_memory_bytes = report.peak_memory_bytes.max(volume.memory_bytes() + dict.memory_bytes());
    }
    report.dictionary_size = dict.len();
    report.block_count = volume.block_count();
    report.finish(t_geo, t_sem, wall.elapsed());
    Ok(Reconstruction {
        volume,
        dictionary: dict,
        report,
    })
}

/// A semantic frame handed from the geometry lane to the semantic lane.
struct SemanticJob {
    frame: FrameObservation,
    active: Vec<BlockIndex>,
    blocks: Vec<VoxelBlock>,
}

struct SemanticLane {
    volume: SparseVolume,
    dict: EmbeddingDictionary,
    report: RunReport,
    time: Duration,
}

fn run_two_lane(
    config: &PipelineConfig,
    k: &CameraIntrinsics,
    frames: impl Iterator<Item = Result<FrameObservation>>,
    features: &mut (dyn FeatureProvider + Send),
) -> Result<Reconstruction> {
    let wall = Instant::now();
    let mut volume = SparseVolume::new(config.volume)?;
    let (tx, rx) = sync_channel::<SemanticJob>(2);

    let (geometry, semantic) = std::thread::scope(|s| {
        let lane = s.spawn(move || -> Result<SemanticLane> {
            let mut lane = SemanticLane {
                volume: SparseVolume::new(config.volume)?,
                dict: EmbeddingDictionary::new(),
                report: RunReport::default(),
                time: Duration::ZERO,
            };
            for job in rx {
                let Some(f) = features.features(&job.frame)? else {
                    missing(config, &job.frame, &mut lane.report)?;
                    continue;
                };
                let t0 = Instant::now();
                for src in &job.blocks {
                    let dst = lane.volume.ensure_block(src.index());
                    for (d, s) in dst.voxels_mut().iter_mut().zip(src.voxels()) {
                        d.copy_geometry_from(s);
                    }
                }
                let out = fuse_frame_semantics(
                    &mut lane.volume,
                    &mut lane.dict,
                    &job.frame,
                    &f,
                    k,
                    &job.active,
                    &config.semantic,
                )?;
                lane.time += t0.elapsed();
                lane.report.semantic_frames += 1;
                lane.report.matched_regions += out.matched;
                lane.report.new_regions += out.new_regions;
                let memory = lane.volume.memory_bytes() + lane.dict.memory_bytes();
                lane.report.peak_memory_bytes = lane.report.peak_memory_bytes.max(memory);
            }
            Ok(lane)
        });

        let geometry = (|| -> Result<(usize, Duration, usize)> {
            let (mut n, mut t_geo, mut peak) = (0usize, Duration::ZERO, 0usize);
            for (i, frame) in frames.enumerate() {
                let frame = frame?;
                let t0 = Instant::now();
                let active = volume.integrate_frame(&frame, k)?;
                t_geo += t0.elapsed();
                n += 1;
                let mut queued = 0;
                if config.is_semantic_frame(i) {
                    let blocks: Vec<VoxelBlock> =
                        active.iter().filter_map(|b| volume.block(b).cloned()).collect();
                    queued = blocks.len() * (config.volume.voxels_per_block() * std::mem::size_of::<crate::tsdf::Voxel>());
                    if tx.send(SemanticJob { frame, active, blocks }).is_err() {
                        // The semantic lane stopped; its error surfaces on join.
                        break;
                    }
                }
                peak = peak.max(volume.memory_bytes() + queued);
            }
            Ok((n, t_geo, peak))
        })();
        drop(tx);
        let semantic = lane.join().expect("semantic lane panicked");
        (geometry, semantic)
    });
    let (frames, t_geo, peak) = geometry?;
    let lane = semantic?;

    for src in lane.volume.blocks() {
        let dst = volume
            .block_mut(&src.index())
            .ok_or_else(|| Error::invalid(format!("semantic block {:?} missing from geometry", src.index())))?;
        for (d, s) in dst.voxels_mut().iter_mut().zip(src.voxels()) {
            d.copy_semantics_from(s);
        }
    }
    let mut report = RunReport {
        frames,
        worker_mode: WorkerMode::TwoLane,
        dictionary_size: lane.dict.len(),
        block_count: volume.block_count(),
        peak_memory_bytes: peak + lane.report.peak_memory_bytes,
        ..lane.report
    };
    report.finish(t_geo, lane.time, wall.elapsed());
    Ok(Reconstruction {
        volume,
        dictionary: lane.dict,
        report,
    })
}

/// Prediction value for a voxel that carries no label. It is never
/// correct and counts as a false positive for no class.
pub const VOID_LABEL: u32 = u32::MAX;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassScore {
    pub class: u32,
    pub ground_truth: usize,
    pub recall: f64,
    pub iou: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentationMetrics {
    pub mean_accuracy: f64,
    pub frequency_weighted_iou: f64,
    pub evaluated: usize,
    pub per_class: Vec<ClassScore>,
}

/// Mean per-class recall and ground-truth-frequency weighted IoU over the
/// classes present in `ground_truth`.
pub fn evaluate_segmentation(predicted: &[u32], ground_truth: &[u32], classes: usize) -> Result<SegmentationMetrics> {
    if predicted.len() != ground_truth.len() {
        return Err(Error::invalid(format!(
            "{} predictions for {} ground-truth labels",
            predicted.len(),
            ground_truth.len()
        )));
    }
    let mut tp = vec![0usize; classes];
    let mut fp = vec![0usize; classes];
    let mut gt_count = vec![0usize; classes];
    for (&p, &g) in predicted.iter().zip(ground_truth) {
        if g as usize >= classes {
            return Err(Error::invalid(format!("ground-truth label {g} outside {classes} classes")));
        }
        if p != VOID_LABEL && p as usize >= classes {
            return Err(Error::invalid(format!("predicted label {p} outside {classes} classes")));
        }
        gt_count[g as usize] += 1;
        if p == g {
            tp[g as usize] += 1;
        } else if p != VOID_LABEL {
            fp[p as usize] += 1;
        }
    }
    let total = ground_truth.len();
    let mut per_class = Vec::new();
    for c in 0..classes {
        if gt_count[c] == 0 {
            continue;
        }
        let fn_ = gt_count[c] - tp[c];
        per_class.push(ClassScore {
            class: c as u32,
            ground_truth: gt_count[c],
            recall: tp[c] as f64 / gt_count[c] as f64,
            iou: tp[c] as f64 / (tp[c] + fp[c] + fn_) as f64,
        });
    }
    let present = per_class.len().max(1) as f64;
    Ok(SegmentationMetrics {
        mean_accuracy: per_class.iter().map(|c| c.recall).sum::<f64>() / present,
        frequency_weighted_iou: per_class
            .iter()
            .map(|c| c.ground_truth as f64 / total.max(1) as f64 * c.iou)
            .sum(),
        evaluated: total,
        per_class,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    /// Scored on ground-truth voxels the volume reconstructs as surface:
    /// observed with `|tsdf| <= semantic_band`, where semantics can live.
    pub metrics: SegmentationMetrics,
    /// Scored on every observed ground-truth voxel.
    pub observed_metrics: SegmentationMetrics,
    pub ground_truth_voxels: usize,
    pub observed_ground_truth_voxels: usize,
    pub surface_ground_truth_voxels: usize,
    /// Surface ground-truth voxels without a predicted label.
    pub unlabeled_voxels: usize,
}

/// Labels the volume with `queries` and scores it against the ground truth.
pub fn evaluate_against_ground_truth(
    volume: &SparseVolume,
    dict: &EmbeddingDictionary,
    queries: &[QueryVector],
    gt: &GroundTruth,
) -> Result<EvaluationReport> {
    if (gt.voxel_size - volume.config().voxel_size).abs() > 1e-9 {
        return Err(Error::invalid(format!(
            "ground truth voxel size {} differs from volume voxel size {}",
            gt.voxel_size,
            volume.config().voxel_size
        )));
    }
    if queries.len() != gt.class_count as usize {
        return Err(Error::invalid(format!(
            "{} queries for {} ground-truth classes",
            queries.len(),
            gt.class_count
        )));
    }
    let labels: HashMap<[i32; 3], u32> = segment_all(volume, dict, queries)?
        .into_iter()
        .map(|l| (l.coord, l.label))
        .collect();
    let band = volume.config().semantic_band;
    let (mut pred_obs, mut truth_obs, mut pred_surf, mut truth_surf) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for l in &gt.labels {
        let Some(v) = volume.voxel(l.coord).filter(|v| v.is_observed()) else {
            continue;
        };
        let p = labels.get(&l.coord).copied().unwrap_or(VOID_LABEL);
        pred_obs.push(p);
        truth_obs.push(l.label);
        if (v.tsdf as f64).abs() <= band {
            pred_surf.push(p);
            truth_surf.push(l.label);
        }
    }
    let classes = gt.class_count as usize;
    Ok(EvaluationReport {
        metrics: evaluate_segmentation(&pred_surf, &truth_surf, classes)?,
        observed_metrics: evaluate_segmentation(&pred_obs, &truth_obs, classes)?,
        ground_truth_voxels: gt.labels.len(),
        observed_ground_truth_voxels: truth_obs.len(),
        surface_ground_truth_voxels: truth_surf.len(),
        unlabeled_voxels: pred_surf.iter().filter(|&&p| p == VOID_LABEL).count(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_prediction() {
        let gt = [0, 1, 1, 2, 0];
        let m = evaluate_segmentation(&gt, &gt, 3).unwrap();
        assert_eq!(m.mean_accuracy, 1.0);
        assert_eq!(m.frequency_weighted_iou, 1.0);
    }

    #[test]
    fn hand_computed_confusion_matrix() {
        let gt: Vec<u32> = [vec![0; 80], vec![1; 20]].concat();
        let pred: Vec<u32> = [vec![0; 80], vec![1; 10], vec![0; 10]].concat();
        let m = evaluate_segmentation(&pred, &gt, 2).unwrap();
        assert!((m.mean_accuracy - 0.75).abs() < 1e-12);
        let expected = 0.8 * 80.0 / 90.0 + 0.2 * 0.5;
        assert!((m.frequency_weighted_iou - expected).abs() < 1e-12);
        assert!((m.frequency_weighted_iou - 0.8111).abs() < 1e-4);
    }

    #[test]
    fn all_one_class_on_uniform_gt() {
        let gt: Vec<u32> = [vec![0; 50], vec![1; 50]].concat();
        let m = evaluate_segmentation(&[0; 100], &gt, 2).unwrap();
        assert_eq!(m.mean_accuracy, 0.5);
    }

    #[test]
    fn absent_classes_are_excluded() {
        let m = evaluate_segmentation(&[0, 0], &[0, 0], 5).unwrap();
        assert_eq!(m.per_class.len(), 1);
        assert_eq!(m.mean_accuracy, 1.0);
    }

    #[test]
    fn void_predictions_are_misses_only() {
        let m = evaluate_segmentation(&[VOID_LABEL, 1], &[0, 1], 2).unwrap();
        assert_eq!(m.mean_accuracy, 0.5);
        // Class 1 keeps IoU 1 because the void voxel is not its false positive.
        assert_eq!(m.per_class[1].iou, 1.0);
    }

    #[test]
    fn misaligned_or_out_of_range_labels_are_rejected() {
        assert!(matches!(evaluate_segmentation(&[0], &[0, 1], 2), Err(Error::InvalidArgument(_))));
        assert!(evaluate_segmentation(&[0], &[3], 2).is_err());
        assert!(evaluate_segmentation(&[7], &[0], 2).is_err());
    }

    #[test]
    fn semantic_schedule() {
        let mut c = PipelineConfig::default();
        assert!(c.is_semantic_frame(0) && !c.is_semantic_frame(1) && c.is_semantic_frame(3));
        c.semantic_every = 0;
        assert!(!(0..10).any(|i| c.is_semantic_frame(i)));
    }

    #[test]
    fn stream_provider_skips_and_holds_messages() {
        let mk = |id| RegionFeatureSet::empty(id, 2, 4, 3);
        let mut bytes = Vec::new();
        for id in [0, 2, 5] {
            bytes.extend(mk(id).to_bytes());
        }
        let mut stream = FeatureStream::new(bytes.as_slice());
        let frame = |id| {
            FrameObservation::new(
                id,
                0.0,
                crate::geometry::ColorImage::filled(1, 1, [0.0; 3]),
                crate::geometry::DepthImage::zeros(1, 1),
                crate::geometry::Pose::identity(),
            )
            .unwrap()
        };
        assert_eq!(stream.features(&frame(0)).unwrap().unwrap().frame_id, 0);
        assert!(stream.features(&frame(1)).unwrap().is_none());
        assert_eq!(stream.features(&frame(2)).unwrap().unwrap().frame_id, 2);
        assert!(stream.features(&frame(3)).unwrap().is_none());
        assert_eq!(stream.features(&frame(5)).unwrap().unwrap().frame_id, 5);
        assert!(stream.features(&frame(6)).unwrap().is_none());
    }
}
