//! Semantic TSDF fusion with a region embedding dictionary.
//!
//! Depth frames are fused into a sparse block-hashed truncated signed
//! distance volume. Region confidence maps from a vision-language model are
//! matched against the regions already in the volume and written into the
//! near-surface voxels as `(key, confidence)` pairs, while each region's
//! embedding is stored once in a dictionary. Queries rank the dictionary by
//! cosine similarity and pull the winning region's geometry from the volume.

pub mod error;
pub mod geometry;
pub mod ingest;
pub mod io;
pub mod pipeline;
pub mod query;
pub mod semantic;
pub mod tsdf;

pub use error::{Error, Result};
pub use geometry::{CameraIntrinsics, ColorImage, DepthImage, Point3, Pose};
pub use ingest::{load_sequence, FrameObservation, SequenceManifest};
pub use pipeline::{run_reconstruction, PipelineConfig, Reconstruction, RunReport, WorkerMode};
pub use query::{rank_regions, QueryVector, RankedRegion};
pub use semantic::{EmbeddingDictionary, RegionFeatureSet, RegionKey, SemanticConfig};
pub use tsdf::{BlockIndex, SparseVolume, TriangleMesh, VolumeConfig, Voxel};
