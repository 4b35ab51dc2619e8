#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

//! Computational core of a markerless gait-analysis pipeline.
//!
//! - [`skeleton`]: topologies, keypoint sequences, pinhole projection
//! - [`pose_io`]: the `.aigk` binary pose file and size accounting
//! - [`synth`]: closed-form synthetic gait used as ground truth
//! - [`refine`]: sequence-level 3D pose refinement against 2D observations
//! - [`gait`]: windowing, a small skeleton GCN classifier, voting, gait metrics
//! - [`latency`]: edge-vs-cloud latency composition

pub mod gait;
pub mod latency;
pub mod pose_io;
pub mod refine;
pub mod skeleton;
pub mod synth;

pub use skeleton::{CameraModel, Dims, Keypoint, PoseSequence, SkeletonTopology};
