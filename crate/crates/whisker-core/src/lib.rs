//! Core library for the whisker pipelines.
//!
//! Two pipelines share this crate:
//!
//! 1. **Pose**: identity-free candidate centroids from a multi-camera rig are
//!    assigned anatomical keypoint identities through staged perception-client
//!    calls, then refined by RANSAC cross-view consensus into 2D assignments
//!    and 3D trajectories with quality-control verdicts.
//! 2. **Behavior**: per-animal feature sequences are over-segmented with deep
//!    embedded clustering, captioned per clip, and merged by a reasoning
//!    client into a labeled behavior timeline.
//!
//! The `parallel` feature (on by default) runs data-parallel inner loops on
//! rayon; without it the same code paths run sequentially and produce
//! bit-identical outputs.

pub mod client;
pub mod config;
pub mod dec;
pub mod eval;
pub mod geometry;
pub mod keypoints;
pub mod pipeline;
pub mod refine;
pub mod rng;
pub mod semantics;
pub mod synth;

pub(crate) mod par;
