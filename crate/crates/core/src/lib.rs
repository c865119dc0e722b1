//! Weakly supervised abnormality localization for long frame-feature
//! sequences.
//!
//! The pipeline partitions a video into homogeneous segments with PELT,
//! turns each segment into a similarity-weighted frame graph, classifies
//! segments with a message-passing network trained on segment-level labels
//! only, and ranks frames inside abnormal segments to pick the top-k
//! candidates.

pub mod dataio;
pub mod error;
pub mod graph;
pub mod localization;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod pipeline;
pub mod segmentation;

pub use error::{Error, Result};
