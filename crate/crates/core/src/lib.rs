//! Keypoint estimation under synthetic-to-real domain shift.
//!
//! The crate bundles the pieces needed to train and evaluate a top-down
//! heatmap pose network whose encoder is pushed, through a gradient reversal
//! layer, to produce features a domain classifier cannot tell apart:
//!
//! - [`schema`]: keypoint layouts, annotations and joint remapping
//! - [`data`]: COCO ingestion, batch sampling, augmentation, heatmap targets
//! - [`model`]: encoder / pose head / domain head bundle with freeze masks
//! - [`train`]: losses, the classifier warm-up and the alternating two-stage loop
//! - [`eval`]: OKS, AP/mAP and domain-confusion probing
//! - [`synthgen`]: articulated skeleton, projection, fitting and stick-figure rendering

pub mod data;
pub mod error;
pub mod eval;
pub mod imaging;
pub mod model;
pub mod schema;
pub mod seed;
pub mod synthgen;
pub mod train;

pub use error::{Error, Result};
