//! Object detection over class-agnostic proposals, scored by a calibrated
//! linear appearance classifier combined with pose-conditioned geometric
//! priors, then filtered by non-maximum suppression and evaluated by
//! average precision.
//!
//! Feature extraction, proposal generation and pose estimation are external:
//! this crate consumes their outputs as feature matrices, box lists and joint
//! coordinates.

pub mod appearance;
pub mod config;
pub mod dataio;
pub mod detection;
pub mod error;
pub mod evaluation;
pub mod geometry;
pub mod pipeline;
pub mod priors;
pub mod seed;
pub mod synth;

pub use error::{Error, Result};
pub use geometry::{
    geometric_features, iou, offset, BoundingBox, ClassLabel, GeometricFeatures, Joint, LabeledBox, Point, Pose, Proposal,
};
