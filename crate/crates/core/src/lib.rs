//! Bleeding-frame classification for capsule endoscopy.
//!
//! Two independently trained encoders are ensembled by averaging their class
//! probabilities. During training each member also classifies its final-stage
//! features re-weighted by the ground-truth mask (the attention path) and
//! reconstructs that mask with a U-Net style decoder. At inference only the
//! standard path decides the label; the decoder output explains it.
//!
//! Candidate boxes from any detector can be post-processed with Soft-NMS and
//! scored with AP / mAP / IoU metrics.

pub mod attention;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod detection;
pub mod encoder;
pub mod error;
pub mod evaluation;
pub mod ops;
pub mod rng;
pub mod segmentation;
pub mod tape;
pub mod tensor;
pub mod training;

pub use data::{AnnotatedFrame, BoundingBox, ClassLabel, Detection, ImageFrame, SegmentationMask};
pub use encoder::{BackboneSpec, Model, ProbVector};
pub use error::{Error, Result};
pub use tensor::Tensor;
