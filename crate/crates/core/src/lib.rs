//! Arm-aware affordance segmentation.
//!
//! A ResNet-18 encoder feeds three decoders: arm and object mask decoders
//! whose outputs modulate the affordance decoder's features at stride 8,
//! and the affordance decoder itself. A single-decoder baseline shares the
//! same encoder.

pub mod checkpoint;
pub mod data;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod tensor;
pub mod trainer;
pub mod types;

pub use error::{Error, Result};
pub use model::{Model, ModelConfig, Prediction, Variant};
pub use tensor::{Scalar, Tensor};
pub use types::{AffordanceProbabilities, ProbabilityMask, SegmentationMap};
