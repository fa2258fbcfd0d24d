//! Oriented object detection with a transformer whose encoder replaces
//! self-attention by depthwise separable convolution.

pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod decoder;
pub mod detection;
pub mod encoder;
pub mod error;
pub mod finetune;
pub mod geometry;
pub mod gradcheck;
pub mod matching;
pub mod metrics;
pub mod model;
pub mod params;
pub mod pyramid;
pub mod synth;
pub mod tensor;
pub mod train;

pub use autodiff::{Gradients, Mode, Tape, Var};
pub use detection::{DetectionSet, DetectionVars};
pub use error::{Error, Result};
pub use geometry::RotatedBox;
pub use pyramid::FeaturePyramid;
pub use tensor::Tensor;
