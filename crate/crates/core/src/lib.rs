//! Fully convolutional mango crown segmentation and detection.
//!
//! The crate covers the whole desk-scale pipeline: tensor and layer
//! primitives with hand-derived backward passes ([`layers`]), the four
//! network presets ([`network`]), supervised training with sigmoid /
//! class-weighted softmax losses and Adam ([`training`]), a deterministic
//! synthetic orchard dataset with ground-truth codecs ([`data`]),
//! threshold-and-components crown detection with boundary-based separation
//! of touching crowns ([`detection`]), and pixel/tree-level evaluation
//! ([`eval`]).

pub mod data;
pub mod detection;
pub mod error;
pub mod eval;
pub mod layers;
pub mod network;
pub mod rng;
pub mod tensor;
pub mod training;

pub use data::{AnnotationBox, ClassMap, GrayImage, OneHotLabel, RgbImage, SceneSpec};
pub use detection::{DetectMode, DetectionSet, SegmentationMap};
pub use error::{Error, Result};
pub use eval::{ConfusionCounts, MetricRow};
pub use network::{ArchId, Model, NetworkSpec};
pub use tensor::{Real, Tensor3, Tensor4};
pub use training::{LossTrace, TrainConfig, TrainSet};
