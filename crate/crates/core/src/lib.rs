//! Zero-shot point cloud anomaly detection by multi-view depth projection.
//!
//! A point cloud is normalized, splatted into depth images from a
//! deterministic camera rig, and encoded by a frozen transformer pair
//! carrying learnable visual and text prompts. Per-pixel evidence flows
//! back to the points through the exact rasterization correspondence, and
//! point/object anomaly probabilities come from similarity to the
//! normal/abnormal text features. Only the prompts train; gradients are
//! exact reverse-mode and finite-difference checked.

pub mod autodiff;
pub mod config;
pub mod data;
pub mod encoder;
pub mod error;
pub mod geometry;
pub mod metrics;
pub mod pipeline;
pub mod rendering;
pub mod scoring;
pub mod tensor;
pub mod training;

pub use config::RunConfig;
pub use error::{Error, Result};
pub use geometry::{CameraIntrinsics, PointCloud, RigidTransform, ViewRig};
pub use pipeline::{ModelState, PipelineSettings};
pub use scoring::AnomalyResult;
pub use tensor::Tensor;
