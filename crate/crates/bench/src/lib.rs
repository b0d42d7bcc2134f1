//! Shared fixtures for the pipeline benchmarks.

use mvad_core::data::{generate, SyntheticSpec};
use mvad_core::encoder::EncoderConfig;
use mvad_core::geometry::PointCloud;
use mvad_core::pipeline::{ModelState, PipelineSettings};

/// A deterministic 800-point benchmark cloud.
pub fn benchmark_cloud() -> PointCloud {
    let spec = SyntheticSpec {
        clouds_per_category: 1,
        seed: 42,
        ..SyntheticSpec::default()
    };
    generate(&spec).unwrap().train.remove(0)
}

/// Desk-scale model state with default prompt counts.
pub fn benchmark_state() -> ModelState {
    ModelState::init(&EncoderConfig::desk_default(), 0, 8, 4, 0).unwrap()
}

pub fn benchmark_settings() -> PipelineSettings {
    PipelineSettings::default()
}
