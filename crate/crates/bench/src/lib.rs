//! Shared fixtures for the criterion benchmarks under `benches/`.

use gaussmatch::data::{generate_synthetic_dataset, ShapeDataset};
use gaussmatch::train::ExperimentConfig;

/// The desk-scale preset with `gaussian` Gaussian heads per layer.
pub fn mini_config(gaussian: usize) -> ExperimentConfig {
    ExperimentConfig::preset(if gaussian > 0 { "mini-4gh" } else { "mini-0gh" }).expect("preset exists")
}

/// A small synthetic set with `n` points per shape.
pub fn shapes(count: usize, n: usize) -> ShapeDataset {
    generate_synthetic_dataset(count, n, 0).expect("valid synthetic config")
}
