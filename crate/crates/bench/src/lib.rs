//! Fixtures shared by the benchmarks.

use gila_core::harness::{Ablation, RunConfig};
use gila_core::{RngStream, Tensor};

/// `rows x cols` standard normal values.
pub fn random_tensor(rows: usize, cols: usize, seed: u64) -> Tensor<f32> {
    let mut rng = RngStream::new(seed, 0);
    Tensor::new(&[rows, cols], (0..rows * cols).map(|_| rng.normal() as f32).collect()).expect("shape")
}

/// Desk-scale defaults with the given ablation preset.
pub fn preset_config(ablation: Ablation) -> RunConfig {
    RunConfig {
        ablation,
        ..RunConfig::default()
    }
}
