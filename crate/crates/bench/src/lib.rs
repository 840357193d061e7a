//! Shared fixtures for the criterion benchmarks in `benches/`.

use adajudge_core::data::{benchmark_specs, generate_suite};
use adajudge_core::{Dataset, ModelConfig, Result};

/// Model shape used by the benchmark suite.
pub fn bench_model_config() -> ModelConfig {
    ModelConfig {
        d: 32,
        k_blocks: 2,
        ..Default::default()
    }
}

/// Three-regime benchmark data with `n_pairs` pairs per regime.
pub fn bench_dataset(n_pairs: usize) -> Result<Dataset> {
    let (store, pairs) = generate_suite(&benchmark_specs(32, n_pairs, 0))?;
    Dataset::new(store, pairs)
}
