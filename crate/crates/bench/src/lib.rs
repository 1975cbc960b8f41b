//! Fixtures shared by the criterion benches.

use cirl_core::grad::Tensor;
use cirl_core::model::{ModelConfig, ModelParams};
use cirl_core::renewal::{GenerationInterval, IncidenceSeries};
use cirl_core::synth::{generate_replica, StepProfileSpec};

pub fn gi() -> GenerationInterval {
    GenerationInterval::discretize(8.0, 3.0, 30).expect("default generation interval")
}

/// One single-step replica with ten seed cases, so it never dies out.
pub fn series() -> IncidenceSeries {
    generate_replica(&StepProfileSpec::single_step(), &gi(), 10, None, 1)
        .expect("replica")
        .observed_incidence
}

pub fn default_params(series: &IncidenceSeries) -> ModelParams {
    ModelParams::init(
        &ModelConfig::default(),
        1.0 + series.max_count() as f64,
        series.len(),
        0,
    )
    .expect("params")
}

/// Deterministic pseudo-random tensor in `[-1, 1)`.
pub fn tensor(shape: &[usize], seed: u64) -> Tensor {
    let n: usize = shape.iter().product();
    let mut state = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
    let data = (0..n)
        .map(|_| {
            state = state
                .wrapping_mul(6364136223846793005)
                .wrapping_add(1442695040888963407);
            (state >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("tensor shape")
}
