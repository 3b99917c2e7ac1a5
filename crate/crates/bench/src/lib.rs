//! Shared fixtures for the kernel benchmarks.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use reachnet::actnet::{init_network, ActivationSchedule, InputNormalization, ValueNet};
use reachnet::dynamics::SystemSpec;
use reachnet::trainer::{sample_batch, CurriculumState, SampleBatch};

/// Freshly initialized network for `spec` with inputs normalized to its box.
pub fn network(spec: &SystemSpec, schedule: &str, width: usize) -> ValueNet {
    init_network(
        ActivationSchedule::parse(schedule).expect("valid schedule"),
        spec.dim() + 1,
        width,
        reachnet::actnet::DEFAULT_OMEGA0,
        0,
    )
    .expect("valid network")
    .with_normalization(InputNormalization::from_bounds(&spec.input_bounds()).expect("valid box"))
    .expect("matching normalization")
}

/// Curriculum batch over the full horizon.
pub fn batch(spec: &SystemSpec, size: usize) -> SampleBatch {
    let state = CurriculumState::at(1, 0, 1);
    sample_batch(spec, &state, size, 0.1, &mut ChaCha8Rng::seed_from_u64(0))
}
