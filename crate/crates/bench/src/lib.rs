//! Fixtures shared by the benchmarks.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use finalmlp::model::StreamConfig;
use finalmlp::{FieldInfo, FusionSpec, Model, ModelConfig, Variant};

pub const FIELDS: usize = 10;
pub const VOCAB: usize = 500;

pub fn fields() -> FieldInfo {
    FieldInfo::from_sizes(&[VOCAB; FIELDS])
}

/// A model at the default embedding width with two moderately sized streams.
pub fn model(variant: Variant, heads: usize) -> Model {
    let cfg = ModelConfig {
        variant,
        stream1: StreamConfig::new(vec![200, 200]),
        stream2: StreamConfig::new(vec![200]),
        fusion: FusionSpec::bilinear(heads),
        ..ModelConfig::default()
    };
    Model::new(&cfg, &fields(), 7).expect("valid benchmark config")
}

pub fn ids(batch: usize, seed: u64) -> Array2<u32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array2::from_shape_fn((batch, FIELDS), |_| rng.random_range(0..VOCAB as u32))
}

pub fn labels(batch: usize, seed: u64) -> Vec<u8> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    (0..batch).map(|_| rng.random_range(0..2u8)).collect()
}

pub fn matrix(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-1.0..1.0))
}
